//! Ordered decoding, interface extraction, confidence and trace smoothing.

use crate::error::{Error, Result};
use crate::types::{validate_ordered, BoundaryTrace, Grid, LabelMap, ProbMap, CLASS_CORNEA};

/// Probability floor inside `-ln p`.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_CONFIDENCE_BAND: usize = 8;
pub const DEFAULT_SMOOTH_WINDOW: usize = 5;

/// `-ln(max(p, PROB_FLOOR))`.
pub fn pixel_cost(p: f32) -> f64 {
    -(p as f64).max(PROB_FLOOR).ln()
}

/// Minimum-cost labeling of one column whose class ids never decrease with
/// depth. `costs` is row-major `[row][class]`.
///
/// Returns the transition rows `r_1 <= .. <= r_(C-1)`, where `r_j` is the
/// first row with class `>= j` (`height` when there is none), together with
/// the total cost. Among equal costs the lexicographically smallest
/// transition vector wins. Costs are summed top-down, one term per row.
pub fn decode_column(costs: &[f64], height: usize, classes: usize) -> (Vec<usize>, f64) {
    assert_eq!(costs.len(), height * classes);
    assert!(classes >= 1);
    let nt = classes - 1;
    if height == 0 {
        return (vec![0; nt], 0.0);
    }
    // State k at row r: best labeling of rows 0..=r with row r in class k.
    // trans[k * nt + j] holds r_(j+1) for j < k; entries j >= k are unset.
    let mut cost = vec![0.0f64; classes];
    let mut trans = vec![0usize; classes * nt];
    cost.copy_from_slice(&costs[..classes]);
    let mut next_cost = vec![0.0f64; classes];
    let mut next_trans = vec![0usize; classes * nt];
    for r in 1..height {
        for k in 0..classes {
            // Predecessor class kp <= k; rows r_(kp+1)..=r_k all equal r.
            let mut best: Option<(f64, usize)> = None;
            for kp in 0..=k {
                let c = cost[kp];
                let better = match best {
                    None => true,
                    Some((bc, bk)) => {
                        c < bc || (c == bc && cmp_candidates(&trans, nt, kp, bk, k, r).is_lt())
                    }
                };
                if better {
                    best = Some((c, kp));
                }
            }
            let (c, kp) = best.expect("at least one predecessor");
            next_cost[k] = c + costs[r * classes + k];
            for j in 0..k {
                next_trans[k * nt + j] = if j < kp { trans[kp * nt + j] } else { r };
            }
        }
        std::mem::swap(&mut cost, &mut next_cost);
        std::mem::swap(&mut trans, &mut next_trans);
    }
    let full = |k: usize, trans: &[usize]| -> Vec<usize> {
        (0..nt)
            .map(|j| if j < k { trans[k * nt + j] } else { height })
            .collect()
    };
    let mut best_k = 0;
    for k in 1..classes {
        let (c, bc) = (cost[k], cost[best_k]);
        if c < bc || (c == bc && full(k, &trans) < full(best_k, &trans)) {
            best_k = k;
        }
    }
    (full(best_k, &trans), cost[best_k])
}

/// Orders two predecessor states by the transition vector they would give
/// state `k` at row `r`.
fn cmp_candidates(
    trans: &[usize],
    nt: usize,
    a: usize,
    b: usize,
    k: usize,
    r: usize,
) -> std::cmp::Ordering {
    let entry = |kp: usize, j: usize| if j < kp { trans[kp * nt + j] } else { r };
    (0..k)
        .map(|j| entry(a, j).cmp(&entry(b, j)))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Column labels from transition rows.
pub fn labels_from_transitions(transitions: &[usize], height: usize) -> Vec<u8> {
    (0..height)
        .map(|r| transitions.iter().filter(|&&t| t <= r).count() as u8)
        .collect()
}

/// Per column, the most probable labeling with non-decreasing class ids
/// down the column.
pub fn decode_ordered(probs: &ProbMap) -> LabelMap {
    let (h, w, c) = (probs.height(), probs.width(), probs.classes());
    let mut grid = Grid::filled(h, w, 0u8);
    let mut costs = vec![0.0f64; h * c];
    for col in 0..w {
        for r in 0..h {
            for (k, &p) in probs.pixel(r, col).iter().enumerate() {
                costs[r * c + k] = pixel_cost(p);
            }
        }
        let (trans, _) = decode_column(&costs, h, c);
        for (r, label) in labels_from_transitions(&trans, h).into_iter().enumerate() {
            grid.set(r, col, label);
        }
    }
    LabelMap::new(grid, c as u8).expect("decoded labels are below the class count")
}

/// First and last cornea row per column; `None` where the column has none.
pub fn extract_trace(labels: &LabelMap, pixel_pitch_um: f64) -> Result<BoundaryTrace> {
    if !validate_ordered(labels) {
        return Err(Error::Contract(
            "label map is not ordered down every column".into(),
        ));
    }
    let (h, w) = (labels.height(), labels.width());
    let mut epi = vec![None; w];
    let mut dm = vec![None; w];
    for col in 0..w {
        for r in 0..h {
            if labels.get(r, col) == CLASS_CORNEA {
                if epi[col].is_none() {
                    epi[col] = Some(r as f64);
                }
                dm[col] = Some(r as f64);
            }
        }
    }
    BoundaryTrace::new(epi, dm, pixel_pitch_um, h)
}

/// [`confidence_with_band`] with the default ±8 row band.
pub fn confidence(probs: &ProbMap, labels: &LabelMap) -> f64 {
    confidence_with_band(probs, labels, DEFAULT_CONFIDENCE_BAND)
}

/// Mean probability of the decoded label over pixels within `band` rows of
/// either decoded interface; 0 when no column has a cornea run.
pub fn confidence_with_band(probs: &ProbMap, labels: &LabelMap, band: usize) -> f64 {
    assert_eq!((probs.height(), probs.width()), (labels.height(), labels.width()));
    let h = labels.height();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for col in 0..labels.width() {
        let mut first = None;
        let mut last = None;
        for r in 0..h {
            if labels.get(r, col) == CLASS_CORNEA {
                first.get_or_insert(r);
                last = Some(r);
            }
        }
        let (Some(e), Some(d)) = (first, last) else {
            continue;
        };
        let near = |r: usize| r.abs_diff(e) <= band || r.abs_diff(d) <= band;
        for r in e.saturating_sub(band)..(d + band + 1).min(h) {
            if near(r) {
                sum += probs.get(r, col, labels.get(r, col) as usize) as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn smooth_series(series: &[Option<f64>], half: usize) -> Vec<Option<f64>> {
    let w = series.len();
    let mut buf = Vec::with_capacity(2 * half + 1);
    (0..w)
        .map(|i| {
            series[i]?;
            let reach = half.min(i).min(w - 1 - i);
            buf.clear();
            buf.extend(series[i - reach..=i + reach].iter().flatten());
            Some(median(&mut buf))
        })
        .collect()
}

/// Running median along columns (odd `window`, shrunk symmetrically at the
/// edges); absent columns are skipped and stay absent.
pub fn smooth_trace(trace: &BoundaryTrace, window: usize) -> Result<BoundaryTrace> {
    if window.is_multiple_of(2) {
        return Err(Error::Usage(format!(
            "smoothing window must be odd, got {window}"
        )));
    }
    let half = window / 2;
    let epi = smooth_series(trace.epi_row_px(), half);
    let dm = smooth_series(trace.dm_row_px(), half);
    let height = trace
        .epi_row_px()
        .iter()
        .chain(trace.dm_row_px())
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v)) as usize
        + 1;
    BoundaryTrace::new(epi, dm, trace.pixel_pitch_um(), height)
}
