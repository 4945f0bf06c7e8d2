use mmodeseg::postprocess::*;
use mmodeseg::types::{validate_ordered, Grid, LabelMap, ProbMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive search over all transition pairs `r1 <= r2`; strict improvement
/// only, so among equal costs the smallest `(r1, r2)` is kept.
fn brute_force(probs: &ProbMap, col: usize) -> (usize, usize, f64) {
    let h = probs.height();
    let mut best = (0, 0, f64::INFINITY);
    for r1 in 0..=h {
        for r2 in r1..=h {
            let mut cost = 0.0;
            for r in 0..h {
                let label = usize::from(r >= r1) + usize::from(r >= r2);
                cost += pixel_cost(probs.get(r, col, label));
            }
            if cost < best.2 {
                best = (r1, r2, cost);
            }
        }
    }
    best
}

fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ProbMap {
    let logits: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
    ProbMap::from_logits_chw(h, w, 3, &logits)
}

fn column_costs(probs: &ProbMap, col: usize) -> Vec<f64> {
    (0..probs.height())
        .flat_map(|r| probs.pixel(r, col).iter().map(|&p| pixel_cost(p)).collect::<Vec<_>>())
        .collect()
}

#[test]
fn dp_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let probs = random_probs(&mut rng, 16, 8);
        let labels = decode_ordered(&probs);
        for col in 0..8 {
            let (r1, r2, cost) = brute_force(&probs, col);
            let (trans, dp_cost) = decode_column(&column_costs(&probs, col), 16, 3);
            assert_eq!(dp_cost.to_bits(), cost.to_bits());
            assert_eq!(trans, vec![r1, r2]);
            let col_labels: Vec<u8> = (0..16).map(|r| labels.get(r, col)).collect();
            assert_eq!(col_labels, labels_from_transitions(&[r1, r2], 16));
        }
    }
}

#[test]
fn noisy_six_pixel_column() {
    // Clean 0,0,1,1,2,2 with the class at row 3 flipped towards 0.
    let rows = [
        [0.9, 0.05, 0.05],
        [0.9, 0.05, 0.05],
        [0.05, 0.9, 0.05],
        [0.6, 0.35, 0.05],
        [0.05, 0.05, 0.9],
        [0.05, 0.05, 0.9],
    ];
    let probs = ProbMap::new(6, 1, 3, rows.iter().flatten().copied().collect()).unwrap();
    let labels = decode_ordered(&probs);
    let (r1, r2, _) = brute_force(&probs, 0);
    let got: Vec<u8> = (0..6).map(|r| labels.get(r, 0)).collect();
    assert_eq!(got, labels_from_transitions(&[r1, r2], 6));
    assert!(validate_ordered(&labels));
}

#[test]
fn exact_ties_prefer_smaller_transitions() {
    // Uniform probabilities: every labeling costs the same.
    let probs = ProbMap::new(4, 1, 3, vec![1.0 / 3.0; 12]).unwrap();
    let labels = decode_ordered(&probs);
    assert!((0..4).all(|r| labels.get(r, 0) == 2));
    let (trans, _) = decode_column(&column_costs(&probs, 0), 4, 3);
    assert_eq!(trans, vec![0, 0]);
}

#[test]
fn shadowed_frame_scores_lower() {
    use mmodeseg::synthgen::{generate_sample, Presets};
    let presets = Presets::builtin();
    let cfg = presets.in_vivo.clone();
    // A shadowed frame and its clean twin; probabilities mimic a model that
    // is confident on visible tissue and barely favours the truth in shadow.
    let index = (0..200)
        .find(|&i| generate_sample(&cfg, i).unwrap().shadow.is_some())
        .expect("some frame is shadowed");
    let shadowed = generate_sample(&cfg, index).unwrap();
    let clean = generate_sample(&cfg.without_shadows(), index).unwrap();
    assert_eq!(shadowed.labels, clean.labels);
    let mimic = |s: &mmodeseg::synthgen::Sample| {
        let (h, w) = (s.labels.height(), s.labels.width());
        let mut p = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                let dark = s.shadow.is_some_and(|(a, b)| c >= a && c < b);
                for k in 0..3u8 {
                    let hit = s.labels.get(r, c) == k;
                    p.push(match (dark, hit) {
                        (true, true) => 0.4,
                        (true, false) => 0.3,
                        (false, true) => 0.96,
                        (false, false) => 0.02,
                    });
                }
            }
        }
        ProbMap::new(h, w, 3, p).unwrap()
    };
    let score = |s: &mmodeseg::synthgen::Sample| {
        let probs = mimic(s);
        confidence(&probs, &decode_ordered(&probs))
    };
    assert!(score(&shadowed) < score(&clean));
}

proptest! {
    #[test]
    fn decoded_traces_are_ordered(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = random_probs(&mut rng, 24, 6);
        let labels = decode_ordered(&probs);
        prop_assert!(validate_ordered(&labels));
        let trace = extract_trace(&labels, 2.61).unwrap();
        for (e, d) in trace.epi_row_px().iter().zip(trace.dm_row_px()) {
            prop_assert_eq!(e.is_some(), d.is_some());
            if let (Some(e), Some(d)) = (e, d) {
                prop_assert!(e <= d);
            }
        }
    }

    #[test]
    fn column_cost_shift_does_not_change_decoding(
        raw in proptest::collection::vec(0u8..40, 30),
        shift in -8i32..8,
    ) {
        // Dyadic costs keep the shifted sums exact.
        let costs: Vec<f64> = raw.iter().map(|&v| v as f64 / 8.0).collect();
        let shifted: Vec<f64> = costs.iter().map(|&v| v + shift as f64 / 4.0).collect();
        prop_assert_eq!(decode_column(&costs, 10, 3).0, decode_column(&shifted, 10, 3).0);
    }

    #[test]
    fn confidence_is_monotone(seed in any::<u64>(), boost in 0.0f32..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (30, 4);
        let probs = random_probs(&mut rng, h, w);
        let labels = decode_ordered(&probs);
        let base = confidence(&probs, &labels);
        let (r, c) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let k = labels.get(r, c) as usize;
        let mut data = probs.as_slice().to_vec();
        let px = &mut data[(r * w + c) * 3..(r * w + c) * 3 + 3];
        let old = px[k];
        let new = old + (1.0 - old) * boost;
        let rest = 1.0 - old;
        for (j, v) in px.iter_mut().enumerate() {
            *v = if j == k {
                new
            } else if rest > 0.0 {
                *v / rest * (1.0 - new)
            } else {
                0.0
            };
        }
        let raised = ProbMap::new(h, w, 3, data).unwrap();
        prop_assert!(confidence(&raised, &labels) >= base - 1e-12);
    }
}

#[test]
fn uniform_column_band() {
    let labels = LabelMap::new(
        Grid::from_fn(20, 2, |r, _| if r < 5 { 0 } else if r < 12 { 1 } else { 2 }),
        3,
    )
    .unwrap();
    let uniform = ProbMap::new(20, 2, 3, vec![1.0 / 3.0; 120]).unwrap();
    assert!((confidence_with_band(&uniform, &labels, 2) - 1.0 / 3.0).abs() < 1e-6);
}
