//! Overlap, boundary, SSIM and PSNR metrics, and dataset evaluation.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::pipeline::{process_frame, PipelineConfig, StripeModel};
use crate::synthgen::{Manifest, Split};
use crate::types::{BoundaryTrace, Grid, LabelMap, ProbMap};

/// Per-class Dice and IoU plus their unweighted means.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlap {
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub macro_dice: f64,
    pub macro_iou: f64,
}

fn check_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Dice and IoU for every class; a class absent from both maps scores 1.
pub fn overlap(pred: &LabelMap, truth: &LabelMap) -> Result<Overlap> {
    check_same_shape(
        (pred.height(), pred.width()),
        (truth.height(), truth.width()),
    )?;
    let classes = pred.num_classes().max(truth.num_classes()) as usize;
    let mut inter = vec![0usize; classes];
    let mut n_pred = vec![0usize; classes];
    let mut n_truth = vec![0usize; classes];
    for (&p, &t) in pred.grid().as_slice().iter().zip(truth.grid().as_slice()) {
        n_pred[p as usize] += 1;
        n_truth[t as usize] += 1;
        if p == t {
            inter[p as usize] += 1;
        }
    }
    let mut dice = Vec::with_capacity(classes);
    let mut iou = Vec::with_capacity(classes);
    for k in 0..classes {
        let sum = n_pred[k] + n_truth[k];
        if sum == 0 {
            dice.push(1.0);
            iou.push(1.0);
        } else {
            dice.push(2.0 * inter[k] as f64 / sum as f64);
            iou.push(inter[k] as f64 / (sum - inter[k]) as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Overlap {
        macro_dice: mean(&dice),
        macro_iou: mean(&iou),
        dice,
        iou,
    })
}

/// `(macro_dice, macro_iou)`.
pub fn dice_iou(pred: &LabelMap, truth: &LabelMap) -> Result<(f64, f64)> {
    overlap(pred, truth).map(|o| (o.macro_dice, o.macro_iou))
}

/// Mean absolute interface error over columns where the prediction exists.
/// MAE fields are `None` when no column is covered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryError {
    pub epi_mae_px: Option<f64>,
    pub dm_mae_px: Option<f64>,
    pub epi_mae_um: Option<f64>,
    pub dm_mae_um: Option<f64>,
    /// Fraction of columns where both interfaces were predicted.
    pub coverage: f64,
}

fn mae(pred: &[Option<f64>], truth: &[Option<f64>]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (col, (p, t)) in pred.iter().zip(truth).enumerate() {
        let t = t.ok_or_else(|| Error::Contract(format!("truth trace is missing column {col}")))?;
        if let Some(p) = p {
            sum += (p - t).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

pub fn boundary_mae(pred: &BoundaryTrace, truth: &BoundaryTrace) -> Result<BoundaryError> {
    if pred.width() != truth.width() {
        return Err(Error::Dimension(format!(
            "trace widths differ: {} vs {}",
            pred.width(),
            truth.width()
        )));
    }
    let epi = mae(pred.epi_row_px(), truth.epi_row_px())?;
    let dm = mae(pred.dm_row_px(), truth.dm_row_px())?;
    let covered = pred
        .epi_row_px()
        .iter()
        .zip(pred.dm_row_px())
        .filter(|(e, d)| e.is_some() && d.is_some())
        .count();
    let pitch = truth.pixel_pitch_um();
    Ok(BoundaryError {
        epi_mae_px: epi,
        dm_mae_px: dm,
        epi_mae_um: epi.map(|v| v * pitch),
        dm_mae_um: dm.map(|v| v * pitch),
        coverage: if pred.width() == 0 {
            0.0
        } else {
            covered as f64 / pred.width() as f64
        },
    })
}

/// Multi-channel field in `[0, 1]` compared by SSIM and PSNR.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    pub channels: Vec<Grid<f64>>,
}

impl ChannelMap {
    /// Predicted probability of each non-background class (1 and 2).
    pub fn non_background(probs: &ProbMap) -> Self {
        let (h, w) = (probs.height(), probs.width());
        ChannelMap {
            channels: (1..probs.classes())
                .map(|k| Grid::from_fn(h, w, |r, c| probs.get(r, c, k) as f64))
                .collect(),
        }
    }

    /// One-hot indicator of each non-background class.
    pub fn non_background_truth(labels: &LabelMap) -> Self {
        let (h, w) = (labels.height(), labels.width());
        ChannelMap {
            channels: (1..labels.num_classes())
                .map(|k| Grid::from_fn(h, w, |r, c| f64::from(u8::from(labels.get(r, c) == k))))
                .collect(),
        }
    }

    pub fn single(grid: Grid<f64>) -> Self {
        ChannelMap {
            channels: vec![grid],
        }
    }

    fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self
            .channels
            .first()
            .map(|g| (g.height(), g.width()))
            .unwrap_or((0, 0));
        (self.channels.len(), h, w)
    }
}

fn check_maps(a: &ChannelMap, b: &ChannelMap) -> Result<(usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || a.channels.iter().chain(&b.channels).any(|g| (g.height(), g.width()) != (sa.1, sa.2)) {
        return Err(Error::Dimension(format!(
            "map shapes differ: {sa:?} vs {sb:?}"
        )));
    }
    Ok(sa)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian filter over the fully-covered ('valid') region.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..n).map(|i| k[i] * data[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..n).map(|i| k[i] * rows[(r + i) * wo + c]).sum();
        }
    }
    out
}

fn ssim_channel(a: &Grid<f64>, b: &Grid<f64>, k: &[f64]) -> f64 {
    let (h, w) = (a.height(), a.width());
    let (x, y) = (a.as_slice(), b.as_slice());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(x, h, w, k);
    let my = filter_valid(y, h, w, k);
    let sxx = filter_valid(&xx, h, w, k);
    let syy = filter_valid(&yy, h, w, k);
    let sxy = filter_valid(&xy, h, w, k);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    total / mx.len() as f64
}

/// Mean local SSIM (Gaussian window 11, sigma 1.5, dynamic range 1) over
/// the valid region, averaged over channels and clamped to `[0, 1]`.
pub fn ssim(pred: &ChannelMap, truth: &ChannelMap) -> Result<f64> {
    let (c, h, w) = check_maps(pred, truth)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    if c == 0 {
        return Err(Error::Dimension("SSIM of maps without channels".into()));
    }
    let k = gaussian_kernel();
    let mean = pred
        .channels
        .iter()
        .zip(&truth.channels)
        .map(|(a, b)| ssim_channel(a, b, &k))
        .sum::<f64>()
        / c as f64;
    Ok(mean.clamp(0.0, 1.0))
}

/// Mean squared error over every pixel of every channel.
pub fn mse(pred: &ChannelMap, truth: &ChannelMap) -> Result<f64> {
    let (c, h, w) = check_maps(pred, truth)?;
    let n = c * h * w;
    if n == 0 {
        return Err(Error::Dimension("MSE of empty maps".into()));
    }
    let sum: f64 = pred
        .channels
        .iter()
        .zip(&truth.channels)
        .flat_map(|(a, b)| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)))
        .sum();
    Ok(sum / n as f64)
}

/// `10 log10(1 / mse)`; `+inf` for identical maps.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(pred: &ChannelMap, truth: &ChannelMap) -> Result<f64> {
    mse(pred, truth).map(psnr_from_mse)
}

/// Serialises non-finite floats as the strings `"inf"`, `"-inf"` or `"nan"`.
pub mod float_or_inf {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

/// Metrics of a single frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_id: u64,
    pub macro_dice: f64,
    pub macro_iou: f64,
    pub epi_mae_px: Option<f64>,
    pub dm_mae_px: Option<f64>,
    pub coverage: f64,
    pub ssim: f64,
    #[serde(with = "float_or_inf")]
    pub psnr_db: f64,
    pub confidence: f64,
}

/// Dataset-level means over frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_dice: f64,
    pub macro_iou: f64,
    /// Mean over frames with at least one covered column; `None` otherwise.
    pub epi_mae_px: Option<f64>,
    pub epi_mae_um: Option<f64>,
    pub dm_mae_px: Option<f64>,
    pub dm_mae_um: Option<f64>,
    pub coverage: f64,
    pub ssim: f64,
    #[serde(with = "float_or_inf")]
    pub psnr_db: f64,
    pub mean_confidence: f64,
    pub n_frames: usize,
    /// Full-pipeline frames per second during evaluation (timing field).
    pub hz: f64,
}

impl EvalReport {
    /// Aggregates frame metrics by unweighted mean.
    pub fn from_frames(frames: &[FrameMetrics], pixel_pitch_um: f64, hz: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Usage("cannot aggregate zero frames".into()));
        }
        let n = frames.len() as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
        let mean_opt = |f: fn(&FrameMetrics) -> Option<f64>| {
            let vals: Vec<f64> = frames.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let epi = mean_opt(|m| m.epi_mae_px);
        let dm = mean_opt(|m| m.dm_mae_px);
        Ok(EvalReport {
            macro_dice: mean(|m| m.macro_dice),
            macro_iou: mean(|m| m.macro_iou),
            epi_mae_px: epi,
            epi_mae_um: epi.map(|v| v * pixel_pitch_um),
            dm_mae_px: dm,
            dm_mae_um: dm.map(|v| v * pixel_pitch_um),
            coverage: mean(|m| m.coverage),
            ssim: mean(|m| m.ssim),
            psnr_db: mean(|m| m.psnr_db),
            mean_confidence: mean(|m| m.confidence),
            n_frames: frames.len(),
            hz,
        })
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        EvalReport {
            hz: 0.0,
            ..self.clone()
        }
    }

    /// Column header in the order `SSIM & PSNR & IoU & Dice & Hz`.
    pub fn table_header() -> &'static str {
        "SSIM & PSNR & IoU & Dice & Hz"
    }

    /// One table row in the order of [`EvalReport::table_header`].
    pub fn table_row(&self) -> String {
        let psnr = if self.psnr_db.is_finite() {
            format!("{:.2}", self.psnr_db)
        } else {
            "inf".to_string()
        };
        format!(
            "{:.4} & {} & {:.4} & {:.4} & {:.1}",
            self.ssim, psnr, self.macro_iou, self.macro_dice, self.hz
        )
    }
}

/// Scores one frame's outputs against its ground truth.
pub fn frame_metrics(
    frame_id: u64,
    probs: &ProbMap,
    labels: &LabelMap,
    trace: &BoundaryTrace,
    confidence: f64,
    truth_labels: &LabelMap,
    truth_trace: &BoundaryTrace,
) -> Result<FrameMetrics> {
    let ov = overlap(labels, truth_labels)?;
    let be = boundary_mae(trace, truth_trace)?;
    let pred_map = ChannelMap::non_background(probs);
    let truth_map = ChannelMap::non_background_truth(truth_labels);
    Ok(FrameMetrics {
        frame_id,
        macro_dice: ov.macro_dice,
        macro_iou: ov.macro_iou,
        epi_mae_px: be.epi_mae_px,
        dm_mae_px: be.dm_mae_px,
        coverage: be.coverage,
        ssim: ssim(&pred_map, &truth_map)?,
        psnr_db: psnr(&pred_map, &truth_map)?,
        confidence,
    })
}

/// Runs the full frame pipeline over one manifest split and scores it.
/// When `out_dir` is given, writes `eval_report.json` and `eval_frames.csv`.
pub fn evaluate(
    model: &dyn StripeModel,
    manifest: &Manifest,
    split: Split,
    config: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<(EvalReport, Vec<FrameMetrics>)> {
    let items = manifest.split(split).collect::<Vec<_>>();
    if items.is_empty() {
        return Err(Error::Usage(format!("split {split:?} is empty")));
    }
    let mut frames = Vec::with_capacity(items.len());
    let mut busy = 0.0f64;
    let mut pitch = crate::types::DEFAULT_PIXEL_PITCH_UM;
    for item in items {
        let (frame, truth_labels, truth_trace) = manifest.load_item(item)?;
        pitch = truth_trace.pixel_pitch_um();
        let start = Instant::now();
        let out = process_frame(&frame, model, config)?;
        busy += start.elapsed().as_secs_f64();
        frames.push(frame_metrics(
            frame.meta().frame_id,
            &out.probs,
            &out.labels,
            &out.trace,
            out.confidence,
            &truth_labels,
            &truth_trace,
        )?);
    }
    let hz = if busy > 0.0 {
        frames.len() as f64 / busy
    } else {
        0.0
    };
    let report = EvalReport::from_frames(&frames, pitch, hz)?;
    if let Some(dir) = out_dir {
        write_eval(dir, &report, &frames)?;
    }
    Ok((report, frames))
}

pub fn write_eval(dir: &Path, report: &EvalReport, frames: &[FrameMetrics]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("eval_report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::json("eval report", e))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join("eval_frames.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Csv {
        context: csv_path.display().to_string(),
        message: e.to_string(),
    })?;
    for f in frames {
        w.serialize(f).map_err(|e| Error::Csv {
            context: csv_path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(Grid::from_vec(h, w, v.to_vec()).unwrap(), 3).unwrap()
    }

    #[test]
    fn identical_maps() {
        let a = lm(2, 2, &[0, 1, 1, 2]);
        assert_eq!(dice_iou(&a, &a).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn half_overlapping_band() {
        // 4x1 column: truth band rows 0-1, prediction rows 1-2.
        let truth = lm(4, 1, &[1, 1, 2, 2]);
        let pred = lm(4, 1, &[0, 1, 1, 2]);
        let o = overlap(&pred, &truth).unwrap();
        assert!((o.dice[1] - 0.5).abs() < 1e-15);
        assert!((o.iou[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn complementary_maps_score_zero() {
        let truth = lm(1, 3, &[0, 1, 2]);
        let pred = lm(1, 3, &[1, 2, 0]);
        assert_eq!(dice_iou(&pred, &truth).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn boundary_examples() {
        let truth = BoundaryTrace::new(vec![Some(10.0); 4], vec![Some(20.0); 4], 2.61, 64).unwrap();
        let e = boundary_mae(&truth, &truth).unwrap();
        assert_eq!((e.epi_mae_px, e.dm_mae_um), (Some(0.0), Some(0.0)));

        let pred = BoundaryTrace::new(vec![Some(10.0); 4], vec![Some(21.26); 4], 2.61, 64).unwrap();
        let e = boundary_mae(&pred, &truth).unwrap();
        assert!((e.dm_mae_um.unwrap() - 3.2886).abs() < 1e-9);
        assert_eq!(e.dm_mae_um.unwrap(), e.dm_mae_px.unwrap() * 2.61);

        let pred = BoundaryTrace::new(
            vec![Some(12.0), Some(12.0), Some(10.0), Some(10.0)],
            vec![Some(20.0); 4],
            2.61,
            64,
        )
        .unwrap();
        assert_eq!(boundary_mae(&pred, &truth).unwrap().epi_mae_px, Some(1.0));

        let none = BoundaryTrace::new(vec![None; 4], vec![None; 4], 2.61, 64).unwrap();
        let e = boundary_mae(&none, &truth).unwrap();
        assert_eq!((e.epi_mae_px, e.coverage), (None, 0.0));
    }

    #[test]
    fn psnr_arithmetic() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(1e-3) - 30.0).abs() < 1e-9);
        let m = ChannelMap::single(Grid::filled(12, 12, 0.5));
        assert_eq!(psnr(&m, &m).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_examples() {
        let checker = Grid::from_fn(32, 32, |r, c| ((r + c) % 2) as f64);
        let inverse = checker.map(|v| 1.0 - v);
        let a = ChannelMap::single(checker);
        let b = ChannelMap::single(inverse);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&a, &b).unwrap() < 0.5);
        assert!(ssim(&a, &ChannelMap::single(Grid::filled(8, 8, 0.0))).is_err());
    }

    #[test]
    fn report_serialises_infinite_psnr() {
        let f = FrameMetrics {
            frame_id: 0,
            macro_dice: 1.0,
            macro_iou: 1.0,
            epi_mae_px: Some(0.0),
            dm_mae_px: Some(0.0),
            coverage: 1.0,
            ssim: 1.0,
            psnr_db: f64::INFINITY,
            confidence: 1.0,
        };
        let r = EvalReport::from_frames(&[f], 2.61, 50.0).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr_db\":\"inf\""), "{json}");
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(EvalReport::table_header(), "SSIM & PSNR & IoU & Dice & Hz");
        assert_eq!(r.table_row(), "1.0000 & inf & 1.0000 & 1.0000 & 50.0");
    }
}
