//! Stripe-batch training with AdamW, per-epoch full-frame validation and
//! checkpoint selection.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{loss_total_grad, LossWeights};
use crate::metrics::overlap;
use crate::nn::{forward_train, save_checkpoint, AdamW, ModelParams, NetworkConfig, Tensor};
use crate::pipeline::{process_until_decode, NetworkModel, PipelineConfig};
use crate::preprocess::{fit_norm, NormStats};
use crate::synthgen::{Manifest, Split};
use crate::types::{BoundaryTrace, Frame, LabelMap, NUM_CLASSES, STRIPE_WIDTH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size_stripes: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub hflip_prob: f64,
    pub mixed_precision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size_stripes: 8,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            seed: 7,
            jitter_brightness: 0.1,
            jitter_contrast: 0.1,
            hflip_prob: 0.5,
            mixed_precision: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size_stripes < 2 {
            return Err(Error::config(
                "train.batch_size_stripes",
                "must be at least 2 (batch statistics)",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be finite and > 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be finite and >= 0"));
        }
        for (key, v) in [
            ("train.jitter_brightness", self.jitter_brightness),
            ("train.jitter_contrast", self.jitter_contrast),
            ("train.hflip_prob", self.hflip_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Contents of `train.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainJob {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

impl TrainJob {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }
}

/// Intensity jitter on the frame; horizontal flip of frame and mask together.
pub fn augment(
    frame: &Frame,
    mask: &LabelMap,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Frame, LabelMap)> {
    let brightness = if config.jitter_brightness > 0.0 {
        rng.gen_range(-config.jitter_brightness..=config.jitter_brightness)
    } else {
        0.0
    };
    let contrast = if config.jitter_contrast > 0.0 {
        1.0 + rng.gen_range(-config.jitter_contrast..=config.jitter_contrast)
    } else {
        1.0
    };
    let flip = config.hflip_prob > 0.0 && rng.gen_bool(config.hflip_prob);

    let mut pixels = if brightness == 0.0 && contrast == 1.0 {
        frame.pixels().clone()
    } else {
        let (b, c) = (brightness as f32, contrast as f32);
        frame.pixels().map(|v| (c * v + b).clamp(0.0, 1.0))
    };
    let mut mask = mask.clone();
    if flip {
        pixels = pixels.flip_horizontal();
        mask = mask.flip_horizontal();
    }
    Ok((frame.with_pixels(pixels)?, mask))
}

/// Validation outcome of one epoch and where its weights were written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub epoch: u32,
    pub val_boundary_mae_px: f64,
    pub val_macro_dice: f64,
    pub checkpoint: PathBuf,
}

impl SelectionRecord {
    /// Lower boundary error first, then higher Dice, then the earlier epoch.
    pub fn selection_cmp(&self, other: &Self) -> Ordering {
        self.val_boundary_mae_px
            .total_cmp(&other.val_boundary_mae_px)
            .then(other.val_macro_dice.total_cmp(&self.val_macro_dice))
            .then(self.epoch.cmp(&other.epoch))
    }
}

pub fn select_best(records: &[SelectionRecord]) -> Result<SelectionRecord> {
    records
        .iter()
        .min_by(|a, b| a.selection_cmp(b))
        .cloned()
        .ok_or_else(|| Error::Usage("no selection records to choose from".into()))
}

/// One row of `history.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub loss_ce: f64,
    pub loss_dice: f64,
    pub loss_topo: f64,
    pub val_mae_px: f64,
    pub val_dice: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: SelectionRecord,
    /// Weights of the best epoch.
    pub params: ModelParams,
    pub records: Vec<SelectionRecord>,
    pub history: Vec<EpochRecord>,
    /// Mean total loss per epoch.
    pub loss_curve: Vec<f64>,
    pub wall_time_s: f64,
}

/// Mean absolute row error over columns where the truth has the interface;
/// a missing prediction costs `height / 4` pixels.
pub fn penalized_mae(pred: &[Option<f64>], truth: &[Option<f64>], height: usize) -> Option<f64> {
    let penalty = height as f64 / 4.0;
    let errs: Vec<f64> = pred
        .iter()
        .zip(truth)
        .filter_map(|(p, t)| t.map(|t| p.map_or(penalty, |p| (p - t).abs())))
        .collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Equal-weight average of epithelium and DM penalised MAE.
pub fn selection_mae(pred: &BoundaryTrace, truth: &BoundaryTrace, height: usize) -> f64 {
    let epi = penalized_mae(pred.epi_row_px(), truth.epi_row_px(), height);
    let dm = penalized_mae(pred.dm_row_px(), truth.dm_row_px(), height);
    match (epi, dm) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0.0,
    }
}

struct Example {
    frame: Frame,
    labels: LabelMap,
    trace: BoundaryTrace,
}

fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Example>> {
    manifest
        .split(split)
        .map(|item| {
            manifest.load_item(item).map(|(frame, labels, trace)| Example {
                frame,
                labels,
                trace,
            })
        })
        .collect()
}

fn stripe_input(frame: &Frame, norm: &NormStats, stripe: usize, out: &mut Vec<f32>) {
    let start = stripe * STRIPE_WIDTH;
    let px = frame.pixels();
    for r in 0..px.height() {
        out.extend(px.row(r)[start..start + STRIPE_WIDTH].iter().map(|&v| norm.apply(v)));
    }
}

fn stripe_labels(labels: &LabelMap, stripe: usize) -> Result<LabelMap> {
    LabelMap::new(
        labels.grid().columns(stripe * STRIPE_WIDTH, STRIPE_WIDTH),
        labels.num_classes(),
    )
}

/// Mean selection MAE and macro Dice over the validation frames, computed on
/// reassembled full frames.
fn validate_frames(model: &NetworkModel, frames: &[Example], mixed_precision: bool) -> Result<(f64, f64)> {
    let cfg = PipelineConfig {
        mixed_precision,
        ..PipelineConfig::default()
    };
    let mut mae = 0.0;
    let mut dice = 0.0;
    for ex in frames {
        let out = process_until_decode(&ex.frame, model, &cfg)?;
        debug_assert_eq!(
            (out.labels.height(), out.labels.width()),
            (ex.frame.height_px(), ex.frame.width_px())
        );
        mae += selection_mae(&out.trace, &ex.trace, ex.frame.height_px());
        dice += overlap(&out.labels, &ex.labels)?.macro_dice;
    }
    let n = frames.len() as f64;
    Ok((mae / n, dice / n))
}

/// Options outside the job description.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Called after each epoch's validation.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
    /// Skip writing a checkpoint per epoch; only `best.ckpt` is written.
    pub best_only: bool,
}

/// Trains on the manifest's train split and selects on its val split.
///
/// Writes `history.csv`, `checkpoints/epoch_NNN.ckpt` and `best.ckpt`
/// under `out_dir`.
pub fn train(job: &TrainJob, manifest: &Manifest, out_dir: &Path) -> Result<TrainOutcome> {
    train_with_hooks(job, manifest, out_dir, TrainHooks::default())
}

pub fn train_with_hooks(
    job: &TrainJob,
    manifest: &Manifest,
    out_dir: &Path,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    job.validate()?;
    let cfg = &job.train;
    if manifest.count(Split::Train) == 0 || manifest.count(Split::Val) == 0 {
        return Err(Error::Usage(format!(
            "training needs non-empty train and val splits (got {} and {})",
            manifest.count(Split::Train),
            manifest.count(Split::Val)
        )));
    }
    if job.network.in_channels != 1 || job.network.num_classes != NUM_CLASSES {
        return Err(Error::config(
            "network.num_classes",
            format!("training expects 1 input channel and {NUM_CLASSES} classes"),
        ));
    }
    let started = Instant::now();
    let train_set = load_split(manifest, Split::Train)?;
    let val_set = load_split(manifest, Split::Val)?;

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let mut params = ModelParams::init(&job.network, cfg.seed)?;
    params.set_norm_stats(fit_norm(train_set.iter().map(|e| &e.frame))?);
    let norm = params.norm_stats();
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);

    let stripes_per_frame = train_set[0].frame.width_px() / STRIPE_WIDTH;
    let height = train_set[0].frame.height_px();
    let mut history = Vec::new();
    let mut records = Vec::new();
    let mut loss_curve = Vec::new();
    let mut best: Option<(SelectionRecord, ModelParams)> = None;

    for epoch in 0..cfg.epochs {
        let augmented: Vec<(Frame, LabelMap)> = train_set
            .iter()
            .map(|ex| augment(&ex.frame, &ex.labels, cfg, &mut rng))
            .collect::<Result<_>>()?;
        let mut order: Vec<(usize, usize)> = (0..augmented.len())
            .flat_map(|f| (0..stripes_per_frame).map(move |s| (f, s)))
            .collect();
        order.shuffle(&mut rng);

        let (mut ce, mut dice, mut topo, mut total, mut steps) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size_stripes) {
            if chunk.len() < 2 {
                continue;
            }
            let mut data = Vec::with_capacity(chunk.len() * height * STRIPE_WIDTH);
            let mut targets = Vec::with_capacity(chunk.len());
            for &(f, s) in chunk {
                stripe_input(&augmented[f].0, &norm, s, &mut data);
                targets.push(stripe_labels(&augmented[f].1, s)?);
            }
            let batch = Tensor::from_vec([chunk.len(), 1, height, STRIPE_WIDTH], data);
            let fwd = forward_train(&params, batch, cfg.mixed_precision)?;
            let (loss, grad) = loss_total_grad(fwd.logits(), &targets, &job.loss, epoch)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, step {steps}: ce={} dice={} topo={}",
                    loss.ce, loss.dice, loss.topo
                )));
            }
            let grads = fwd.backward(grad);
            if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for {} at epoch {epoch}, step {steps}",
                    params.names()[i]
                )));
            }
            let (layers, stats) = fwd.bn_stats();
            let (layers, stats) = (layers.to_vec(), stats.to_vec());
            drop(fwd);
            opt.step(params.tensors_mut(), &grads);
            params.update_running_stats(&layers, &stats);
            ce += loss.ce;
            dice += loss.dice;
            topo += loss.topo;
            total += loss.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;

        let model = NetworkModel::new(params);
        let validated = validate_frames(&model, &val_set, cfg.mixed_precision);
        params = model.params;
        let (val_mae, val_dice) = validated?;

        let checkpoint = if hooks.best_only {
            out_dir.join("best.ckpt")
        } else {
            let path = ckpt_dir.join(format!("epoch_{epoch:03}.ckpt"));
            save_checkpoint(&params, &path)?;
            path
        };
        let record = SelectionRecord {
            epoch,
            val_boundary_mae_px: val_mae,
            val_macro_dice: val_dice,
            checkpoint,
        };
        let improved = best
            .as_ref()
            .is_none_or(|(b, _)| record.selection_cmp(b) == Ordering::Less);
        if improved {
            best = Some((record.clone(), params.clone()));
        }
        records.push(record);
        let row = EpochRecord {
            epoch,
            loss_ce: ce / n,
            loss_dice: dice / n,
            loss_topo: topo / n,
            val_mae_px: val_mae,
            val_dice,
        };
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&row);
        }
        history.push(row);
        loss_curve.push(total / n);
    }

    let (best_record, best_params) = best.expect("at least one epoch ran");
    save_checkpoint(&best_params, &out_dir.join("best.ckpt"))?;
    write_history(&out_dir.join("history.csv"), &history)?;
    Ok(TrainOutcome {
        best: best_record,
        params: best_params,
        records,
        history,
        loss_curve,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::Csv {
        context: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in history {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
