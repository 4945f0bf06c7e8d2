//! Frame-by-frame deployment loop: tile, normalise, transfer, infer,
//! reassemble, decode, gate and overlay, with stage timing and pacing.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::nn::{forward, forward_mixed_precision, ModelParams, Tensor};
use crate::postprocess::{confidence, decode_ordered, extract_trace};
use crate::preprocess::{crop, pad16, reassemble, tile, NormStats};
use crate::synthgen::{generate_sample, PhantomConfig};
use crate::types::{BoundaryTrace, Frame, Grid3, LabelMap, ProbMap, CLASS_CORNEA, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub cap_hz: f64,
    pub confidence_threshold: f64,
    pub hold_last_on_reject: bool,
    pub batch_stripes: usize,
    pub mixed_precision: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cap_hz: 80.0,
            confidence_threshold: 0.6,
            hold_last_on_reject: true,
            batch_stripes: 8,
            mixed_precision: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cap_hz > 0.0) || self.cap_hz.is_nan() {
            return Err(Error::config("pipeline.cap_hz", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::config(
                "pipeline.confidence_threshold",
                "must lie in [0, 1]",
            ));
        }
        if self.batch_stripes == 0 {
            return Err(Error::config("pipeline.batch_stripes", "must be positive"));
        }
        Ok(())
    }
}

/// What a model sees besides the pixels of a batch.
#[derive(Debug, Clone, Copy)]
pub struct InferContext<'a> {
    pub frame_id: u64,
    /// Stripe index of each batch item.
    pub stripe_indices: &'a [usize],
    pub mixed_precision: bool,
}

/// Anything that maps a `B x 1 x H x W` batch of normalised, padded stripes
/// to `B x C x H x W` logits.
pub trait StripeModel: Send + Sync {
    fn infer(&self, batch: &Tensor<f32>, ctx: InferContext<'_>) -> Result<Tensor<f32>>;

    fn norm_stats(&self) -> NormStats {
        NormStats::default()
    }

    fn describe(&self) -> String;
}

/// The trained network.
pub struct NetworkModel {
    pub params: ModelParams,
}

impl NetworkModel {
    pub fn new(params: ModelParams) -> Self {
        NetworkModel { params }
    }
}

impl StripeModel for NetworkModel {
    fn infer(&self, batch: &Tensor<f32>, ctx: InferContext<'_>) -> Result<Tensor<f32>> {
        if ctx.mixed_precision {
            forward_mixed_precision(&self.params, batch)
        } else {
            forward(&self.params, batch)
        }
    }

    fn norm_stats(&self) -> NormStats {
        self.params.norm_stats()
    }

    fn describe(&self) -> String {
        format!(
            "network widths {:?} ({} params)",
            self.params.config().stage_widths,
            self.params.param_count()
        )
    }
}

fn one_hot_logits(
    out: &mut [f32],
    labels: impl Fn(usize, usize) -> Option<u8>,
    h: usize,
    w: usize,
    scale: f32,
) {
    let plane = h * w;
    for r in 0..h {
        for c in 0..w {
            let label = labels(r, c).unwrap_or(0) as usize;
            for k in 0..NUM_CLASSES {
                out[k * plane + r * w + c] = if k == label { scale } else { -scale };
            }
        }
    }
}

/// Emits saturated logits of the ground truth registered for each frame id;
/// the margin is large enough that softmax yields exact 0 and 1 in f32.
pub struct OracleModel {
    truth: HashMap<u64, LabelMap>,
    scale: f32,
}

impl OracleModel {
    pub fn new() -> Self {
        OracleModel {
            truth: HashMap::new(),
            scale: 60.0,
        }
    }

    pub fn insert(&mut self, frame_id: u64, labels: LabelMap) {
        self.truth.insert(frame_id, labels);
    }
}

impl Default for OracleModel {
    fn default() -> Self {
        Self::new()
    }
}

impl StripeModel for OracleModel {
    fn infer(&self, batch: &Tensor<f32>, ctx: InferContext<'_>) -> Result<Tensor<f32>> {
        let truth = self
            .truth
            .get(&ctx.frame_id)
            .ok_or_else(|| Error::Usage(format!("oracle has no truth for frame {}", ctx.frame_id)))?;
        let [b, _, h, w] = batch.shape();
        let mut out = Tensor::zeros([b, NUM_CLASSES, h, w]);
        let item = NUM_CLASSES * h * w;
        for (i, &s) in ctx.stripe_indices.iter().enumerate() {
            let offset = s * w;
            one_hot_logits(
                &mut out.data_mut()[i * item..(i + 1) * item],
                |r, c| (r < truth.height() && offset + c < truth.width()).then(|| truth.get(r, offset + c)),
                h,
                w,
                self.scale,
            );
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        "oracle (ground truth)".into()
    }
}

/// Cheap input-independent model: a fixed flat band with confident logits.
pub struct FixedBandModel {
    pub epi_row: usize,
    pub dm_row: usize,
}

impl StripeModel for FixedBandModel {
    fn infer(&self, batch: &Tensor<f32>, _ctx: InferContext<'_>) -> Result<Tensor<f32>> {
        let [b, _, h, w] = batch.shape();
        let mut out = Tensor::zeros([b, NUM_CLASSES, h, w]);
        let item = NUM_CLASSES * h * w;
        for i in 0..b {
            one_hot_logits(
                &mut out.data_mut()[i * item..(i + 1) * item],
                |r, _| {
                    Some(if r < self.epi_row {
                        0
                    } else if r <= self.dm_row {
                        CLASS_CORNEA
                    } else {
                        2
                    })
                },
                h,
                w,
                8.0,
            );
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        "fixed-band stub".into()
    }
}

/// Random logits seeded by frame id; confidence hovers far below 1.
pub struct NoisyModel {
    pub amplitude: f32,
}

impl StripeModel for NoisyModel {
    fn infer(&self, batch: &Tensor<f32>, ctx: InferContext<'_>) -> Result<Tensor<f32>> {
        let [b, _, h, w] = batch.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.frame_id);
        let n = b * NUM_CLASSES * h * w;
        let data = (0..n)
            .map(|_| self.amplitude * rng.sample::<f32, _>(StandardNormal))
            .collect();
        Ok(Tensor::from_vec([b, NUM_CLASSES, h, w], data))
    }

    fn describe(&self) -> String {
        "noisy stub".into()
    }
}

/// Per-stage wall time of one frame, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub tile_ms: f64,
    pub norm_ms: f64,
    pub transfer_ms: f64,
    pub infer_ms: f64,
    pub reassemble_ms: f64,
    pub decode_ms: f64,
    pub overlay_ms: f64,
}

impl StageTimings {
    pub fn sum_ms(&self) -> f64 {
        self.as_array().iter().sum()
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.tile_ms,
            self.norm_ms,
            self.transfer_ms,
            self.infer_ms,
            self.reassemble_ms,
            self.decode_ms,
            self.overlay_ms,
        ]
    }
}

pub const STAGE_NAMES: [&str; 7] = [
    "tile",
    "norm",
    "transfer",
    "infer",
    "reassemble",
    "decode",
    "overlay",
];

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl OverlayImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        io::save_rgb_png(self.width, self.height, &self.rgb, path)
    }
}

pub const BAND_ALPHA: f32 = 0.35;
pub const BAND_TINT: [u8; 3] = [0, 170, 255];
pub const EPI_COLOR: [u8; 3] = [255, 214, 0];
pub const DM_COLOR: [u8; 3] = [255, 0, 160];

fn gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale frame, cornea band tinted, 1 px interface lines.
pub fn render_overlay(frame: &Frame, labels: &LabelMap, trace: &BoundaryTrace) -> OverlayImage {
    let (h, w) = (frame.height_px(), frame.width_px());
    let mut rgb = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let g = gray(frame.pixels().get(r, c));
            if labels.get(r, c) == CLASS_CORNEA {
                for t in BAND_TINT {
                    let v = (1.0 - BAND_ALPHA) * g as f32 + BAND_ALPHA * t as f32;
                    rgb.push(v.round() as u8);
                }
            } else {
                rgb.extend_from_slice(&[g, g, g]);
            }
        }
    }
    let mut img = OverlayImage { width: w, height: h, rgb };
    for (rows, color) in [(trace.epi_row_px(), EPI_COLOR), (trace.dm_row_px(), DM_COLOR)] {
        for (c, row) in rows.iter().enumerate().take(w) {
            if let Some(row) = row {
                let r = (row.round() as usize).min(h - 1);
                let i = (r * w + c) * 3;
                img.rgb[i..i + 3].copy_from_slice(&color);
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GateDecision {
    Accept,
    Reject,
}

/// Accepts iff `confidence >= threshold`.
pub fn gate(confidence: f64, config: &PipelineConfig) -> GateDecision {
    if confidence >= config.confidence_threshold {
        GateDecision::Accept
    } else {
        GateDecision::Reject
    }
}

/// Everything computed for one frame.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub frame_id: u64,
    pub probs: ProbMap,
    pub labels: LabelMap,
    pub trace: BoundaryTrace,
    pub confidence: f64,
    pub overlay: Option<OverlayImage>,
    pub timings: StageTimings,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Runs every stage up to and including decode; overlay is left to the caller.
pub(crate) fn process_until_decode(frame: &Frame, model: &dyn StripeModel, config: &PipelineConfig) -> Result<FrameOutput> {
    let mut t = StageTimings::default();

    let start = Instant::now();
    let stripes = tile(frame)?;
    t.tile_ms = ms(start);

    let start = Instant::now();
    let norm = model.norm_stats();
    let padded: Vec<_> = stripes
        .iter()
        .map(|s| pad16(&norm.normalize(&s.pixels)))
        .collect();
    t.norm_ms = ms(start);

    let start = Instant::now();
    let (ph, pw) = (padded[0].0.height(), padded[0].0.width());
    let dims = padded[0].1;
    let plane = ph * pw;
    let mut batches = Vec::new();
    for chunk in (0..padded.len()).collect::<Vec<_>>().chunks(config.batch_stripes) {
        let mut data = Vec::with_capacity(chunk.len() * plane);
        for &i in chunk {
            data.extend_from_slice(padded[i].0.as_slice());
        }
        batches.push((chunk.to_vec(), Tensor::from_vec([chunk.len(), 1, ph, pw], data)));
    }
    t.transfer_ms = ms(start);

    let start = Instant::now();
    let mut outputs = Vec::with_capacity(batches.len());
    for (indices, batch) in &batches {
        let ctx = InferContext {
            frame_id: frame.frame_id,
            stripe_indices: indices,
            mixed_precision: config.mixed_precision,
        };
        let out = model.infer(batch, ctx)?;
        if out.shape()[0] != indices.len() || out.shape()[2..] != [ph, pw] {
            return Err(Error::Dimension(format!(
                "model returned {:?} for a {:?} batch",
                out.shape(),
                batch.shape()
            )));
        }
        if !out.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite logits for frame {}",
                frame.frame_id
            )));
        }
        outputs.push(out);
    }
    t.infer_ms = ms(start);

    let start = Instant::now();
    let classes = outputs[0].shape()[1];
    let mut stripe_logits = Vec::with_capacity(stripes.len());
    for out in &outputs {
        for i in 0..out.shape()[0] {
            let full = Grid3::from_chw(ph, pw, classes, out.item(i))?;
            stripe_logits.push(crop(&full, dims)?);
        }
    }
    let logits = reassemble(&stripe_logits)?;
    t.reassemble_ms = ms(start);

    let start = Instant::now();
    let probs = ProbMap::from_logits(&logits);
    let labels = decode_ordered(&probs);
    let trace = extract_trace(&labels, frame.pixel_pitch_um)?;
    let conf = confidence(&probs, &labels);
    t.decode_ms = ms(start);

    Ok(FrameOutput {
        frame_id: frame.frame_id,
        probs,
        labels,
        trace,
        confidence: conf,
        overlay: None,
        timings: t,
    })
}

/// All stages for one 512x512 frame, stripes inferred in batches of
/// `config.batch_stripes`.
pub fn process_frame(frame: &Frame, model: &dyn StripeModel, config: &PipelineConfig) -> Result<FrameOutput> {
    let mut out = process_until_decode(frame, model, config)?;
    let start = Instant::now();
    out.overlay = Some(render_overlay(frame, &out.labels, &out.trace));
    out.timings.overlay_ms = ms(start);
    Ok(out)
}

/// Frame supply for [`run_stream`].
pub enum Source {
    /// Every frame is processed; pacing only delays output.
    Replay(Box<dyn Iterator<Item = Result<Frame>> + Send>),
    /// Frames arrive on their own clock at `hz`; if the pipeline falls
    /// behind, only the newest waiting frame is kept.
    Live {
        frames: Box<dyn Iterator<Item = Result<Frame>> + Send>,
        hz: f64,
    },
}

impl Source {
    pub fn replay(frames: Vec<Frame>) -> Self {
        Source::Replay(Box::new(frames.into_iter().map(Ok)))
    }

    /// Synthetic frames `first..first + count` from a phantom configuration.
    pub fn synthetic(config: PhantomConfig, first: u64, count: u64) -> Box<dyn Iterator<Item = Result<Frame>> + Send> {
        Box::new((first..first + count).map(move |i| generate_sample(&config, i).map(|s| s.frame)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        LatencyStats {
            mean_ms: mean,
            p95_ms: sorted[rank - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub cpu_model: Option<String>,
    pub accelerator: String,
}

impl HardwareInfo {
    pub fn detect() -> Self {
        let cpu_model = fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        });
        HardwareInfo {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            cpu_model,
            accelerator: "none (CPU inference)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub tile_ms: LatencyStats,
    pub norm_ms: LatencyStats,
    pub transfer_ms: LatencyStats,
    pub infer_ms: LatencyStats,
    pub reassemble_ms: LatencyStats,
    pub decode_ms: LatencyStats,
    pub overlay_ms: LatencyStats,
    pub end_to_end_ms: LatencyStats,
    /// Processing rate: 1000 / mean end-to-end latency.
    pub end_to_end_hz: f64,
    /// Rate at which outputs were released, after pacing.
    pub delivered_hz: f64,
    pub effective_update_hz: f64,
    pub frames_in: usize,
    pub frames_processed: usize,
    pub frames_accepted: usize,
    pub frames_rejected: usize,
    pub frames_dropped: usize,
    pub frames_failed: usize,
    pub cap_hz: Option<f64>,
    pub confidence_threshold: f64,
    pub mixed_precision: bool,
    pub batch_stripes: usize,
    pub model: String,
    pub hardware: HardwareInfo,
}

impl PipelineReport {
    pub fn stage_means(&self) -> [f64; 7] {
        [
            self.tile_ms.mean_ms,
            self.norm_ms.mean_ms,
            self.transfer_ms.mean_ms,
            self.infer_ms.mean_ms,
            self.reassemble_ms.mean_ms,
            self.decode_ms.mean_ms,
            self.overlay_ms.mean_ms,
        ]
    }
}

/// One emitted output of the stream.
#[derive(Debug, Clone)]
pub struct StreamRecord {
    pub frame_id: u64,
    pub confidence: f64,
    /// `None` when the frame failed.
    pub decision: Option<GateDecision>,
    /// Frame whose result is on display after this step.
    pub shown_frame_id: Option<u64>,
    pub shown_trace: Option<Arc<BoundaryTrace>>,
    /// Seconds since stream start at which the output was released.
    pub released_at_s: f64,
    pub timings: StageTimings,
    pub end_to_end_ms: f64,
}

pub struct StreamOutcome {
    pub report: PipelineReport,
    pub records: Vec<StreamRecord>,
}

/// Where and what to write during a stream.
#[derive(Debug, Clone, Default)]
pub struct ArtifactOptions {
    pub dir: PathBuf,
    pub write_overlays: bool,
}

struct LiveSlot {
    frame: Option<Frame>,
    done: bool,
    produced: usize,
    dropped: usize,
    error: Option<Error>,
}

/// Runs a live source on a producer thread, keeping only the newest frame.
struct LiveFeed {
    shared: Arc<(Mutex<LiveSlot>, Condvar)>,
    handle: Option<thread::JoinHandle<()>>,
}

impl LiveFeed {
    fn start(mut frames: Box<dyn Iterator<Item = Result<Frame>> + Send>, hz: f64) -> Self {
        let shared = Arc::new((
            Mutex::new(LiveSlot {
                frame: None,
                done: false,
                produced: 0,
                dropped: 0,
                error: None,
            }),
            Condvar::new(),
        ));
        let producer = Arc::clone(&shared);
        let handle = thread::spawn(move || {
            let period = Duration::from_secs_f64(1.0 / hz);
            let start = Instant::now();
            let mut k = 0u32;
            loop {
                let due = start + period * k;
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    thread::sleep(wait);
                }
                let next = frames.next();
                let (lock, cv) = &*producer;
                let mut slot = lock.lock().expect("live slot poisoned");
                match next {
                    Some(Ok(f)) => {
                        slot.produced += 1;
                        if slot.frame.replace(f).is_some() {
                            slot.dropped += 1;
                        }
                    }
                    Some(Err(e)) => {
                        slot.error = Some(e);
                        slot.done = true;
                    }
                    None => slot.done = true,
                }
                let done = slot.done;
                cv.notify_one();
                if done {
                    break;
                }
                k += 1;
            }
        });
        LiveFeed {
            shared,
            handle: Some(handle),
        }
    }

    fn next(&mut self) -> Result<Option<Frame>> {
        let (lock, cv) = &*self.shared;
        let mut slot = lock.lock().expect("live slot poisoned");
        loop {
            if let Some(f) = slot.frame.take() {
                return Ok(Some(f));
            }
            if let Some(e) = slot.error.take() {
                return Err(e);
            }
            if slot.done {
                return Ok(None);
            }
            slot = cv.wait(slot).expect("live slot poisoned");
        }
    }

    fn counts(&self) -> (usize, usize) {
        let slot = self.shared.0.lock().expect("live slot poisoned");
        (slot.produced, slot.dropped)
    }
}

impl Drop for LiveFeed {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

enum Feed {
    Replay(Box<dyn Iterator<Item = Result<Frame>> + Send>, usize),
    Live(LiveFeed),
}

impl Feed {
    fn next(&mut self) -> Result<Option<Frame>> {
        match self {
            Feed::Replay(it, n) => match it.next() {
                Some(f) => {
                    *n += 1;
                    f.map(Some)
                }
                None => Ok(None),
            },
            Feed::Live(l) => l.next(),
        }
    }

    fn counts(&self) -> (usize, usize) {
        match self {
            Feed::Replay(_, n) => (*n, 0),
            Feed::Live(l) => l.counts(),
        }
    }
}

struct Shown {
    frame_id: u64,
    trace: Arc<BoundaryTrace>,
    overlay: Arc<OverlayImage>,
}

/// Options that only [`bench`] needs.
#[derive(Debug, Clone, Copy)]
struct RunOptions {
    paced: bool,
    warmup: usize,
}

/// Processes a source with gating, hold-last and pacing at `config.cap_hz`.
pub fn run_stream(
    source: Source,
    model: &dyn StripeModel,
    config: &PipelineConfig,
    artifacts: Option<&ArtifactOptions>,
) -> Result<StreamOutcome> {
    run(
        source,
        model,
        config,
        artifacts,
        RunOptions {
            paced: true,
            warmup: 0,
        },
    )
}

fn run(
    source: Source,
    model: &dyn StripeModel,
    config: &PipelineConfig,
    artifacts: Option<&ArtifactOptions>,
    opts: RunOptions,
) -> Result<StreamOutcome> {
    config.validate()?;
    if let Some(a) = artifacts {
        let dir = if a.write_overlays {
            a.dir.join("overlays")
        } else {
            a.dir.clone()
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut feed = match source {
        Source::Replay(it) => Feed::Replay(it, 0),
        Source::Live { frames, hz } => {
            if !(hz > 0.0) {
                return Err(Error::config("source.hz", "must be > 0"));
            }
            Feed::Live(LiveFeed::start(frames, hz))
        }
    };
    let period = Duration::from_secs_f64(1.0 / config.cap_hz);
    let stream_start = Instant::now();
    let mut next_release: Option<Instant> = None;
    let mut shown: Option<Shown> = None;
    let mut records = Vec::new();
    let mut seen = 0usize;
    let mut failed = 0usize;

    while let Some(frame) = feed.next()? {
        seen += 1;
        let e2e = Instant::now();
        let result = process_until_decode(&frame, model, config);
        let record_base = match result {
            Ok(mut out) => {
                let decision = gate(out.confidence, config);
                let start = Instant::now();
                if decision == GateDecision::Accept {
                    let overlay = render_overlay(&frame, &out.labels, &out.trace);
                    shown = Some(Shown {
                        frame_id: out.frame_id,
                        trace: Arc::new(out.trace.clone()),
                        overlay: Arc::new(overlay),
                    });
                } else if !config.hold_last_on_reject {
                    shown = None;
                }
                out.timings.overlay_ms = ms(start);
                (Some(decision), out.confidence, out.timings)
            }
            Err(e @ Error::Dimension(_)) => return Err(e),
            Err(_) => {
                failed += 1;
                if !config.hold_last_on_reject {
                    shown = None;
                }
                (None, 0.0, StageTimings::default())
            }
        };
        let end_to_end_ms = ms(e2e);

        // Release on a fixed cadence; when processing falls behind, restart
        // the cadence from the late release.
        let mut cadence = None;
        if opts.paced {
            if let Some(due) = next_release {
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    thread::sleep(wait);
                    cadence = Some(due);
                }
            }
        }
        let released = Instant::now();
        next_release = Some(cadence.unwrap_or(released) + period);

        let (decision, conf, timings) = record_base;
        records.push(StreamRecord {
            frame_id: frame.frame_id,
            confidence: conf,
            decision,
            shown_frame_id: shown.as_ref().map(|s| s.frame_id),
            shown_trace: shown.as_ref().map(|s| Arc::clone(&s.trace)),
            released_at_s: released.duration_since(stream_start).as_secs_f64(),
            timings,
            end_to_end_ms,
        });
        if let (Some(a), Some(s)) = (artifacts, shown.as_ref()) {
            if a.write_overlays {
                s.overlay
                    .save_png(&a.dir.join("overlays").join(format!("{:06}.png", frame.frame_id)))?;
            }
        }
    }
    let (frames_in, dropped) = feed.counts();
    drop(feed);
    if seen == 0 {
        return Err(Error::Usage("stream source produced no frames".into()));
    }
    if opts.warmup >= records.len() {
        return Err(Error::Usage(format!(
            "warm-up of {} frames leaves nothing to measure",
            opts.warmup
        )));
    }
    let measured = &records[opts.warmup..];
    let report = build_report(measured, frames_in - opts.warmup, dropped, failed, model, config, opts.paced);
    if let Some(a) = artifacts {
        write_artifacts(&a.dir, &report, &records)?;
    }
    Ok(StreamOutcome { report, records })
}

fn build_report(
    records: &[StreamRecord],
    frames_in: usize,
    dropped: usize,
    failed: usize,
    model: &dyn StripeModel,
    config: &PipelineConfig,
    paced: bool,
) -> PipelineReport {
    let ok: Vec<&StreamRecord> = records.iter().filter(|r| r.decision.is_some()).collect();
    let stage = |i: usize| {
        LatencyStats::from_samples(&ok.iter().map(|r| r.timings.as_array()[i]).collect::<Vec<_>>())
    };
    let e2e = LatencyStats::from_samples(&records.iter().map(|r| r.end_to_end_ms).collect::<Vec<_>>());
    let end_to_end_hz = if e2e.mean_ms > 0.0 {
        1000.0 / e2e.mean_ms
    } else {
        0.0
    };
    let delivered_hz = match (records.first(), records.last()) {
        (Some(a), Some(b)) if records.len() >= 2 && b.released_at_s > a.released_at_s => {
            (records.len() - 1) as f64 / (b.released_at_s - a.released_at_s)
        }
        _ => end_to_end_hz,
    };
    let accepted = records
        .iter()
        .filter(|r| r.decision == Some(GateDecision::Accept))
        .count();
    let rejected = records
        .iter()
        .filter(|r| r.decision == Some(GateDecision::Reject))
        .count();
    PipelineReport {
        tile_ms: stage(0),
        norm_ms: stage(1),
        transfer_ms: stage(2),
        infer_ms: stage(3),
        reassemble_ms: stage(4),
        decode_ms: stage(5),
        overlay_ms: stage(6),
        end_to_end_ms: e2e,
        end_to_end_hz,
        delivered_hz,
        effective_update_hz: accepted as f64 / records.len() as f64 * delivered_hz,
        frames_in,
        frames_processed: records.len(),
        frames_accepted: accepted,
        frames_rejected: rejected,
        frames_dropped: dropped,
        frames_failed: failed.min(records.len()),
        cap_hz: paced.then_some(config.cap_hz),
        confidence_threshold: config.confidence_threshold,
        mixed_precision: config.mixed_precision,
        batch_stripes: config.batch_stripes,
        model: model.describe(),
        hardware: HardwareInfo::detect(),
    }
}

#[derive(Serialize)]
struct TraceLogRow {
    frame_id: u64,
    confidence: f64,
    decision: String,
    shown_frame_id: Option<u64>,
    epi_mean_px: Option<f64>,
    dm_mean_px: Option<f64>,
    coverage: Option<f64>,
}

fn mean_present(v: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Writes `report.json` and `trace_log.csv`.
pub fn write_artifacts(dir: &Path, report: &PipelineReport, records: &[StreamRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::json("pipeline report", e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("trace_log.csv");
    let csv_err = |e: csv::Error| Error::Csv {
        context: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for r in records {
        let t = r.shown_trace.as_deref();
        w.serialize(TraceLogRow {
            frame_id: r.frame_id,
            confidence: r.confidence,
            decision: match r.decision {
                Some(GateDecision::Accept) => "ACCEPT",
                Some(GateDecision::Reject) => "REJECT",
                None => "FAILED",
            }
            .into(),
            shown_frame_id: r.shown_frame_id,
            epi_mean_px: t.and_then(|t| mean_present(t.epi_row_px())),
            dm_mean_px: t.and_then(|t| mean_present(t.dm_row_px())),
            coverage: t.map(BoundaryTrace::coverage),
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub const BENCH_WARMUP_FRAMES: usize = 20;
const BENCH_POOL: u64 = 8;

/// Uncapped throughput over `n_frames` synthetic frames after a 20-frame
/// warm-up that is excluded from the statistics.
pub fn bench(
    model: &dyn StripeModel,
    config: &PipelineConfig,
    phantom: &PhantomConfig,
    n_frames: usize,
) -> Result<PipelineReport> {
    if n_frames == 0 {
        return Err(Error::Usage("bench needs at least one frame".into()));
    }
    let pool: Vec<Frame> = (0..BENCH_POOL)
        .map(|i| generate_sample(phantom, i).map(|s| s.frame))
        .collect::<Result<_>>()?;
    let total = BENCH_WARMUP_FRAMES + n_frames;
    let frames = (0..total).map(move |i| {
        let f = &pool[i % pool.len()];
        let meta = crate::types::FrameMeta {
            frame_id: i as u64,
            ..f.meta()
        };
        Frame::new(f.pixels().clone(), meta)
    });
    run(
        Source::Replay(Box::new(frames)),
        model,
        config,
        None,
        RunOptions {
            paced: false,
            warmup: BENCH_WARMUP_FRAMES,
        },
    )
    .map(|o| o.report)
}

/// Inference time for all eight stripes in one batch versus one at a time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchingComparison {
    pub batched_ms: f64,
    pub single_stripe_ms: f64,
    pub stripes: usize,
}

impl BatchingComparison {
    /// True when one batch beats running every stripe on its own.
    pub fn batching_helps(&self) -> bool {
        self.batched_ms < self.stripes as f64 * self.single_stripe_ms
    }
}

pub fn compare_batching(
    model: &dyn StripeModel,
    frame: &Frame,
    mixed_precision: bool,
    repeats: usize,
) -> Result<BatchingComparison> {
    let stripes = tile(frame)?;
    let norm = model.norm_stats();
    let padded: Vec<_> = stripes.iter().map(|s| pad16(&norm.normalize(&s.pixels)).0).collect();
    let (h, w) = (padded[0].height(), padded[0].width());
    let all: Vec<f32> = padded.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
    let batch = Tensor::from_vec([padded.len(), 1, h, w], all);
    let indices: Vec<usize> = (0..padded.len()).collect();
    let repeats = repeats.max(1);
    let mut batched = Vec::with_capacity(repeats);
    let mut single = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        model.infer(
            &batch,
            InferContext {
                frame_id: frame.frame_id,
                stripe_indices: &indices,
                mixed_precision,
            },
        )?;
        batched.push(ms(start));
        let one = Tensor::from_vec([1, 1, h, w], padded[0].as_slice().to_vec());
        let start = Instant::now();
        model.infer(
            &one,
            InferContext {
                frame_id: frame.frame_id,
                stripe_indices: &indices[..1],
                mixed_precision,
            },
        )?;
        single.push(ms(start));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    Ok(BatchingComparison {
        batched_ms: median(&mut batched),
        single_stripe_ms: median(&mut single),
        stripes: padded.len(),
    })
}
