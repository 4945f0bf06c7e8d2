//! Shared domain types: frames, label maps, probability maps, boundary traces
//! and stripes.
//!
//! Rows are depth (top = anterior), columns are time. Class ids follow the
//! anatomical order along depth: 0 above the cornea, 1 cornea, 2 below
//! Descemet's membrane.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height and width of a full M-mode frame.
pub const FRAME_SIZE: usize = 512;
/// Width of one vertical stripe.
pub const STRIPE_WIDTH: usize = 64;
/// Number of stripes a frame is tiled into.
pub const NUM_STRIPES: usize = FRAME_SIZE / STRIPE_WIDTH;
/// Above-cornea, cornea, below-DM.
pub const NUM_CLASSES: usize = 3;
/// Calibrated axial pixel spacing in micrometres.
pub const DEFAULT_PIXEL_PITCH_UM: f64 = 2.61;

pub const CLASS_ABOVE: u8 = 0;
pub const CLASS_CORNEA: u8 = 1;
pub const CLASS_BELOW: u8 = 2;

/// Dense row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = T> + '_ {
        (0..self.height).map(move |r| self.get(r, col))
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Columns `[start, start + width)` as a new grid.
    pub fn columns(&self, start: usize, width: usize) -> Grid<T> {
        Grid::from_fn(self.height, width, |r, c| self.get(r, start + c))
    }

    /// Left-right mirror.
    pub fn flip_horizontal(&self) -> Grid<T> {
        Grid::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }
}

/// Dense `[row][col][channel]` grid, used for logits and per-class fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Grid3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Grid3 {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Grid3 {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds from a `[channel][row][col]` slice.
    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f32]) -> Result<Self> {
        if chw.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "planar buffer of {} values for {height}x{width}x{channels}",
                chw.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; chw.len()];
        for k in 0..channels {
            for i in 0..plane {
                data[i * channels + k] = chw[k * plane + i];
            }
        }
        Ok(Grid3 {
            height,
            width,
            channels,
            data,
        })
    }

    /// Copies out as `[channel][row][col]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for i in 0..plane {
            for k in 0..self.channels {
                out[k * plane + i] = self.data[i * self.channels + k];
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// One M-mode image with its acquisition metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Grid<f32>,
    pub pixel_pitch_um: f64,
    pub frame_id: u64,
    pub timestamp_s: f64,
}

/// Sidecar metadata carried alongside frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    #[serde(default = "default_pitch")]
    pub pixel_pitch_um: f64,
    #[serde(default)]
    pub frame_id: u64,
    #[serde(default)]
    pub timestamp_s: f64,
}

fn default_pitch() -> f64 {
    DEFAULT_PIXEL_PITCH_UM
}

impl Default for FrameMeta {
    fn default() -> Self {
        FrameMeta {
            pixel_pitch_um: DEFAULT_PIXEL_PITCH_UM,
            frame_id: 0,
            timestamp_s: 0.0,
        }
    }
}

impl Frame {
    pub fn new(pixels: Grid<f32>, meta: FrameMeta) -> Result<Self> {
        if pixels.height() == 0 || pixels.width() == 0 {
            return Err(Error::Dimension("frame must be non-empty".into()));
        }
        if let Some(v) = pixels
            .as_slice()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Contract(format!(
                "frame intensity {v} outside [0, 1]"
            )));
        }
        if !(meta.pixel_pitch_um.is_finite() && meta.pixel_pitch_um > 0.0) {
            return Err(Error::config(
                "pixel_pitch_um",
                format!("must be positive, got {}", meta.pixel_pitch_um),
            ));
        }
        if !(meta.timestamp_s.is_finite() && meta.timestamp_s >= 0.0) {
            return Err(Error::config(
                "timestamp_s",
                format!("must be non-negative, got {}", meta.timestamp_s),
            ));
        }
        Ok(Frame {
            pixels,
            pixel_pitch_um: meta.pixel_pitch_um,
            frame_id: meta.frame_id,
            timestamp_s: meta.timestamp_s,
        })
    }

    pub fn pixels(&self) -> &Grid<f32> {
        &self.pixels
    }

    pub fn height_px(&self) -> usize {
        self.pixels.height()
    }

    pub fn width_px(&self) -> usize {
        self.pixels.width()
    }

    pub fn meta(&self) -> FrameMeta {
        FrameMeta {
            pixel_pitch_um: self.pixel_pitch_um,
            frame_id: self.frame_id,
            timestamp_s: self.timestamp_s,
        }
    }

    /// Same metadata, new pixels. Pixels are clamped into [0, 1].
    pub fn with_pixels(&self, pixels: Grid<f32>) -> Result<Frame> {
        Frame::new(pixels.map(|v| v.clamp(0.0, 1.0)), self.meta())
    }
}

/// Per-pixel class identities.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    labels: Grid<u8>,
    num_classes: u8,
}

impl LabelMap {
    pub fn new(labels: Grid<u8>, num_classes: u8) -> Result<Self> {
        if let Some(v) = labels.as_slice().iter().find(|&&v| v >= num_classes) {
            return Err(Error::Contract(format!(
                "class id {v} not below num_classes {num_classes}"
            )));
        }
        Ok(LabelMap {
            labels,
            num_classes,
        })
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.labels
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels.get(row, col)
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        LabelMap {
            labels: self.labels.flip_horizontal(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes as usize];
        for &v in self.labels.as_slice() {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// True iff every column is monotone non-decreasing from top to bottom.
pub fn validate_ordered(labels: &LabelMap) -> bool {
    let grid = labels.grid();
    (1..grid.height()).all(|r| {
        grid.row(r - 1)
            .iter()
            .zip(grid.row(r))
            .all(|(above, below)| above <= below)
    })
}

/// Per-pixel class probabilities, stored `[row][col][class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f32>,
}

impl ProbMap {
    /// Builds a probability map, checking that each pixel sums to 1.
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != height * width * classes {
            return Err(Error::Dimension(format!(
                "prob map {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                probs.len()
            )));
        }
        for (i, px) in probs.chunks_exact(classes.max(1)).enumerate() {
            let sum: f64 = px.iter().map(|&p| p as f64).sum();
            if px.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!(
                    "pixel {i} probabilities {px:?} are not a distribution"
                )));
            }
        }
        Ok(ProbMap {
            height,
            width,
            classes,
            probs,
        })
    }

    /// Softmax over the class axis of logits laid out `[class][row][col]`.
    pub fn from_logits_chw(height: usize, width: usize, classes: usize, logits: &[f32]) -> Self {
        assert_eq!(logits.len(), height * width * classes);
        let plane = height * width;
        let mut probs = vec![0.0f32; plane * classes];
        let mut buf = vec![0.0f64; classes];
        for i in 0..plane {
            let max = (0..classes)
                .map(|k| logits[k * plane + i])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut total = 0.0;
            for k in 0..classes {
                buf[k] = (logits[k * plane + i] as f64 - max).exp();
                total += buf[k];
            }
            for k in 0..classes {
                probs[i * classes + k] = (buf[k] / total) as f32;
            }
        }
        ProbMap {
            height,
            width,
            classes,
            probs,
        }
    }

    /// Softmax over the channel axis of a logit grid.
    pub fn from_logits(logits: &Grid3) -> Self {
        let (h, w, c) = (logits.height(), logits.width(), logits.channels());
        let mut probs = vec![0.0f32; h * w * c];
        for (px, out) in logits
            .as_slice()
            .chunks_exact(c)
            .zip(probs.chunks_exact_mut(c))
        {
            let max = px.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = px.iter().map(|&v| (v as f64 - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (o, e) in out.iter_mut().zip(&exps) {
                *o = (e / total) as f32;
            }
        }
        ProbMap {
            height: h,
            width: w,
            classes: c,
            probs,
        }
    }

    /// One-hot probabilities of a label map.
    pub fn one_hot(labels: &LabelMap) -> Self {
        let classes = labels.num_classes() as usize;
        let mut probs = vec![0.0; labels.height() * labels.width() * classes];
        for (i, &l) in labels.grid().as_slice().iter().enumerate() {
            probs[i * classes + l as usize] = 1.0;
        }
        ProbMap {
            height: labels.height(),
            width: labels.width(),
            classes,
            probs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, class: usize) -> f32 {
        self.probs[(row * self.width + col) * self.classes + class]
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.classes;
        &self.probs[start..start + self.classes]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.probs
    }

    /// Per-pixel argmax with ties resolved towards the lower class id.
    pub fn argmax(&self) -> LabelMap {
        let grid = Grid::from_fn(self.height, self.width, |r, c| {
            let px = self.pixel(r, c);
            let mut best = 0;
            for k in 1..px.len() {
                if px[k] > px[best] {
                    best = k;
                }
            }
            best as u8
        });
        LabelMap {
            labels: grid,
            num_classes: self.classes as u8,
        }
    }
}

/// Per-column rows of the epithelium (top of the cornea band) and Descemet's
/// membrane (bottom of the band). `None` marks a column with no band.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTrace {
    epi_row_px: Vec<Option<f64>>,
    dm_row_px: Vec<Option<f64>>,
    pixel_pitch_um: f64,
}

impl BoundaryTrace {
    pub fn new(
        epi_row_px: Vec<Option<f64>>,
        dm_row_px: Vec<Option<f64>>,
        pixel_pitch_um: f64,
        height: usize,
    ) -> Result<Self> {
        if epi_row_px.len() != dm_row_px.len() {
            return Err(Error::Dimension(format!(
                "trace has {} epithelium and {} DM columns",
                epi_row_px.len(),
                dm_row_px.len()
            )));
        }
        if !(pixel_pitch_um.is_finite() && pixel_pitch_um > 0.0) {
            return Err(Error::config("pixel_pitch_um", "must be positive"));
        }
        let in_range = |v: f64| v.is_finite() && v >= 0.0 && v < height as f64;
        for (col, (e, d)) in epi_row_px.iter().zip(&dm_row_px).enumerate() {
            if e.is_some_and(|v| !in_range(v)) || d.is_some_and(|v| !in_range(v)) {
                return Err(Error::Contract(format!(
                    "column {col}: row outside [0, {height})"
                )));
            }
            if let (Some(e), Some(d)) = (e, d) {
                if e > d {
                    return Err(Error::Contract(format!(
                        "column {col}: epithelium row {e} below DM row {d}"
                    )));
                }
            }
        }
        Ok(BoundaryTrace {
            epi_row_px,
            dm_row_px,
            pixel_pitch_um,
        })
    }

    pub fn width(&self) -> usize {
        self.epi_row_px.len()
    }

    pub fn epi_row_px(&self) -> &[Option<f64>] {
        &self.epi_row_px
    }

    pub fn dm_row_px(&self) -> &[Option<f64>] {
        &self.dm_row_px
    }

    pub fn pixel_pitch_um(&self) -> f64 {
        self.pixel_pitch_um
    }

    pub fn epi_row_um(&self) -> Vec<Option<f64>> {
        self.epi_row_px
            .iter()
            .map(|v| v.map(|px| px * self.pixel_pitch_um))
            .collect()
    }

    pub fn dm_row_um(&self) -> Vec<Option<f64>> {
        self.dm_row_px
            .iter()
            .map(|v| v.map(|px| px * self.pixel_pitch_um))
            .collect()
    }

    /// Column-reversed copy.
    pub fn flip_horizontal(&self) -> BoundaryTrace {
        BoundaryTrace {
            epi_row_px: self.epi_row_px.iter().rev().copied().collect(),
            dm_row_px: self.dm_row_px.iter().rev().copied().collect(),
            pixel_pitch_um: self.pixel_pitch_um,
        }
    }

    /// Fraction of columns carrying an epithelium row.
    pub fn coverage(&self) -> f64 {
        if self.epi_row_px.is_empty() {
            return 0.0;
        }
        self.epi_row_px.iter().filter(|v| v.is_some()).count() as f64
            / self.epi_row_px.len() as f64
    }
}

/// A 512x64 vertical slice of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Stripe {
    pub pixels: Grid<f32>,
    pub parent_frame_id: u64,
    pub stripe_index: usize,
}

impl Stripe {
    /// First frame column covered by this stripe.
    pub fn column_offset(&self) -> usize {
        self.stripe_index * STRIPE_WIDTH
    }
}
