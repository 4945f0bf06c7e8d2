//! Stripe tiling, intensity standardisation, pad-to-16 / crop and stripe
//! reassembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Frame, Grid, Grid3, Stripe, FRAME_SIZE, NUM_STRIPES, STRIPE_WIDTH};

/// Spatial multiple required by the network's four 2x downsamplings.
pub const PAD_MULTIPLE: usize = 16;
const STD_FLOOR: f64 = 1e-6;

/// Global intensity statistics of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl NormStats {
    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        ((v as f64 - self.mean) / self.std) as f32
    }

    pub fn normalize(&self, grid: &Grid<f32>) -> Grid<f32> {
        grid.map(|v| self.apply(v))
    }
}

/// Splits a 512x512 frame into eight 512x64 stripes, left to right.
pub fn tile(frame: &Frame) -> Result<Vec<Stripe>> {
    if frame.height_px() != FRAME_SIZE || frame.width_px() != FRAME_SIZE {
        return Err(Error::Dimension(format!(
            "tiling needs a {FRAME_SIZE}x{FRAME_SIZE} frame, got {}x{}",
            frame.height_px(),
            frame.width_px()
        )));
    }
    Ok((0..NUM_STRIPES)
        .map(|i| Stripe {
            pixels: frame.pixels().columns(i * STRIPE_WIDTH, STRIPE_WIDTH),
            parent_frame_id: frame.frame_id,
            stripe_index: i,
        })
        .collect())
}

/// Mean and population standard deviation over every pixel of every frame.
pub fn fit_norm<'a>(train_frames: impl IntoIterator<Item = &'a Frame>) -> Result<NormStats> {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for frame in train_frames {
        for &v in frame.pixels().as_slice() {
            let v = v as f64;
            sum += v;
            sum_sq += v * v;
        }
        n += frame.pixels().as_slice().len();
    }
    if n == 0 {
        return Err(Error::Usage(
            "normalisation statistics need at least one training frame".into(),
        ));
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    Ok(NormStats {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    })
}

fn round_up(v: usize) -> usize {
    v.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}

/// Zero-pads at the bottom and right to the next multiples of 16. Returns the
/// padded grid and the original `(height, width)`.
pub fn pad16(image: &Grid<f32>) -> (Grid<f32>, (usize, usize)) {
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (round_up(h), round_up(w));
    if (ph, pw) == (h, w) {
        return (image.clone(), (h, w));
    }
    let padded = Grid::from_fn(ph, pw, |r, c| {
        if r < h && c < w {
            image.get(r, c)
        } else {
            0.0
        }
    });
    (padded, (h, w))
}

/// Keeps the top-left `dims` window of a padded output.
pub fn crop(logits: &Grid3, dims: (usize, usize)) -> Result<Grid3> {
    let (h, w) = dims;
    if h > logits.height() || w > logits.width() {
        return Err(Error::Dimension(format!(
            "cannot crop {}x{} to {h}x{w}",
            logits.height(),
            logits.width()
        )));
    }
    let c = logits.channels();
    let mut data = Vec::with_capacity(h * w * c);
    for r in 0..h {
        let start = r * logits.width() * c;
        data.extend_from_slice(&logits.as_slice()[start..start + w * c]);
    }
    Grid3::from_vec(h, w, c, data)
}

/// Concatenates eight `H x 64 x C` stripe outputs left to right.
pub fn reassemble(stripe_outputs: &[Grid3]) -> Result<Grid3> {
    if stripe_outputs.len() != NUM_STRIPES {
        return Err(Error::Dimension(format!(
            "reassembly needs {NUM_STRIPES} stripes, got {}",
            stripe_outputs.len()
        )));
    }
    let (h, c) = (stripe_outputs[0].height(), stripe_outputs[0].channels());
    if let Some(bad) = stripe_outputs
        .iter()
        .find(|s| s.height() != h || s.channels() != c || s.width() != STRIPE_WIDTH)
    {
        return Err(Error::Dimension(format!(
            "stripe {}x{}x{} does not match {h}x{STRIPE_WIDTH}x{c}",
            bad.height(),
            bad.width(),
            bad.channels()
        )));
    }
    let width = STRIPE_WIDTH * NUM_STRIPES;
    let mut data = Vec::with_capacity(h * width * c);
    for r in 0..h {
        for s in stripe_outputs {
            let start = r * STRIPE_WIDTH * c;
            data.extend_from_slice(&s.as_slice()[start..start + STRIPE_WIDTH * c]);
        }
    }
    Grid3::from_vec(h, width, c, data)
}

/// Reassembles single-channel stripes, placed by `stripe_index`.
pub fn reassemble_pixels(stripes: &[Stripe]) -> Result<Grid<f32>> {
    let mut placed: Vec<Option<Grid3>> = vec![None; NUM_STRIPES];
    for s in stripes {
        let slot = placed
            .get_mut(s.stripe_index)
            .filter(|slot| slot.is_none())
            .ok_or_else(|| {
                Error::Dimension(format!(
                    "duplicate or out-of-range stripe index {}",
                    s.stripe_index
                ))
            })?;
        *slot = Some(Grid3::from_vec(
            s.pixels.height(),
            s.pixels.width(),
            1,
            s.pixels.as_slice().to_vec(),
        )?);
    }
    let placed: Option<Vec<Grid3>> = placed.into_iter().collect();
    let placed = placed.ok_or_else(|| {
        Error::Dimension(format!("reassembly needs all {NUM_STRIPES} stripes"))
    })?;
    let joined = reassemble(&placed)?;
    Grid::from_vec(joined.height(), joined.width(), joined.as_slice().to_vec())
}
