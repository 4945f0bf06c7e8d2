//! Deterministic synthetic M-mode phantoms.
//!
//! Each sample is a pure function of `(config.seed, index)`. Geometry (and
//! therefore ground truth) is drawn first; speckle, attenuation and shadowing
//! are applied to intensities afterwards and never touch the labels.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::types::{
    BoundaryTrace, Frame, FrameMeta, Grid, LabelMap, CLASS_ABOVE, CLASS_BELOW, CLASS_CORNEA,
    DEFAULT_PIXEL_PITCH_UM, FRAME_SIZE, NUM_CLASSES,
};

/// Nominal spacing between consecutive generated frames.
pub const NOMINAL_FRAME_PERIOD_S: f64 = 1.0 / 80.0;

const BASE_LEVEL: f64 = 0.06;
const CORNEA_GAIN: f64 = 0.74;
const BELOW_GAIN: f64 = 0.18;
const DRIFT_COMPONENTS: usize = 5;
/// Thickness wander relative to the bulk drift amplitude.
const THICKNESS_DRIFT_RATIO: f64 = 0.15;

/// Controls phantom geometry and the three degradations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    #[serde(default = "default_size")]
    pub height_px: usize,
    #[serde(default = "default_size")]
    pub width_px: usize,
    pub epi_depth_range_px: (f64, f64),
    pub cornea_thickness_range_px: (f64, f64),
    pub drift_amplitude_px: f64,
    pub speckle_strength: f64,
    pub attenuation_per_px: f64,
    pub shadow_rate: f64,
    pub shadow_width_range_px: (usize, usize),
    pub layer_contrast: f64,
}

fn default_size() -> usize {
    FRAME_SIZE
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, (lo, hi): (f64, f64)| {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                Err(Error::config(key, format!("need 0 <= min <= max, got ({lo}, {hi})")))
            } else {
                Ok(())
            }
        };
        if self.height_px == 0 || self.width_px == 0 {
            return Err(Error::config("height_px", "frame dimensions must be positive"));
        }
        range("epi_depth_range_px", self.epi_depth_range_px)?;
        range("cornea_thickness_range_px", self.cornea_thickness_range_px)?;
        if self.epi_depth_range_px.1 + self.cornea_thickness_range_px.1 >= self.height_px as f64 {
            return Err(Error::config(
                "cornea_thickness_range_px",
                "epi_depth max + cornea_thickness max must be below height_px",
            ));
        }
        if !(self.drift_amplitude_px >= 0.0) {
            return Err(Error::config("drift_amplitude_px", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.speckle_strength) {
            return Err(Error::config("speckle_strength", "must lie in [0, 1]"));
        }
        if !(self.attenuation_per_px >= 0.0) {
            return Err(Error::config("attenuation_per_px", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.shadow_rate) {
            return Err(Error::config("shadow_rate", "must lie in [0, 1]"));
        }
        let (wmin, wmax) = self.shadow_width_range_px;
        if wmin > wmax || wmax > self.width_px {
            return Err(Error::config(
                "shadow_width_range_px",
                format!("need min <= max <= width_px, got ({wmin}, {wmax})"),
            ));
        }
        if !(self.layer_contrast > 0.0 && self.layer_contrast <= 1.0) {
            return Err(Error::config("layer_contrast", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Same geometry and noise, no shadowing.
    pub fn without_shadows(&self) -> PhantomConfig {
        PhantomConfig {
            shadow_rate: 0.0,
            ..self.clone()
        }
    }
}

/// The two acquisition styles shipped as JSON presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presets {
    pub in_vivo: PhantomConfig,
    pub ex_vivo: PhantomConfig,
}

impl Presets {
    /// The presets compiled into the library (`presets/*.json`).
    pub fn builtin() -> Presets {
        Presets {
            in_vivo: serde_json::from_str(include_str!("../../../presets/in_vivo.json"))
                .expect("shipped in_vivo preset parses"),
            ex_vivo: serde_json::from_str(include_str!("../../../presets/ex_vivo.json"))
                .expect("shipped ex_vivo preset parses"),
        }
    }

    /// Loads `in_vivo.json` and `ex_vivo.json` from a directory.
    pub fn load(dir: &Path) -> Result<Presets> {
        let read = |name: &str| -> Result<PhantomConfig> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let cfg: PhantomConfig = serde_json::from_str(&text)
                .map_err(|e| Error::json(path.display().to_string(), e))?;
            cfg.validate()?;
            Ok(cfg)
        };
        Ok(Presets {
            in_vivo: read("in_vivo.json")?,
            ex_vivo: read("ex_vivo.json")?,
        })
    }

    pub fn for_style(&self, style: Style) -> &PhantomConfig {
        match style {
            Style::InVivo => &self.in_vivo,
            Style::ExVivo => &self.ex_vivo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    InVivo,
    ExVivo,
    Hybrid,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_vivo" => Ok(Subset::InVivo),
            "ex_vivo" => Ok(Subset::ExVivo),
            "hybrid" => Ok(Subset::Hybrid),
            other => Err(Error::config(
                "subset",
                format!("unknown subset {other:?}; expected in_vivo, ex_vivo or hybrid"),
            )),
        }
    }
}

/// Acquisition style of a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    InVivo,
    ExVivo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub subset: Subset,
    pub n_train: usize,
    pub n_test: usize,
    pub val_fraction: f64,
}

pub const VAL_FRACTION: f64 = 0.20;

impl DatasetSpec {
    /// Standard split sizes for each subset.
    pub fn standard(subset: Subset) -> DatasetSpec {
        let (n_train, n_test) = match subset {
            Subset::InVivo => (400, 100),
            Subset::ExVivo => (200, 50),
            Subset::Hybrid => (600, 150),
        };
        DatasetSpec {
            subset,
            n_train,
            n_test,
            val_fraction: VAL_FRACTION,
        }
    }

    /// Reduced sizes for desk-scale experiments; same validation fraction.
    pub fn custom(subset: Subset, n_train: usize, n_test: usize) -> DatasetSpec {
        DatasetSpec {
            subset,
            n_train,
            n_test,
            val_fraction: VAL_FRACTION,
        }
    }

    pub fn n_val(&self) -> usize {
        (self.val_fraction * self.n_train as f64).round() as usize
    }

    /// Style of the sample at a global dataset index. Hybrid interleaves two
    /// in vivo samples per ex vivo sample, matching the 500:250 subset sizes.
    pub fn style_of(&self, index: usize) -> Style {
        match self.subset {
            Subset::InVivo => Style::InVivo,
            Subset::ExVivo => Style::ExVivo,
            Subset::Hybrid => {
                if index % 3 == 2 {
                    Style::ExVivo
                } else {
                    Style::InVivo
                }
            }
        }
    }
}

/// One generated phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: Frame,
    pub labels: LabelMap,
    /// Integer rows of the class transitions in `labels`.
    pub trace: BoundaryTrace,
    /// The real-valued curves the labels were rasterised from.
    pub subpixel_trace: BoundaryTrace,
    /// Columns `[start, end)` zeroed by an instrument shadow, if any.
    pub shadow: Option<(usize, usize)>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

/// Band-limited curve in [-1, 1]: a normalised sum of low-frequency sinusoids.
fn smooth_walk(rng: &mut impl Rng, width: usize) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..DRIFT_COMPONENTS)
        .map(|_| {
            (
                rng.gen_range(0.3..3.0),
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.2..1.0),
            )
        })
        .collect();
    let total: f64 = comps.iter().map(|c| c.2).sum();
    (0..width)
        .map(|c| {
            let t = c as f64 / width as f64;
            comps
                .iter()
                .map(|&(f, phase, w)| w * (TAU * f * t + phase).sin())
                .sum::<f64>()
                / total
        })
        .collect()
}

fn layer_level(class: u8, contrast: f64) -> f64 {
    match class {
        CLASS_ABOVE => BASE_LEVEL,
        CLASS_CORNEA => BASE_LEVEL + CORNEA_GAIN * contrast,
        _ => BASE_LEVEL + BELOW_GAIN * contrast,
    }
}

/// Generates the phantom at `index`.
pub fn generate_sample(config: &PhantomConfig, index: u64) -> Result<Sample> {
    config.validate()?;
    let (h, w) = (config.height_px, config.width_px);
    let mut rng = sample_rng(config.seed, index);

    let epi0 = rng.gen_range(config.epi_depth_range_px.0..=config.epi_depth_range_px.1);
    let thick0 =
        rng.gen_range(config.cornea_thickness_range_px.0..=config.cornea_thickness_range_px.1);
    let drift = smooth_walk(&mut rng, w);
    let wander = smooth_walk(&mut rng, w);
    let max_row = (h - 1) as f64;

    let mut epi_sub = Vec::with_capacity(w);
    let mut dm_sub = Vec::with_capacity(w);
    for c in 0..w {
        let e = (epi0 + config.drift_amplitude_px * drift[c]).clamp(0.0, max_row);
        let thickness = thick0 + THICKNESS_DRIFT_RATIO * config.drift_amplitude_px * wander[c];
        let d = (e + thickness).clamp(e, max_row);
        epi_sub.push(e);
        dm_sub.push(d);
    }
    let epi_rows: Vec<usize> = epi_sub.iter().map(|v| v.round() as usize).collect();
    let dm_rows: Vec<usize> = dm_sub.iter().map(|v| v.round() as usize).collect();

    let labels = Grid::from_fn(h, w, |r, c| {
        if r < epi_rows[c] {
            CLASS_ABOVE
        } else if r <= dm_rows[c] {
            CLASS_CORNEA
        } else {
            CLASS_BELOW
        }
    });

    let mut pixels = Grid::filled(h, w, 0.0f32);
    for r in 0..h {
        let attenuation = if config.attenuation_per_px > 0.0 {
            (-config.attenuation_per_px * r as f64).exp()
        } else {
            1.0
        };
        for c in 0..w {
            let mut v = layer_level(labels.get(r, c), config.layer_contrast) * attenuation;
            if config.speckle_strength > 0.0 {
                let u: f64 = rng.gen();
                let exp_draw = -(1.0 - u).ln();
                v *= 1.0 - config.speckle_strength + config.speckle_strength * exp_draw;
            }
            pixels.set(r, c, v.clamp(0.0, 1.0) as f32);
        }
    }

    let shadow = if rng.gen_bool(config.shadow_rate) {
        let (wmin, wmax) = config.shadow_width_range_px;
        let width = rng.gen_range(wmin..=wmax);
        let start = rng.gen_range(0..=w - width);
        for r in 0..h {
            for c in start..start + width {
                pixels.set(r, c, 0.0);
            }
        }
        Some((start, start + width))
    } else {
        None
    };

    let meta = FrameMeta {
        pixel_pitch_um: DEFAULT_PIXEL_PITCH_UM,
        frame_id: index,
        timestamp_s: index as f64 * NOMINAL_FRAME_PERIOD_S,
    };
    let to_f = |rows: &[usize]| rows.iter().map(|&r| Some(r as f64)).collect::<Vec<_>>();
    Ok(Sample {
        frame: Frame::new(pixels, meta)?,
        labels: LabelMap::new(labels, NUM_CLASSES as u8)?,
        trace: BoundaryTrace::new(
            to_f(&epi_rows),
            to_f(&dm_rows),
            DEFAULT_PIXEL_PITCH_UM,
            h,
        )?,
        subpixel_trace: BoundaryTrace::new(
            epi_sub.into_iter().map(Some).collect(),
            dm_sub.into_iter().map(Some).collect(),
            DEFAULT_PIXEL_PITCH_UM,
            h,
        )?,
        shadow,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(
                "split",
                format!("unknown split {other:?}; expected train, val or test"),
            )),
        }
    }
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub frame: PathBuf,
    pub mask: PathBuf,
    pub trace: PathBuf,
    pub split: Split,
    pub index: u64,
    pub style: Style,
    pub shadowed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subset: Subset,
    pub items: Vec<ManifestItem>,
    /// Directory the item paths are relative to; not serialised.
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Loads frame, mask and trace of one item.
    pub fn load_item(&self, item: &ManifestItem) -> Result<(Frame, LabelMap, BoundaryTrace)> {
        let frame = io::load_frame(&self.resolve(&item.frame))?;
        let labels = io::load_label_map(&self.resolve(&item.mask))?;
        let trace = io::load_trace(
            &self.resolve(&item.trace),
            frame.pixel_pitch_um,
            labels.height(),
        )?;
        Ok((frame, labels, trace))
    }
}

/// Writes every sample of `spec` under `out_dir` and returns the manifest
/// (also written to `out_dir/manifest.json`).
///
/// Indices `0..n_train` form the training portion and the next `n_test` the
/// test split. Validation items are drawn from the training portion by a
/// seeded shuffle.
pub fn generate_dataset(spec: &DatasetSpec, presets: &Presets, out_dir: &Path) -> Result<Manifest> {
    presets.in_vivo.validate()?;
    presets.ex_vivo.validate()?;
    if spec.n_train + spec.n_test == 0 {
        return Err(Error::Usage("dataset must contain at least one sample".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let split_seed = presets.in_vivo.seed ^ presets.ex_vivo.seed.rotate_left(32);
    let mut train_idx: Vec<usize> = (0..spec.n_train).collect();
    train_idx.shuffle(&mut sample_rng(split_seed, u64::MAX));
    let val: std::collections::HashSet<usize> =
        train_idx.into_iter().take(spec.n_val()).collect();

    let mut items = Vec::with_capacity(spec.n_train + spec.n_test);
    for index in 0..spec.n_train + spec.n_test {
        let style = spec.style_of(index);
        let sample = generate_sample(presets.for_style(style), index as u64)?;
        let name = format!("{index:06}");
        let frame = PathBuf::from("frames").join(format!("{name}.png"));
        let mask = PathBuf::from("masks").join(format!("{name}.png"));
        let trace = PathBuf::from("traces").join(format!("{name}.csv"));
        io::save_frame(&sample.frame, &out_dir.join(&frame))?;
        io::save_label_map(&sample.labels, &out_dir.join(&mask))?;
        io::save_trace(&sample.trace, &out_dir.join(&trace))?;
        let split = if index >= spec.n_train {
            Split::Test
        } else if val.contains(&index) {
            Split::Val
        } else {
            Split::Train
        };
        items.push(ManifestItem {
            frame,
            mask,
            trace,
            split,
            index: index as u64,
            style,
            shadowed: sample.shadow.is_some(),
        });
    }
    let manifest = Manifest {
        subset: spec.subset,
        items,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_ordered;

    fn clean(config: &PhantomConfig) -> PhantomConfig {
        PhantomConfig {
            speckle_strength: 0.0,
            attenuation_per_px: 0.0,
            shadow_rate: 0.0,
            ..config.clone()
        }
    }

    /// Re-scan a label map for the first class-1 row and the first class-2
    /// row minus one.
    fn rescan(labels: &LabelMap) -> (Vec<f64>, Vec<f64>) {
        let mut epi = Vec::new();
        let mut dm = Vec::new();
        for c in 0..labels.width() {
            let col: Vec<u8> = labels.grid().column(c).collect();
            let first1 = col.iter().position(|&v| v == 1).unwrap();
            let first2 = col.iter().position(|&v| v == 2).unwrap_or(col.len());
            epi.push(first1 as f64);
            dm.push(first2 as f64 - 1.0);
        }
        (epi, dm)
    }

    #[test]
    fn frames_are_full_size() {
        let presets = Presets::builtin();
        let s = generate_sample(&presets.in_vivo, 3).unwrap();
        assert_eq!((s.frame.height_px(), s.frame.width_px()), (512, 512));
    }

    #[test]
    fn undegraded_frames_have_three_constant_bands_per_column() {
        let cfg = clean(&Presets::builtin().ex_vivo);
        let s = generate_sample(&cfg, 11).unwrap();
        for c in 0..512 {
            let mut runs: Vec<f32> = Vec::new();
            for r in 0..512 {
                let v = s.frame.pixels().get(r, c);
                if runs.last() != Some(&v) {
                    runs.push(v);
                }
            }
            assert_eq!(runs.len(), 3, "column {c} has runs {runs:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = Presets::builtin().in_vivo;
        assert_eq!(generate_sample(&cfg, 5).unwrap(), generate_sample(&cfg, 5).unwrap());
        assert_ne!(
            generate_sample(&cfg, 5).unwrap().frame,
            generate_sample(&cfg, 6).unwrap().frame
        );
    }

    #[test]
    fn labels_ordered_and_trace_matches_rescan() {
        let presets = Presets::builtin();
        for cfg in [&presets.in_vivo, &presets.ex_vivo] {
            for index in 0..20 {
                let s = generate_sample(cfg, index).unwrap();
                assert!(validate_ordered(&s.labels));
                let (epi, dm) = rescan(&s.labels);
                let got_epi: Vec<f64> = s.trace.epi_row_px().iter().map(|v| v.unwrap()).collect();
                let got_dm: Vec<f64> = s.trace.dm_row_px().iter().map(|v| v.unwrap()).collect();
                assert_eq!(got_epi, epi);
                assert_eq!(got_dm, dm);
                for (sub, int) in s.subpixel_trace.dm_row_px().iter().zip(s.trace.dm_row_px()) {
                    assert!((sub.unwrap() - int.unwrap()).abs() <= 0.5);
                }
            }
        }
    }

    #[test]
    fn drift_stays_within_amplitude() {
        let cfg = Presets::builtin().in_vivo;
        for index in 0..10 {
            let s = generate_sample(&cfg, index).unwrap();
            let epi: Vec<f64> = s.subpixel_trace.epi_row_px().iter().map(|v| v.unwrap()).collect();
            let lo = epi.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = epi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo <= 2.0 * cfg.drift_amplitude_px + 1e-9);
        }
    }

    #[test]
    fn shadows_never_touch_ground_truth() {
        let base = Presets::builtin().ex_vivo;
        let shadowed = PhantomConfig {
            shadow_rate: 1.0,
            ..base.clone()
        };
        for index in 0..10 {
            let a = generate_sample(&shadowed, index).unwrap();
            let b = generate_sample(&base.without_shadows(), index).unwrap();
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.trace, b.trace);
            let (start, end) = a.shadow.unwrap();
            for r in 0..512 {
                for c in start..end {
                    assert_eq!(a.frame.pixels().get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn shadow_frequency_matches_rate() {
        let cfg = PhantomConfig {
            shadow_rate: 0.25,
            height_px: 64,
            width_px: 64,
            epi_depth_range_px: (5.0, 10.0),
            cornea_thickness_range_px: (20.0, 30.0),
            shadow_width_range_px: (4, 16),
            ..Presets::builtin().in_vivo
        };
        let n = 1000;
        let hits = (0..n)
            .filter(|&i| generate_sample(&cfg, i).unwrap().shadow.is_some())
            .count();
        let p = cfg.shadow_rate;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let freq = hits as f64 / n as f64;
        assert!((freq - p).abs() <= 3.0 * se, "frequency {freq} vs rate {p}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = Presets::builtin().in_vivo;
        cfg.cornea_thickness_range_px = (300.0, 400.0);
        assert!(matches!(generate_sample(&cfg, 0), Err(Error::Config { .. })));
        let mut cfg = Presets::builtin().in_vivo;
        cfg.speckle_strength = 1.5;
        assert!(generate_sample(&cfg, 0).is_err());
        let mut cfg = Presets::builtin().in_vivo;
        cfg.epi_depth_range_px = (50.0, 10.0);
        assert!(generate_sample(&cfg, 0).is_err());
    }

    #[test]
    fn standard_split_sizes() {
        let ex = DatasetSpec::standard(Subset::ExVivo);
        assert_eq!((ex.n_train, ex.n_val(), ex.n_test), (200, 40, 50));
        let inv = DatasetSpec::standard(Subset::InVivo);
        assert_eq!((inv.n_train - inv.n_val(), inv.n_val(), inv.n_test), (320, 80, 100));
        let hy = DatasetSpec::standard(Subset::Hybrid);
        assert_eq!(hy.n_train + hy.n_test, 750);
        let in_vivo = (0..750).filter(|&i| hy.style_of(i) == Style::InVivo).count();
        assert_eq!(in_vivo, 500);
    }

    #[test]
    fn small_dataset_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec::custom(Subset::Hybrid, 10, 3);
        let manifest = generate_dataset(&spec, &Presets::builtin(), dir.path()).unwrap();
        assert_eq!(manifest.count(Split::Val), 2);
        assert_eq!(manifest.count(Split::Train), 8);
        assert_eq!(manifest.count(Split::Test), 3);
        let back = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.items, manifest.items);
        let item = &back.items[4];
        let (frame, labels, trace) = back.load_item(item).unwrap();
        let s = generate_sample(Presets::builtin().for_style(item.style), item.index).unwrap();
        assert_eq!(labels, s.labels);
        assert_eq!(trace, s.trace);
        assert_eq!(frame.frame_id, item.index);
    }
}
