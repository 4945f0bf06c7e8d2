use std::collections::HashSet;

use mmodeseg::metrics::*;
use mmodeseg::pipeline::{OracleModel, PipelineConfig};
use mmodeseg::synthgen::{generate_dataset, DatasetSpec, Presets, Split, Subset};
use mmodeseg::types::{BoundaryTrace, Grid, LabelMap};
use mmodeseg::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lm(h: usize, w: usize, v: &[u8]) -> LabelMap {
    LabelMap::new(Grid::from_vec(h, w, v.to_vec()).unwrap(), 3).unwrap()
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMap {
    LabelMap::new(Grid::from_fn(h, w, |_, _| rng.gen_range(0..3u8)), 3).unwrap()
}

fn class_set(m: &LabelMap, k: u8) -> HashSet<(usize, usize)> {
    (0..m.height())
        .flat_map(|r| (0..m.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| m.get(r, c) == k)
        .collect()
}

/// Direct SSIM: for every valid window position, weighted sums with the
/// 2-D Gaussian (outer product of the normalised 1-D kernel).
fn naive_ssim(a: &Grid<f64>, b: &Grid<f64>) -> f64 {
    let n = 11;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let (h, w) = (a.height(), a.width());
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for r0 in 0..=h - n {
        for q0 in 0..=w - n {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let wt = g[i] * g[j];
                    let (x, y) = (a.get(r0 + i, q0 + j), b.get(r0 + i, q0 + j));
                    mx += wt * x;
                    my += wt * y;
                    xx += wt * x * x;
                    yy += wt * y * y;
                    xy += wt * x * y;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn two_thirds_overlap_band() {
    // Bands of three rows sharing two.
    let truth = lm(4, 1, &[1, 1, 1, 2]);
    let pred = lm(4, 1, &[0, 1, 1, 1]);
    let o = overlap(&pred, &truth).unwrap();
    assert!((o.dice[1] - 2.0 / 3.0).abs() < 1e-15);
    assert!((o.iou[1] - 0.5).abs() < 1e-15);
}

#[test]
fn complementary_support_scores_zero() {
    let truth = lm(2, 3, &[0, 0, 1, 1, 2, 2]);
    let pred = lm(2, 3, &[1, 1, 2, 2, 0, 0]);
    assert_eq!(dice_iou(&pred, &truth).unwrap(), (0.0, 0.0));
}

#[test]
fn absent_class_scores_one() {
    let a = lm(1, 2, &[0, 1]);
    let o = overlap(&a, &a).unwrap();
    assert_eq!(o.dice, vec![1.0, 1.0, 1.0]);
}

#[test]
fn shape_mismatch() {
    assert!(matches!(overlap(&lm(1, 2, &[0, 1]), &lm(2, 1, &[0, 1])), Err(Error::Dimension(_))));
}

#[test]
fn half_the_columns_shifted_by_two() {
    let truth = BoundaryTrace::new(vec![Some(50.0); 8], vec![Some(90.0); 8], 2.61, 128).unwrap();
    let epi: Vec<Option<f64>> = (0..8).map(|c| Some(if c < 4 { 52.0 } else { 50.0 })).collect();
    let pred = BoundaryTrace::new(epi, vec![Some(90.0); 8], 2.61, 128).unwrap();
    let e = boundary_mae(&pred, &truth).unwrap();
    assert_eq!(e.epi_mae_px, Some(1.0));
    assert_eq!(e.dm_mae_px, Some(0.0));
    assert_eq!(e.coverage, 1.0);
}

#[test]
fn missing_columns_reduce_coverage_only() {
    let truth = BoundaryTrace::new(vec![Some(50.0); 4], vec![Some(90.0); 4], 2.61, 128).unwrap();
    let pred = BoundaryTrace::new(
        vec![Some(51.0), None, Some(51.0), None],
        vec![Some(90.0), None, Some(90.0), None],
        2.61,
        128,
    )
    .unwrap();
    let e = boundary_mae(&pred, &truth).unwrap();
    assert_eq!(e.epi_mae_px, Some(1.0));
    assert_eq!(e.coverage, 0.5);

    let none = BoundaryTrace::new(vec![None; 4], vec![None; 4], 2.61, 128).unwrap();
    let e = boundary_mae(&none, &truth).unwrap();
    assert_eq!((e.epi_mae_px, e.dm_mae_um, e.coverage), (None, None, 0.0));
    assert!(matches!(boundary_mae(&truth, &none), Err(Error::Contract(_))));
}

#[test]
fn ssim_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..5 {
        let a = Grid::from_fn(17, 23, |_, _| rng.gen::<f64>());
        let b = Grid::from_fn(17, 23, |r, c| (a.get(r, c) + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0));
        let got = ssim(&ChannelMap::single(a.clone()), &ChannelMap::single(b.clone())).unwrap();
        let want = naive_ssim(&a, &b).clamp(0.0, 1.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn ssim_examples() {
    let checker = Grid::from_fn(16, 16, |r, c| ((r + c) % 2) as f64);
    let inverse = checker.map(|v| 1.0 - v);
    let same = ssim(&ChannelMap::single(checker.clone()), &ChannelMap::single(checker.clone())).unwrap();
    assert!((same - 1.0).abs() < 1e-12);
    let inv = ssim(&ChannelMap::single(checker.clone()), &ChannelMap::single(inverse)).unwrap();
    assert!(inv < 0.5, "{inv}");
    let small = Grid::filled(10, 30, 0.5);
    assert!(matches!(
        ssim(&ChannelMap::single(small.clone()), &ChannelMap::single(small)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn psnr_examples() {
    assert!((psnr_from_mse(1e-3) - 30.0).abs() < 1e-9);
    let g = ChannelMap::single(Grid::filled(12, 12, 0.25));
    assert_eq!(psnr(&g, &g).unwrap(), f64::INFINITY);
}

#[test]
fn psnr_falls_with_noise_amplitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let truth = Grid::from_fn(32, 32, |r, _| if r < 16 { 0.0 } else { 1.0 });
    let unit: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.05, 0.1, 0.2, 0.4] {
        let pred = Grid::from_fn(32, 32, |r, c| truth.get(r, c) + amp * unit[r * 32 + c]);
        let p = psnr(&ChannelMap::single(pred), &ChannelMap::single(truth.clone())).unwrap();
        assert!(p < last, "psnr {p} at amplitude {amp} not below {last}");
        last = p;
    }
}

#[test]
fn inf_is_serialised_as_string() {
    let fm = FrameMetrics {
        frame_id: 1,
        macro_dice: 1.0,
        macro_iou: 1.0,
        epi_mae_px: Some(0.0),
        dm_mae_px: Some(0.0),
        coverage: 1.0,
        ssim: 1.0,
        psnr_db: f64::INFINITY,
        confidence: 1.0,
    };
    let json = serde_json::to_string(&fm).unwrap();
    assert!(json.contains("\"psnr_db\":\"inf\""), "{json}");
    let back: FrameMetrics = serde_json::from_str(&json).unwrap();
    assert_eq!(back, fm);
}

#[test]
fn oracle_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&DatasetSpec::custom(Subset::InVivo, 0, 3), &Presets::builtin(), dir.path()).unwrap();
    let mut oracle = OracleModel::new();
    for item in manifest.split(Split::Test) {
        let (frame, labels, _) = manifest.load_item(item).unwrap();
        oracle.insert(frame.frame_id, labels);
    }
    let out = dir.path().join("eval");
    let (report, frames) = evaluate(&oracle, &manifest, Split::Test, &PipelineConfig::default(), Some(&out)).unwrap();
    assert_eq!(report.n_frames, 3);
    assert_eq!((report.macro_dice, report.macro_iou), (1.0, 1.0));
    assert_eq!((report.epi_mae_px, report.dm_mae_px), (Some(0.0), Some(0.0)));
    assert_eq!(report.psnr_db, f64::INFINITY);
    assert_eq!(report.mean_confidence, 1.0);
    assert!(frames.iter().all(|f| f.ssim == 1.0));
    let text = std::fs::read_to_string(out.join("eval_report.json")).unwrap();
    assert!(text.contains("\"inf\""));
    assert_eq!(std::fs::read_to_string(out.join("eval_frames.csv")).unwrap().lines().count(), 4);

    let (again, _) = evaluate(&oracle, &manifest, Split::Test, &PipelineConfig::default(), None).unwrap();
    assert_eq!(again.without_timing(), report.without_timing());
    assert!(report.table_row().starts_with("1.0000 & inf & 1.0000 & 1.0000 & "));
    assert_eq!(EvalReport::table_header(), "SSIM & PSNR & IoU & Dice & Hz");
}

#[test]
fn empty_split_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&DatasetSpec::custom(Subset::InVivo, 0, 1), &Presets::builtin(), dir.path()).unwrap();
    let r = evaluate(&OracleModel::new(), &manifest, Split::Val, &PipelineConfig::default(), None);
    assert!(matches!(r, Err(Error::Usage(_))));
}

proptest! {
    #[test]
    fn overlap_matches_set_counts(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_map(&mut rng, 8, 8);
        let b = random_map(&mut rng, 8, 8);
        let o = overlap(&a, &b).unwrap();
        for k in 0..3u8 {
            let (p, t) = (class_set(&a, k), class_set(&b, k));
            let inter = p.intersection(&t).count();
            let union = p.union(&t).count();
            let (d, i) = if union == 0 {
                (1.0, 1.0)
            } else {
                (2.0 * inter as f64 / (p.len() + t.len()) as f64, inter as f64 / union as f64)
            };
            prop_assert_eq!(o.dice[k as usize], d);
            prop_assert_eq!(o.iou[k as usize], i);
            prop_assert!(o.iou[k as usize] <= o.dice[k as usize]);
        }
    }

    #[test]
    fn micrometres_are_exact_products(err in 0.0f64..20.0) {
        let truth = BoundaryTrace::new(vec![Some(100.0); 4], vec![Some(200.0); 4], 2.61, 512).unwrap();
        let pred = BoundaryTrace::new(vec![Some(100.0 + err); 4], vec![Some(200.0 - err); 4], 2.61, 512).unwrap();
        let e = boundary_mae(&pred, &truth).unwrap();
        prop_assert_eq!(e.epi_mae_um.unwrap(), e.epi_mae_px.unwrap() * 2.61);
        prop_assert_eq!(e.dm_mae_um.unwrap(), e.dm_mae_px.unwrap() * 2.61);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ChannelMap::single(Grid::from_fn(14, 14, |_, _| rng.gen::<f64>()));
        let b = ChannelMap::single(Grid::from_fn(14, 14, |_, _| rng.gen::<f64>()));
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }
}
