use mmodeseg::losses::*;
use mmodeseg::nn::Tensor;
use mmodeseg::types::{Grid, LabelMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMap {
    LabelMap::new(Grid::from_fn(h, w, |_, _| rng.gen_range(0..3u8)), 3).unwrap()
}

/// Random 8x8 labels with long runs so that equal-label pairs are common.
fn banded_labels(rng: &mut ChaCha8Rng) -> LabelMap {
    let cuts: Vec<(usize, usize)> = (0..8)
        .map(|_| {
            let a = rng.gen_range(0..=8);
            let b = rng.gen_range(a..=8);
            (a, b)
        })
        .collect();
    LabelMap::new(
        Grid::from_fn(8, 8, |r, c| {
            let (a, b) = cuts[c];
            if r < a {
                0
            } else if r < b {
                1
            } else {
                2
            }
        }),
        3,
    )
    .unwrap()
}

fn random_probs(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor<f64> {
    let logits = Tensor::from_vec(
        [b, 3, h, w],
        (0..b * 3 * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    );
    softmax(&logits)
}

fn assert_fd(
    f: impl Fn(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    what: &str,
) {
    let h = 1e-6;
    for j in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[j] += h;
        let mut m = x.clone();
        m.data_mut()[j] -= h;
        let numeric = (f(&p) - f(&m)) / (2.0 * h);
        let a = analytic.data()[j];
        let denom = a.abs().max(numeric.abs()).max(1e-7);
        assert!(
            (a - numeric).abs() / denom < 1e-3,
            "{what} element {j}: analytic {a} numeric {numeric}"
        );
    }
}

#[test]
fn ce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let t = vec![random_labels(&mut rng, 8, 8), random_labels(&mut rng, 8, 8)];
        let logits = Tensor::from_vec([2, 3, 8, 8], (0..384).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let (_, g) = loss_ce_grad(&logits, &t).unwrap();
        assert_fd(|x| loss_ce(x, &t).unwrap(), &logits, &g, "ce");
    }
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..5 {
        let t = vec![random_labels(&mut rng, 8, 8)];
        let probs = random_probs(&mut rng, 1, 8, 8);
        let (_, g) = loss_dice_grad(&probs, &t).unwrap();
        assert_fd(|x| loss_dice(x, &t).unwrap(), &probs, &g, "dice");
    }
}

#[test]
fn topo_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..5 {
        let t = vec![banded_labels(&mut rng)];
        let probs = random_probs(&mut rng, 1, 8, 8);
        let (_, g) = loss_topo_grad(&probs, &t).unwrap();
        assert_fd(|x| loss_topo(x, &t).unwrap(), &probs, &g, "topo");
    }
}

#[test]
fn total_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let w = LossWeights::default();
    for epoch in [0, 7, 30] {
        let t = vec![banded_labels(&mut rng)];
        let logits = Tensor::from_vec([1, 3, 8, 8], (0..192).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let (_, g) = loss_total_grad(&logits, &t, &w, epoch).unwrap();
        assert_fd(
            |x| loss_total(x, &t, &w, epoch).unwrap().total,
            &logits,
            &g,
            "total",
        );
    }
}

#[test]
fn warmup_start_has_no_topology_contribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let t = vec![banded_labels(&mut rng)];
    let logits = Tensor::from_vec([1, 3, 8, 8], (0..192).map(|_| rng.gen_range(-3.0..3.0)).collect());
    let w = LossWeights::default();
    let l = loss_total(&logits, &t, &w, 0).unwrap();
    assert_eq!(l.lambda_topo, 0.0);
    assert_eq!(l.total, l.ce + l.dice);
    let l = loss_total(&logits, &t, &w, w.topo_warmup_epochs).unwrap();
    assert_eq!(l.lambda_topo, w.lambda_topo_max);
}

proptest! {
    #[test]
    fn terms_are_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = vec![random_labels(&mut rng, 6, 5)];
        let logits = Tensor::from_vec([1, 3, 6, 5], (0..90).map(|_| rng.gen_range(-4.0..4.0)).collect());
        let probs = softmax(&logits);
        prop_assert!(loss_ce(&logits, &t).unwrap() >= 0.0);
        let d = loss_dice(&probs, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(loss_topo(&probs, &t).unwrap() >= 0.0);
    }

    #[test]
    fn topo_is_invariant_to_column_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = banded_labels(&mut rng);
        let probs = random_probs(&mut rng, 1, 8, 8);
        let mut perm: Vec<usize> = (0..8).collect();
        for i in (1..8).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let plabels = LabelMap::new(
            Grid::from_fn(8, 8, |r, c| labels.get(r, perm[c])),
            3,
        ).unwrap();
        let mut pdata = vec![0.0; 192];
        for k in 0..3 {
            for r in 0..8 {
                for c in 0..8 {
                    pdata[k * 64 + r * 8 + c] = probs.data()[k * 64 + r * 8 + perm[c]];
                }
            }
        }
        let pprobs = Tensor::from_vec([1, 3, 8, 8], pdata);
        let a = loss_topo(&probs, &[labels]).unwrap();
        let b = loss_topo(&pprobs, &[plabels]).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }
}
