//! Cross-entropy, soft Dice and the depth-axis star-shape topology term.
//!
//! Every term is evaluated in f64 and comes with an analytic gradient.
//! Dice and topology are functions of softmax probabilities; their gradients
//! are chained back to the logits through the softmax Jacobian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};
use crate::types::LabelMap;

pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lambda_topo_max: f64,
    pub topo_warmup_epochs: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ce: 1.0,
            lambda_dice: 1.0,
            lambda_topo_max: 0.5,
            topo_warmup_epochs: 20,
        }
    }
}

impl LossWeights {
    /// Linear ramp from 0 at epoch 0 to `lambda_topo_max` at the end of warm-up.
    pub fn lambda_topo(&self, epoch: u32) -> f64 {
        if self.topo_warmup_epochs == 0 || epoch >= self.topo_warmup_epochs {
            self.lambda_topo_max
        } else {
            self.lambda_topo_max * epoch as f64 / self.topo_warmup_epochs as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("loss.lambda_ce", self.lambda_ce),
            ("loss.lambda_dice", self.lambda_dice),
            ("loss.lambda_topo_max", self.lambda_topo_max),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation. `topo` is unweighted;
/// `lambda_topo` is the schedule value that was applied.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dice: f64,
    pub topo: f64,
    pub lambda_topo: f64,
    pub total: f64,
}

fn check_shapes<T: Scalar>(x: &Tensor<T>, target: &[LabelMap]) -> Result<()> {
    let [b, c, h, w] = x.shape();
    if b != target.len() {
        return Err(Error::Dimension(format!(
            "batch of {b} predictions but {} targets",
            target.len()
        )));
    }
    for (i, t) in target.iter().enumerate() {
        if t.height() != h || t.width() != w {
            return Err(Error::Dimension(format!(
                "target {i} is {}x{}, predictions are {h}x{w}",
                t.height(),
                t.width()
            )));
        }
        if t.num_classes() as usize != c {
            return Err(Error::Dimension(format!(
                "target {i} has {} classes, predictions have {c}",
                t.num_classes()
            )));
        }
    }
    Ok(())
}

/// Channel-wise softmax of `B x C x H x W` logits, computed in f64.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = logits.shape();
    let plane = h * w;
    let src = logits.data();
    let mut out = Tensor::zeros(logits.shape());
    let dst = out.data_mut();
    let mut buf = vec![0.0f64; c];
    for i in 0..b {
        let base = i * c * plane;
        for p in 0..plane {
            let max = (0..c)
                .map(|k| src[base + k * plane + p].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, e) in buf.iter_mut().enumerate() {
                *e = (src[base + k * plane + p].as_f64() - max).exp();
                sum += *e;
            }
            for (k, e) in buf.iter().enumerate() {
                dst[base + k * plane + p] = T::lit(e / sum);
            }
        }
    }
    out
}

/// Mean negative log-likelihood and its gradient w.r.t. the logits.
pub fn loss_ce_grad<T: Scalar>(logits: &Tensor<T>, target: &[LabelMap]) -> Result<(f64, Tensor<T>)> {
    check_shapes(logits, target)?;
    let [b, c, h, w] = logits.shape();
    let plane = h * w;
    let n = (b * plane) as f64;
    let src = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let g = grad.data_mut();
    let mut total = 0.0f64;
    let mut buf = vec![0.0f64; c];
    for (i, t) in target.iter().enumerate() {
        let base = i * c * plane;
        let labels = t.grid().as_slice();
        for (p, &label) in labels.iter().enumerate() {
            let max = (0..c)
                .map(|k| src[base + k * plane + p].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, e) in buf.iter_mut().enumerate() {
                *e = (src[base + k * plane + p].as_f64() - max).exp();
                sum += *e;
            }
            let label = label as usize;
            total += sum.ln() - (src[base + label * plane + p].as_f64() - max);
            for (k, e) in buf.iter().enumerate() {
                let tk = if k == label { 1.0 } else { 0.0 };
                g[base + k * plane + p] = T::lit((e / sum - tk) / n);
            }
        }
    }
    Ok((if n > 0.0 { total / n } else { 0.0 }, grad))
}

pub fn loss_ce<T: Scalar>(logits: &Tensor<T>, target: &[LabelMap]) -> Result<f64> {
    loss_ce_grad(logits, target).map(|(l, _)| l)
}

/// `1 - mean_k (2 sum(p t) + eps) / (sum p + sum t + eps)` with sums over the
/// whole batch, and its gradient w.r.t. the probabilities.
pub fn loss_dice_grad<T: Scalar>(probs: &Tensor<T>, target: &[LabelMap]) -> Result<(f64, Tensor<T>)> {
    check_shapes(probs, target)?;
    let [_, c, h, w] = probs.shape();
    let plane = h * w;
    let src = probs.data();
    let mut inter = vec![0.0f64; c];
    let mut sum_p = vec![0.0f64; c];
    let mut sum_t = vec![0.0f64; c];
    for (i, t) in target.iter().enumerate() {
        let base = i * c * plane;
        for (p, &label) in t.grid().as_slice().iter().enumerate() {
            sum_t[label as usize] += 1.0;
            inter[label as usize] += src[base + label as usize * plane + p].as_f64();
            for (k, s) in sum_p.iter_mut().enumerate() {
                *s += src[base + k * plane + p].as_f64();
            }
        }
    }
    let mut score = 0.0;
    let mut d_tp = vec![0.0f64; c]; // d term_k / d p where t = 1
    let mut d_fp = vec![0.0f64; c]; // where t = 0
    for k in 0..c {
        let denom = sum_p[k] + sum_t[k] + DICE_EPS;
        let num = 2.0 * inter[k] + DICE_EPS;
        score += num / denom;
        d_fp[k] = -num / (denom * denom);
        d_tp[k] = 2.0 / denom + d_fp[k];
    }
    let loss = 1.0 - score / c as f64;
    let mut grad = Tensor::zeros(probs.shape());
    let g = grad.data_mut();
    let scale = -1.0 / c as f64;
    for (i, t) in target.iter().enumerate() {
        let base = i * c * plane;
        for (p, &label) in t.grid().as_slice().iter().enumerate() {
            for k in 0..c {
                let d = if k == label as usize { d_tp[k] } else { d_fp[k] };
                g[base + k * plane + p] = T::lit(scale * d);
            }
        }
    }
    Ok((loss, grad))
}

pub fn loss_dice<T: Scalar>(probs: &Tensor<T>, target: &[LabelMap]) -> Result<f64> {
    loss_dice_grad(probs, target).map(|(l, _)| l)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over vertically adjacent pixel pairs with equal target labels of
/// `sum_k |p_ik - t_ik| * |p_ik - p_(i+1)k|`, and its gradient w.r.t. the
/// probabilities. Zero when no such pair exists.
pub fn loss_topo_grad<T: Scalar>(probs: &Tensor<T>, target: &[LabelMap]) -> Result<(f64, Tensor<T>)> {
    check_shapes(probs, target)?;
    let [_, c, h, w] = probs.shape();
    let plane = h * w;
    let src = probs.data();
    let mut pairs = 0usize;
    for t in target {
        let l = t.grid().as_slice();
        for r in 0..h.saturating_sub(1) {
            for col in 0..w {
                if l[r * w + col] == l[(r + 1) * w + col] {
                    pairs += 1;
                }
            }
        }
    }
    let mut grad = Tensor::zeros(probs.shape());
    if pairs == 0 {
        return Ok((0.0, grad));
    }
    let n = pairs as f64;
    let g = grad.data_mut();
    let mut total = 0.0f64;
    for (i, t) in target.iter().enumerate() {
        let base = i * c * plane;
        let l = t.grid().as_slice();
        for r in 0..h.saturating_sub(1) {
            for col in 0..w {
                let (here, below) = (r * w + col, (r + 1) * w + col);
                if l[here] != l[below] {
                    continue;
                }
                for k in 0..c {
                    let tk = if l[here] as usize == k { 1.0 } else { 0.0 };
                    let pi = src[base + k * plane + here].as_f64();
                    let pj = src[base + k * plane + below].as_f64();
                    let (a, d) = (pi - tk, pi - pj);
                    total += a.abs() * d.abs();
                    let gi = (sign(a) * d.abs() + a.abs() * sign(d)) / n;
                    let gj = -a.abs() * sign(d) / n;
                    g[base + k * plane + here] += T::lit(gi);
                    g[base + k * plane + below] += T::lit(gj);
                }
            }
        }
    }
    Ok((total / n, grad))
}

pub fn loss_topo<T: Scalar>(probs: &Tensor<T>, target: &[LabelMap]) -> Result<f64> {
    loss_topo_grad(probs, target).map(|(l, _)| l)
}

/// Chains a probability-space gradient through the channel softmax:
/// `g_logit = p * (g_p - sum_k g_p p)`.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Tensor<T> {
    assert_eq!(probs.shape(), grad_probs.shape());
    let [b, c, h, w] = probs.shape();
    let plane = h * w;
    let (p, gp) = (probs.data(), grad_probs.data());
    let mut out = Tensor::zeros(probs.shape());
    let o = out.data_mut();
    for i in 0..b {
        let base = i * c * plane;
        for px in 0..plane {
            let dot: f64 = (0..c)
                .map(|k| p[base + k * plane + px].as_f64() * gp[base + k * plane + px].as_f64())
                .sum();
            for k in 0..c {
                let idx = base + k * plane + px;
                o[idx] = T::lit(p[idx].as_f64() * (gp[idx].as_f64() - dot));
            }
        }
    }
    out
}

/// Weighted total loss and its gradient w.r.t. the logits.
pub fn loss_total_grad<T: Scalar>(
    logits: &Tensor<T>,
    target: &[LabelMap],
    weights: &LossWeights,
    epoch: u32,
) -> Result<(LossBreakdown, Tensor<T>)> {
    let (ce, g_ce) = loss_ce_grad(logits, target)?;
    let probs = softmax(logits);
    let (dice, g_dice) = loss_dice_grad(&probs, target)?;
    let (topo, g_topo) = loss_topo_grad(&probs, target)?;
    let lambda_topo = weights.lambda_topo(epoch);

    let mut g_p = g_dice;
    let (ld, lt) = (T::lit(weights.lambda_dice), T::lit(lambda_topo));
    for (a, &b) in g_p.data_mut().iter_mut().zip(g_topo.data()) {
        *a = ld * *a + lt * b;
    }
    let mut grad = softmax_backward(&probs, &g_p);
    let lc = T::lit(weights.lambda_ce);
    for (a, &b) in grad.data_mut().iter_mut().zip(g_ce.data()) {
        *a += lc * b;
    }
    let total = weights.lambda_ce * ce + weights.lambda_dice * dice + lambda_topo * topo;
    Ok((
        LossBreakdown {
            ce,
            dice,
            topo,
            lambda_topo,
            total,
        },
        grad,
    ))
}

pub fn loss_total<T: Scalar>(
    logits: &Tensor<T>,
    target: &[LabelMap],
    weights: &LossWeights,
    epoch: u32,
) -> Result<LossBreakdown> {
    loss_total_grad(logits, target, weights, epoch).map(|(l, _)| l)
}

/// Packs label maps into a one-hot `B x C x H x W` tensor.
pub fn one_hot<T: Scalar>(target: &[LabelMap], classes: usize) -> Tensor<T> {
    let (h, w) = target
        .first()
        .map(|t| (t.height(), t.width()))
        .unwrap_or((0, 0));
    let plane = h * w;
    let mut out = Tensor::zeros([target.len(), classes, h, w]);
    let o = out.data_mut();
    for (i, t) in target.iter().enumerate() {
        for (p, &label) in t.grid().as_slice().iter().enumerate() {
            o[(i * classes + label as usize) * plane + p] = T::one();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(Grid::from_vec(h, w, v.to_vec()).unwrap(), 3).unwrap()
    }

    fn column_probs(class1: &[f64]) -> Tensor<f64> {
        let h = class1.len();
        let mut data = vec![0.0; 3 * h];
        for (r, &p) in class1.iter().enumerate() {
            data[r] = 1.0 - p;
            data[h + r] = p;
        }
        Tensor::from_vec([1, 3, h, 1], data)
    }

    #[test]
    fn uniform_logits_give_ln3() {
        let t = labels(2, 2, &[0, 1, 2, 1]);
        let ce = loss_ce(&Tensor::<f64>::zeros([1, 3, 2, 2]), &[t]).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction() {
        let t = labels(2, 3, &[0, 0, 1, 1, 2, 2]);
        let logits = one_hot::<f64>(std::slice::from_ref(&t), 3);
        let mut big = logits.clone();
        big.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        assert!(loss_ce(&big, std::slice::from_ref(&t)).unwrap() < 1e-3);
        assert!(loss_dice(&logits, std::slice::from_ref(&t)).unwrap() <= 1e-4);
        assert_eq!(loss_topo(&logits, &[t]).unwrap(), 0.0);
    }

    #[test]
    fn ce_decreases_with_target_logit() {
        let t = labels(1, 2, &[1, 2]);
        let mut logits = Tensor::<f64>::zeros([1, 3, 1, 2]);
        let before = loss_ce(&logits, std::slice::from_ref(&t)).unwrap();
        logits.data_mut()[2] += 0.5; // class 1, pixel 0
        assert!(loss_ce(&logits, &[t]).unwrap() < before);
    }

    #[test]
    fn dice_half_overlap() {
        // Two pixels of class 1; one predicted with p=1, the other with p=0.
        let t = labels(2, 1, &[1, 1]);
        let probs = Tensor::from_vec([1, 3, 2, 1], vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let (_, _) = loss_dice_grad(&probs, std::slice::from_ref(&t)).unwrap();
        // class 0: I=0, S=1 -> eps/(1+eps); class 1: 2/3; class 2: eps/eps = 1.
        let expect = 1.0 - (DICE_EPS / (1.0 + DICE_EPS) + (2.0 + DICE_EPS) / (3.0 + DICE_EPS) + 1.0) / 3.0;
        let got = loss_dice(&probs, &[t]).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!(((2.0 + DICE_EPS) / (3.0 + DICE_EPS) - 2.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn dice_disjoint_is_near_one() {
        let t = labels(1, 4, &[1, 1, 1, 1]);
        let probs = one_hot::<f64>(&[labels(1, 4, &[2, 2, 2, 2])], 3);
        let l = loss_dice(&probs, &[t]).unwrap();
        // class 0 absent from both: its term is 1, so the loss tends to 2/3.
        assert!((l - 2.0 / 3.0).abs() < 1e-5, "{l}");
        let t = labels(1, 6, &[0, 0, 1, 1, 2, 2]);
        let probs = one_hot::<f64>(&[labels(1, 6, &[1, 1, 2, 2, 0, 0])], 3);
        let l = loss_dice(&probs, &[t]).unwrap();
        assert!(l > 1.0 - 1e-4 && l <= 1.0, "{l}");
    }

    #[test]
    fn topo_constant_columns_are_free() {
        let t = labels(4, 2, &[0, 0, 1, 1, 1, 2, 2, 2]);
        let probs = Tensor::from_vec(
            [1, 3, 4, 2],
            [[0.2, 0.5], [0.3, 0.1], [0.5, 0.4]]
                .iter()
                .flat_map(|ch| (0..4).flat_map(move |_| ch.iter().copied()))
                .collect(),
        );
        assert_eq!(loss_topo(&probs, &[t]).unwrap(), 0.0);
    }

    #[test]
    fn topo_hand_evaluated_columns() {
        let t4 = labels(4, 1, &[1, 1, 1, 1]);
        // Alternating [1,0,1,0]: pixels 1 and 3 are wrong, only pixel 1 has a
        // successor; classes 0 and 1 each contribute 1 over 3 pairs.
        let alt = loss_topo(&column_probs(&[1.0, 0.0, 1.0, 0.0]), std::slice::from_ref(&t4)).unwrap();
        assert!((alt - 2.0 / 3.0).abs() < 1e-12);
        let flip = loss_topo(&column_probs(&[1.0, 1.0, 0.0, 1.0]), std::slice::from_ref(&t4)).unwrap();
        assert!((flip - 2.0 / 3.0).abs() < 1e-12);
        assert!(alt > 0.0 && alt >= flip);
        // On a longer column alternation is strictly worse than one flip.
        let t6 = labels(6, 1, &[1; 6]);
        let alt = loss_topo(&column_probs(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]), std::slice::from_ref(&t6)).unwrap();
        let flip = loss_topo(&column_probs(&[1.0, 1.0, 0.0, 1.0, 1.0, 1.0]), &[t6]).unwrap();
        assert!((alt - 4.0 / 5.0).abs() < 1e-12);
        assert!((flip - 2.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_schedule() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_topo(0), 0.0);
        assert_eq!(w.lambda_topo(10), 0.25);
        assert_eq!(w.lambda_topo(20), 0.5);
        assert_eq!(w.lambda_topo(99), 0.5);
        let none = LossWeights {
            topo_warmup_epochs: 0,
            ..w
        };
        assert_eq!(none.lambda_topo(0), 0.5);
    }

    #[test]
    fn degenerate_weighting_is_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::from_vec([1, 3, 4, 4], (0..48).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let t = labels(4, 4, &[0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2]);
        let w = LossWeights {
            lambda_ce: 1.0,
            lambda_dice: 0.0,
            lambda_topo_max: 0.0,
            topo_warmup_epochs: 0,
        };
        let total = loss_total::<f64>(&logits, std::slice::from_ref(&t), &w, 5).unwrap();
        assert_eq!(total.total, loss_ce(&logits, &[t]).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let t = labels(2, 2, &[0, 1, 1, 2]);
        assert!(loss_ce(&Tensor::<f64>::zeros([1, 3, 2, 3]), std::slice::from_ref(&t)).is_err());
        assert!(loss_dice(&Tensor::<f64>::zeros([2, 3, 2, 2]), &[t]).is_err());
    }
}
