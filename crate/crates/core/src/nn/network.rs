//! Lightweight convolution + tokenised-MLP encoder-decoder.
//!
//! Three convolutional encoder stages (each halving resolution), two
//! shifted-MLP token stages (the first halving again), and a mirrored decoder
//! with additive skips. Output logits have the input's spatial size.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{BnBatchStats, BnMode, Graph, ShiftAxis, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::preprocess::{NormStats, PAD_MULTIPLE};

pub const TINY_WIDTHS: [usize; 5] = [8, 16, 32, 64, 128];
pub const FULL_WIDTHS: [usize; 5] = [16, 32, 128, 160, 256];
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_widths: Vec<usize>,
    pub downsample_stages: u32,
    pub token_mlp_stages: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl NetworkConfig {
    pub fn tiny() -> Self {
        Self::with_widths(TINY_WIDTHS)
    }

    pub fn full() -> Self {
        Self::with_widths(FULL_WIDTHS)
    }

    fn with_widths(widths: [usize; 5]) -> Self {
        NetworkConfig {
            in_channels: 1,
            num_classes: 3,
            stage_widths: widths.to_vec(),
            downsample_stages: 4,
            token_mlp_stages: 2,
        }
    }

    /// Looks up a named preset (`tiny` or `full`).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "full" => Ok(Self::full()),
            other => Err(Error::config(
                "network.preset",
                format!("unknown preset `{other}` (expected tiny or full)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("network.in_channels", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("network.num_classes", "need at least 2 classes"));
        }
        if self.stage_widths.len() != 5 || self.stage_widths.contains(&0) {
            return Err(Error::config(
                "network.stage_widths",
                "need exactly 5 positive widths",
            ));
        }
        if 1usize.checked_shl(self.downsample_stages) != Some(PAD_MULTIPLE) {
            return Err(Error::config(
                "network.downsample_stages",
                format!("2^downsample_stages must equal the padding multiple {PAD_MULTIPLE}"),
            ));
        }
        if self.token_mlp_stages != 2 {
            return Err(Error::config(
                "network.token_mlp_stages",
                "this architecture has exactly 2 token-MLP stages",
            ));
        }
        Ok(())
    }

    fn w(&self, i: usize) -> usize {
        self.stage_widths[i]
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `±sqrt(3 * gain / fan_in)`.
    Uniform { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

struct Slot {
    name: String,
    shape: [usize; 4],
    init: Init,
}

#[derive(Default)]
struct Layout {
    params: Vec<Slot>,
    buffers: Vec<Slot>,
}

impl Layout {
    fn param(&mut self, name: String, shape: [usize; 4], init: Init) {
        self.params.push(Slot { name, shape, init });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        let fan_in = cin * k * k;
        self.param(format!("{name}.w"), [cout, cin, k, k], Init::Uniform { fan_in, gain });
        self.param(format!("{name}.b"), [cout, 1, 1, 1], Init::Zeros);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.param(format!("{name}.gamma"), [c, 1, 1, 1], Init::Ones);
        self.param(format!("{name}.beta"), [c, 1, 1, 1], Init::Zeros);
        for (suffix, init) in [("running_mean", Init::Zeros), ("running_var", Init::Ones)] {
            self.buffers.push(Slot {
                name: format!("{name}.{suffix}"),
                shape: [c, 1, 1, 1],
                init,
            });
        }
    }

    fn ln(&mut self, name: &str, c: usize) {
        self.param(format!("{name}.gamma"), [c, 1, 1, 1], Init::Ones);
        self.param(format!("{name}.beta"), [c, 1, 1, 1], Init::Zeros);
    }

    fn token_block(&mut self, name: &str, c: usize) {
        self.ln(&format!("{name}.norm"), c);
        self.conv(&format!("{name}.fc1"), c, c, 1, 1.0);
        self.param(
            format!("{name}.dw.w"),
            [c, 1, 3, 3],
            Init::Uniform { fan_in: 9, gain: 1.0 },
        );
        self.param(format!("{name}.dw.b"), [c, 1, 1, 1], Init::Zeros);
        self.conv(&format!("{name}.fc2"), c, c, 1, 1.0);
    }

    fn build(cfg: &NetworkConfig) -> Layout {
        let mut l = Layout::default();
        let w = |i| cfg.w(i);
        l.conv("enc1", cfg.in_channels, w(0), 3, 2.0);
        l.bn("enc1.bn", w(0));
        l.conv("enc2", w(0), w(1), 3, 2.0);
        l.bn("enc2.bn", w(1));
        l.conv("enc3", w(1), w(2), 3, 2.0);
        l.bn("enc3.bn", w(2));
        l.conv("tok4.embed", w(2), w(3), 3, 1.0);
        l.ln("tok4.embed_norm", w(3));
        l.token_block("tok4.block", w(3));
        l.ln("tok4.norm", w(3));
        l.conv("tok5.embed", w(3), w(4), 3, 1.0);
        l.ln("tok5.embed_norm", w(4));
        l.token_block("tok5.block", w(4));
        l.ln("tok5.norm", w(4));
        l.conv("dec1", w(4), w(3), 3, 2.0);
        l.bn("dec1.bn", w(3));
        l.token_block("dec1.block", w(3));
        l.ln("dec1.norm", w(3));
        l.conv("dec2", w(3), w(2), 3, 2.0);
        l.bn("dec2.bn", w(2));
        l.conv("dec3", w(2), w(1), 3, 2.0);
        l.bn("dec3.bn", w(1));
        l.conv("dec4", w(1), w(0), 3, 2.0);
        l.bn("dec4.bn", w(0));
        l.conv("dec5", w(0), w(0), 3, 2.0);
        l.bn("dec5.bn", w(0));
        l.conv("head", w(0), cfg.num_classes, 1, 1.0);
        l
    }
}

/// Number of trainable scalars for a configuration.
pub fn count_params(config: &NetworkConfig) -> usize {
    Layout::build(config)
        .params
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Trainable parameters, batch-norm running statistics, and the input
/// normalisation the weights were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub(crate) config: NetworkConfig,
    pub(crate) norm: NormStats,
    pub(crate) version: String,
    pub(crate) names: Vec<String>,
    pub(crate) tensors: Vec<Tensor<f32>>,
    pub(crate) buffer_names: Vec<String>,
    pub(crate) buffers: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

/// Version string embedded in checkpoints.
pub const VERSION_TAG: &str = concat!("mmodeseg-", env!("CARGO_PKG_VERSION"));

fn init_tensor(slot: &Slot, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n: usize = slot.shape.iter().product();
    let data = match slot.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform { fan_in, gain } => {
            let bound = (3.0 * gain / fan_in as f64).sqrt() as f32;
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
    };
    Tensor::from_vec(slot.shape, data)
}

impl ModelParams {
    /// Seeded random initialisation.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout.params.iter().map(|s| init_tensor(s, &mut rng)).collect();
        let buffers = layout.buffers.iter().map(|s| init_tensor(s, &mut rng)).collect();
        Ok(Self::assemble(
            config.clone(),
            NormStats::default(),
            VERSION_TAG.to_string(),
            layout.params.into_iter().map(|s| s.name).collect(),
            tensors,
            layout.buffers.into_iter().map(|s| s.name).collect(),
            buffers,
        ))
    }

    pub(crate) fn assemble(
        config: NetworkConfig,
        norm: NormStats,
        version: String,
        names: Vec<String>,
        tensors: Vec<Tensor<f32>>,
        buffer_names: Vec<String>,
        buffers: Vec<Tensor<f32>>,
    ) -> Self {
        let index = names.iter().cloned().zip(0..).collect();
        let buffer_index = buffer_names.iter().cloned().zip(0..).collect();
        ModelParams {
            config,
            norm,
            version,
            names,
            tensors,
            buffer_names,
            buffers,
            index,
            buffer_index,
        }
    }

    /// Expected `(names, shapes)` of parameters and buffers for a config.
    pub(crate) fn expected_layout(config: &NetworkConfig) -> (Vec<(String, [usize; 4])>, Vec<(String, [usize; 4])>) {
        let l = Layout::build(config);
        let f = |v: Vec<Slot>| v.into_iter().map(|s| (s.name, s.shape)).collect();
        (f(l.params), f(l.buffers))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn norm_stats(&self) -> NormStats {
        self.norm
    }

    pub fn set_norm_stats(&mut self, norm: NormStats) {
        self.norm = norm;
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn buffers(&self) -> &[Tensor<f32>] {
        &self.buffers
    }

    /// Parameter by name.
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Blends batch statistics from a training forward into the running
    /// estimates (exponential moving average, momentum 0.1).
    pub fn update_running_stats(&mut self, layers: &[String], stats: &[BnBatchStats]) {
        assert_eq!(layers.len(), stats.len(), "one statistics record per layer");
        for (name, s) in layers.iter().zip(stats) {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let i = self.buffer_index[&format!("{name}.{suffix}")];
                for (r, &b) in self.buffers[i].data_mut().iter_mut().zip(values.iter()) {
                    *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * b) as f32;
                }
            }
        }
    }

    fn buffer(&self, name: &str) -> &[f32] {
        self.buffers[self.buffer_index[name]].data()
    }
}

struct Builder<'a, T: Scalar> {
    p: &'a ModelParams,
    g: Graph<T>,
    vars: Vec<Option<Var>>,
    train: bool,
    bn_order: Vec<String>,
    /// `(tensor, element, delta)` added after casting; finite-difference hook.
    perturb: Option<(usize, usize, f64)>,
}

impl<'a, T: Scalar> Builder<'a, T> {
    fn p(&mut self, name: &str) -> Var {
        let i = *self
            .p
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let mut t = self.p.tensors[i].cast::<T>();
        if let Some((_, ei, delta)) = self.perturb.filter(|p| p.0 == i) {
            t.data_mut()[ei] += T::lit(delta);
        }
        let v = if self.train {
            self.g.param(t)
        } else {
            self.g.input(t)
        };
        self.vars[i] = Some(v);
        v
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.g.conv(x, w, b, stride, pad)
    }

    fn bn(&mut self, x: Var, name: &str) -> Var {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        if self.train {
            self.bn_order.push(name.to_string());
            self.g.batch_norm(x, gamma, beta, BnMode::Train)
        } else {
            let mean = self.p.buffer(&format!("{name}.running_mean"));
            let var = self.p.buffer(&format!("{name}.running_var"));
            self.g.batch_norm(x, gamma, beta, BnMode::Eval { mean, var })
        }
    }

    fn ln(&mut self, x: Var, name: &str) -> Var {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        self.g.layer_norm(x, gamma, beta)
    }

    /// `x + fc2(shift_w(gelu(dw(fc1(shift_h(ln(x)))))))`
    fn token_block(&mut self, x: Var, name: &str) -> Var {
        let h = self.ln(x, &format!("{name}.norm"));
        let h = self.g.shift(h, ShiftAxis::Height);
        let h = self.conv(h, &format!("{name}.fc1"), 1, 0);
        let dw = self.p(&format!("{name}.dw.w"));
        let db = self.p(&format!("{name}.dw.b"));
        let h = self.g.dw_conv3(h, dw, db);
        let h = self.g.gelu(h);
        let h = self.g.shift(h, ShiftAxis::Width);
        let h = self.conv(h, &format!("{name}.fc2"), 1, 0);
        self.g.add(x, h)
    }

    fn enc_stage(&mut self, x: Var, name: &str) -> Var {
        let h = self.conv(x, name, 1, 1);
        let h = self.bn(h, &format!("{name}.bn"));
        let h = self.g.relu(h);
        self.g.max_pool2(h)
    }

    fn tok_stage(&mut self, x: Var, name: &str, stride: usize) -> Var {
        let h = self.conv(x, &format!("{name}.embed"), stride, 1);
        let h = self.ln(h, &format!("{name}.embed_norm"));
        let h = self.token_block(h, &format!("{name}.block"));
        self.ln(h, &format!("{name}.norm"))
    }

    /// `relu(up2(bn(conv(x))))`
    fn dec_up(&mut self, x: Var, name: &str) -> Var {
        let h = self.conv(x, name, 1, 1);
        let h = self.bn(h, &format!("{name}.bn"));
        let h = self.g.upsample2(h);
        self.g.relu(h)
    }

    fn network(&mut self, input: Var) -> Var {
        let e1 = self.enc_stage(input, "enc1");
        let e2 = self.enc_stage(e1, "enc2");
        let e3 = self.enc_stage(e2, "enc3");
        let t4 = self.tok_stage(e3, "tok4", 2);
        let t5 = self.tok_stage(t4, "tok5", 1);

        let d = self.conv(t5, "dec1", 1, 1);
        let d = self.bn(d, "dec1.bn");
        let d = self.g.relu(d);
        let d = self.g.add(d, t4);
        let d = self.token_block(d, "dec1.block");
        let d = self.ln(d, "dec1.norm");

        let d = self.dec_up(d, "dec2");
        let d = self.g.add(d, e3);
        let d = self.dec_up(d, "dec3");
        let d = self.g.add(d, e2);
        let d = self.dec_up(d, "dec4");
        let d = self.g.add(d, e1);
        let d = self.dec_up(d, "dec5");
        self.conv(d, "head", 1, 0)
    }
}

fn check_input<T: Scalar>(params: &ModelParams, batch: &Tensor<T>) -> Result<()> {
    let [_, c, h, w] = batch.shape();
    if c != params.config.in_channels {
        return Err(Error::Dimension(format!(
            "network expects {} input channel(s), got {c}",
            params.config.in_channels
        )));
    }
    if h == 0 || w == 0 || h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
        return Err(Error::Dimension(format!(
            "input {h}x{w} is not a positive multiple of {PAD_MULTIPLE}; pad first"
        )));
    }
    Ok(())
}

/// Result of a training-mode forward pass, kept alive for the backward pass.
pub struct TrainForward<T: Scalar> {
    graph: Graph<T>,
    logits: Var,
    vars: Vec<Option<Var>>,
    bn_order: Vec<String>,
}

impl<T: Scalar> TrainForward<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.graph.value(self.logits)
    }

    /// Gradients w.r.t. every parameter, in parameter order.
    pub fn backward(&self, grad_logits: Tensor<T>) -> Vec<Tensor<T>> {
        let mut grads = self.graph.backward(self.logits, grad_logits);
        self.vars
            .iter()
            .map(|v| {
                v.and_then(|v| grads.take(v))
                    .expect("every parameter takes part in the forward pass")
            })
            .collect()
    }

    /// Batch-norm layer names and their observed statistics, in call order.
    pub fn bn_stats(&self) -> (&[String], &[BnBatchStats]) {
        (&self.bn_order, self.graph.bn_stats())
    }
}

fn run<T: Scalar>(
    params: &ModelParams,
    batch: Tensor<T>,
    train: bool,
    half: bool,
    perturb: Option<(usize, usize, f64)>,
) -> TrainForward<T> {
    let mut b = Builder {
        p: params,
        g: if half {
            Graph::half_precision()
        } else {
            Graph::new()
        },
        vars: vec![None; params.tensors.len()],
        train,
        bn_order: Vec::new(),
        perturb,
    };
    let input = b.g.input(batch);
    let logits = b.network(input);
    TrainForward {
        graph: b.g,
        logits,
        vars: b.vars,
        bn_order: b.bn_order,
    }
}

/// Training-mode forward (batch statistics, gradients enabled).
pub fn forward_train<T: Scalar>(
    params: &ModelParams,
    batch: Tensor<T>,
    mixed_precision: bool,
) -> Result<TrainForward<T>> {
    check_input(params, &batch)?;
    if batch.shape()[0] < 2 {
        return Err(Error::Dimension(
            "training batch needs at least 2 stripes for batch statistics".into(),
        ));
    }
    Ok(run(params, batch, true, mixed_precision, None))
}

fn forward_eval(params: &ModelParams, batch: &Tensor<f32>, half: bool) -> Result<Tensor<f32>> {
    check_input(params, batch)?;
    let [n, _, h, w] = batch.shape();
    if n == 0 {
        return Ok(Tensor::zeros([0, params.config.num_classes, h, w]));
    }
    let out = run(params, batch.clone(), false, half, None);
    Ok(out.graph.value(out.logits).clone())
}

/// Evaluation-mode forward: `B x in_channels x H x W` → `B x C x H x W` logits.
pub fn forward(params: &ModelParams, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    forward_eval(params, batch, false)
}

/// As [`forward`], but weights and every intermediate activation are rounded
/// to IEEE half precision.
pub fn forward_mixed_precision(params: &ModelParams, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    forward_eval(params, batch, true)
}
