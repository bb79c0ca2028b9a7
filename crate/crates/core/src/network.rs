//! Dense evidential network: a ReLU feature extractor followed by three heads
//! producing the concentration `alpha`, the allocation probabilities `p` and
//! the dispersion `tau` of an FD distribution.
//!
//! Forward and backward passes are written out by hand. The backward pass takes
//! the loss gradient with respect to `(alpha, p, tau)` and applies the chain
//! rule through the output activations and the layers.

use crate::error::{Error, Result};
use crate::fd::FdParams;
use crate::objective::{loss_and_gradient, FdGradient};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::hash::{Hash, Hasher};

const POWER_ITERATION_CAP: usize = 1000;
const POWER_ITERATION_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    FixPUniform,
    FixPNormalized,
    FixTau,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::FixPUniform,
        Ablation::FixPNormalized,
        Ablation::FixTau,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::FixPUniform => "fix_p_uniform",
            Ablation::FixPNormalized => "fix_p_normalized",
            Ablation::FixTau => "fix_tau",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

/// Parameter groups that get spectral normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectralNormLayers {
    pub feature_extractor: bool,
    pub alpha_head: bool,
}

impl Default for SpectralNormLayers {
    fn default() -> Self {
        Self {
            feature_extractor: true,
            alpha_head: true,
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_head_hidden() -> Vec<usize> {
    Vec::new()
}
fn default_power_iterations() -> usize {
    1
}
fn default_clamp() -> f64 {
    30.0
}
fn default_tau_floor() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub spectral_norm_layers: SpectralNormLayers,
    #[serde(default = "default_power_iterations")]
    pub power_iterations: usize,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_clamp")]
    pub alpha_logit_clamp: f64,
    #[serde(default = "default_tau_floor")]
    pub tau_floor: f64,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: default_hidden(),
            num_classes,
            head_hidden_dims: default_head_hidden(),
            activation: Activation::Relu,
            spectral_norm_layers: SpectralNormLayers::default(),
            power_iterations: default_power_iterations(),
            ablation: Ablation::None,
            alpha_logit_clamp: default_clamp(),
            tau_floor: default_tau_floor(),
        }
    }

    pub fn with_hidden(mut self, hidden: &[usize], head_hidden: &[usize]) -> Self {
        self.hidden_dims = hidden.to_vec();
        self.head_hidden_dims = head_hidden.to_vec();
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_dims.iter().chain(&self.head_hidden_dims).any(|d| *d == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.power_iterations == 0 {
            return Err(Error::Config("power_iterations must be at least 1".into()));
        }
        if !(self.alpha_logit_clamp.is_finite() && self.alpha_logit_clamp > 0.0) {
            return Err(Error::Config("alpha_logit_clamp must be positive".into()));
        }
        if !(self.tau_floor.is_finite() && self.tau_floor > 0.0) {
            return Err(Error::Config("tau_floor must be positive".into()));
        }
        Ok(())
    }

    /// Width of the feature vector shared by the heads.
    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().unwrap_or(&self.input_dim)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    /// `W^T y`
    pub fn mul_t_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            if *yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }
}

/// Warm-started left/right singular vector estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerVectors {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// Present only on spectrally normalized layers.
    pub power: Option<PowerVectors>,
}

impl Dense {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.mul_vec(x);
        for (o, b) in y.iter_mut().zip(&self.bias) {
            *o += b;
        }
        y
    }

    fn zeros(out: usize, inp: usize, normalized: bool) -> Self {
        let power = normalized.then(|| PowerVectors {
            u: vec![1.0 / (out as f64).sqrt(); out],
            v: vec![1.0 / (inp as f64).sqrt(); inp],
        });
        Self {
            weight: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
            power,
        }
    }

    fn random<R: Rng + ?Sized>(out: usize, inp: usize, normalized: bool, rng: &mut R) -> Self {
        let scale = (2.0 / inp as f64).sqrt();
        let mut layer = Self::zeros(out, inp, normalized);
        for w in layer.weight.data.iter_mut() {
            *w = scale * rng.sample::<f64, _>(StandardNormal);
        }
        if let Some(pv) = layer.power.as_mut() {
            pv.u = random_unit(out, rng);
            pv.v = random_unit(inp, rng);
        }
        layer
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

fn random_unit<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = l2(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub extractor: Vec<Dense>,
    pub alpha_head: Dense,
    pub p_head: Vec<Dense>,
    pub tau_head: Vec<Dense>,
}

fn layer_dims(input: usize, hidden: &[usize], output: Option<usize>) -> Vec<(usize, usize)> {
    let mut dims = Vec::new();
    let mut prev = input;
    for h in hidden.iter().copied().chain(output) {
        dims.push((h, prev));
        prev = h;
    }
    dims
}

impl NetworkParams {
    /// All weights and biases zero.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, |out, inp, norm| Dense::zeros(out, inp, norm)))
    }

    /// He-style Gaussian weights, zero biases, random unit power vectors, then
    /// one spectral normalization pass.
    pub fn init<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Self::build(config, |out, inp, norm| Dense::random(out, inp, norm, rng));
        spectral_normalize(&mut params, config);
        Ok(params)
    }

    fn build(config: &NetworkConfig, mut make: impl FnMut(usize, usize, bool) -> Dense) -> Self {
        let h = config.feature_dim();
        let k = config.num_classes;
        let sn = config.spectral_norm_layers;
        let extractor = layer_dims(config.input_dim, &config.hidden_dims, None)
            .into_iter()
            .map(|(o, i)| make(o, i, sn.feature_extractor))
            .collect();
        let alpha_head = make(k, h, sn.alpha_head);
        let p_head = layer_dims(h, &config.head_hidden_dims, Some(k))
            .into_iter()
            .map(|(o, i)| make(o, i, false))
            .collect();
        let tau_head = layer_dims(h, &config.head_hidden_dims, Some(1))
            .into_iter()
            .map(|(o, i)| make(o, i, false))
            .collect();
        Self {
            extractor,
            alpha_head,
            p_head,
            tau_head,
        }
    }

    /// Layers in canonical order: extractor, alpha head, p head, tau head.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.alpha_head))
            .chain(&self.p_head)
            .chain(&self.tau_head)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.alpha_head))
            .chain(self.p_head.iter_mut())
            .chain(self.tau_head.iter_mut())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers().map(Dense::num_parameters).sum()
    }

    /// Trainable values in canonical order, each layer as weight then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for layer in self.layers() {
            out.extend_from_slice(&layer.weight.data);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} values, network has {}",
                values.len(),
                self.num_parameters()
            )));
        }
        let mut at = 0;
        for layer in self.layers_mut() {
            let n = layer.weight.data.len();
            layer.weight.data.copy_from_slice(&values[at..at + n]);
            at += n;
            let n = layer.bias.len();
            layer.bias.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = std::hash::DefaultHasher::new();
        for layer in self.layers() {
            for v in layer.weight.data.iter().chain(&layer.bias) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Checks that the layer shapes agree with `config`.
    pub fn check_shapes(&self, config: &NetworkConfig) -> Result<()> {
        let expected = Self::zeros(config)?;
        let same = self.extractor.len() == expected.extractor.len()
            && self.p_head.len() == expected.p_head.len()
            && self.tau_head.len() == expected.tau_head.len()
            && self.layers().zip(expected.layers()).all(|(a, b)| {
                a.weight.rows == b.weight.rows
                    && a.weight.cols == b.weight.cols
                    && a.weight.data.len() == b.weight.data.len()
                    && a.bias.len() == b.bias.len()
                    && a.power.as_ref().map(|p| (p.u.len(), p.v.len()))
                        == b.power.as_ref().map(|p| (p.u.len(), p.v.len()))
            });
        if same {
            Ok(())
        } else {
            Err(Error::Config("network parameters do not match the configuration".into()))
        }
    }
}

/// Per-layer gradients in the canonical layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradients {
    pub layers: Vec<LayerGrad>,
}

impl NetworkGradients {
    fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.weight.rows, l.weight.cols),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(&g.weight.data);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MlpTrace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn mlp_forward(layers: &[Dense], x: &[f64], relu_last: bool) -> MlpTrace {
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let input = if i == 0 { x } else { &post[i - 1] };
        let z = layer.affine(input);
        let a = if relu_last || i + 1 < layers.len() {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(a);
    }
    MlpTrace { pre, post }
}

/// Accumulates parameter gradients into `grads` and returns the gradient with
/// respect to the MLP input.
fn mlp_backward(
    layers: &[Dense],
    x: &[f64],
    trace: &MlpTrace,
    grad_out: &[f64],
    relu_last: bool,
    grads: &mut [LayerGrad],
) -> Vec<f64> {
    let mut g = grad_out.to_vec();
    for i in (0..layers.len()).rev() {
        if relu_last || i + 1 < layers.len() {
            for (gv, z) in g.iter_mut().zip(&trace.pre[i]) {
                if *z <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let input = if i == 0 { x } else { &trace.post[i - 1] };
        let lg = &mut grads[i];
        for (r, gr) in g.iter().enumerate() {
            if *gr == 0.0 {
                continue;
            }
            lg.bias[r] += gr;
            let row = &mut lg.weight.data[r * input.len()..(r + 1) * input.len()];
            for (w, xv) in row.iter_mut().zip(input) {
                *w += gr * xv;
            }
        }
        g = layers[i].weight.mul_t_vec(&g);
    }
    g
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleTrace {
    input: Vec<f64>,
    extractor: MlpTrace,
    alpha_logits: Vec<f64>,
    p_head: MlpTrace,
    tau_head: MlpTrace,
    output: FdParams,
}

impl ExampleTrace {
    fn features(&self) -> &[f64] {
        self.extractor.post.last().map_or(&self.input, |v| v)
    }

    pub fn output(&self) -> &FdParams {
        &self.output
    }

    /// ReLU activity pattern and clamp status; differentiability changes when
    /// this changes.
    fn kink_signature(&self, clamp: f64) -> Vec<bool> {
        let relu = |t: &MlpTrace, skip_last: bool| {
            let n = t.pre.len() - usize::from(skip_last);
            t.pre[..n].iter().flatten().map(|z| *z > 0.0).collect::<Vec<_>>()
        };
        let mut sig = relu(&self.extractor, false);
        sig.extend(relu(&self.p_head, true));
        sig.extend(relu(&self.tau_head, true));
        sig.extend(self.alpha_logits.iter().map(|z| z.abs() < clamp));
        sig
    }
}

/// Cached intermediate values of one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    params_fingerprint: u64,
    ablation: Ablation,
    examples: Vec<ExampleTrace>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn outputs(&self) -> Vec<FdParams> {
        self.examples.iter().map(|e| e.output.clone()).collect()
    }
}

fn forward_one(params: &NetworkParams, config: &NetworkConfig, x: &[f64]) -> Result<ExampleTrace> {
    if x.len() != config.input_dim {
        return Err(Error::Config(format!(
            "input has dimension {}, network expects {}",
            x.len(),
            config.input_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("input contains a non-finite value".into()));
    }
    let extractor = mlp_forward(&params.extractor, x, true);
    let h = extractor.post.last().map_or(x, |v| v);
    let alpha_logits = params.alpha_head.affine(h);
    let p_head = mlp_forward(&params.p_head, h, false);
    let tau_head = mlp_forward(&params.tau_head, h, false);

    let c = config.alpha_logit_clamp;
    let alpha: Vec<f64> = alpha_logits.iter().map(|z| z.clamp(-c, c).exp()).collect();
    let k = config.num_classes;
    let p = match config.ablation {
        Ablation::FixPUniform => vec![1.0 / k as f64; k],
        Ablation::FixPNormalized => {
            let a0: f64 = alpha.iter().sum();
            alpha.iter().map(|a| a / a0).collect()
        }
        _ => softmax(p_head.post.last().expect("p head has an output layer")),
    };
    let tau = match config.ablation {
        Ablation::FixTau => 1.0,
        _ => softplus(tau_head.post.last().expect("tau head has an output layer")[0]) + config.tau_floor,
    };
    let output = FdParams::new(alpha, p, tau)?;
    Ok(ExampleTrace {
        input: x.to_vec(),
        extractor,
        alpha_logits,
        p_head,
        tau_head,
        output,
    })
}

/// Runs the network on a batch and returns the FD parameters with the trace
/// needed by [`backward`].
pub fn forward(
    params: &NetworkParams,
    config: &NetworkConfig,
    inputs: &[Vec<f64>],
) -> Result<(Vec<FdParams>, ForwardTrace)> {
    let examples = inputs
        .iter()
        .map(|x| forward_one(params, config, x))
        .collect::<Result<Vec<_>>>()?;
    let trace = ForwardTrace {
        params_fingerprint: params.fingerprint(),
        ablation: config.ablation,
        examples,
    };
    Ok((trace.outputs(), trace))
}

/// Forward pass without keeping the trace.
pub fn predict_params(params: &NetworkParams, config: &NetworkConfig, inputs: &[Vec<f64>]) -> Result<Vec<FdParams>> {
    inputs.iter().map(|x| Ok(forward_one(params, config, x)?.output)).collect()
}

/// Backpropagates per-example gradients with respect to `(alpha, p, tau)`.
pub fn backward(
    params: &NetworkParams,
    config: &NetworkConfig,
    trace: &ForwardTrace,
    upstream: &[FdGradient],
) -> Result<NetworkGradients> {
    if trace.params_fingerprint != params.fingerprint() || trace.ablation != config.ablation {
        return Err(Error::Contract("trace was not produced by these parameters".into()));
    }
    if upstream.len() != trace.examples.len() {
        return Err(Error::Contract(format!(
            "{} upstream gradients for a trace of {} examples",
            upstream.len(),
            trace.examples.len()
        )));
    }
    let k = config.num_classes;
    if upstream.iter().any(|g| g.alpha.len() != k || g.p.len() != k) {
        return Err(Error::Contract(format!("upstream gradients must have {k} classes")));
    }
    let mut grads = NetworkGradients::zeros_like(params);
    let n_ext = params.extractor.len();
    let n_p = params.p_head.len();
    let c = config.alpha_logit_clamp;
    for (ex, up) in trace.examples.iter().zip(upstream) {
        let out = &ex.output;
        let (alpha, p) = (out.alpha(), out.p());
        let mut g_alpha = up.alpha.clone();
        let mut g_p_logit = vec![0.0; k];
        match config.ablation {
            Ablation::FixPUniform => {}
            Ablation::FixPNormalized => {
                let a0 = out.alpha0();
                let dot: f64 = up.p.iter().zip(p).map(|(g, v)| g * v).sum();
                for (ga, gp) in g_alpha.iter_mut().zip(&up.p) {
                    *ga += (gp - dot) / a0;
                }
            }
            _ => {
                let dot: f64 = up.p.iter().zip(p).map(|(g, v)| g * v).sum();
                for j in 0..k {
                    g_p_logit[j] = p[j] * (up.p[j] - dot);
                }
            }
        }
        let g_tau_logit = match config.ablation {
            Ablation::FixTau => 0.0,
            _ => up.tau * sigmoid(ex.tau_head.post.last().expect("tau output")[0]),
        };
        let g_alpha_logit: Vec<f64> = (0..k)
            .map(|j| {
                if ex.alpha_logits[j].abs() < c {
                    g_alpha[j] * alpha[j]
                } else {
                    0.0
                }
            })
            .collect();

        let h = ex.features();
        let (ext_grads, rest) = grads.layers.split_at_mut(n_ext);
        let (alpha_grad, rest) = rest.split_first_mut().expect("alpha head");
        let (p_grads, tau_grads) = rest.split_at_mut(n_p);

        for (r, gr) in g_alpha_logit.iter().enumerate() {
            alpha_grad.bias[r] += gr;
            let row = &mut alpha_grad.weight.data[r * h.len()..(r + 1) * h.len()];
            for (w, hv) in row.iter_mut().zip(h) {
                *w += gr * hv;
            }
        }
        let mut g_h = params.alpha_head.weight.mul_t_vec(&g_alpha_logit);
        let from_p = mlp_backward(&params.p_head, h, &ex.p_head, &g_p_logit, false, p_grads);
        let from_tau = mlp_backward(&params.tau_head, h, &ex.tau_head, &[g_tau_logit], false, tau_grads);
        for ((g, a), b) in g_h.iter_mut().zip(&from_p).zip(&from_tau) {
            *g += a + b;
        }
        mlp_backward(&params.extractor, &ex.input, &ex.extractor, &g_h, true, ext_grads);
    }
    Ok(grads)
}

/// Mean loss over a batch and its gradient with respect to every parameter.
pub fn batch_loss_gradient(
    params: &NetworkParams,
    config: &NetworkConfig,
    inputs: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, NetworkGradients)> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::Contract("batch inputs and labels must be non-empty and aligned".into()));
    }
    if let Some(l) = labels.iter().find(|l| **l >= config.num_classes) {
        return Err(Error::Contract(format!("label {l} out of range")));
    }
    let (outputs, trace) = forward(params, config, inputs)?;
    let scale = 1.0 / inputs.len() as f64;
    let mut total = 0.0;
    let mut upstream = Vec::with_capacity(outputs.len());
    for (fd, label) in outputs.iter().zip(labels) {
        let (l, mut g) = loss_and_gradient(fd, *label);
        total += l.total;
        g.scale(scale);
        upstream.push(g);
    }
    let grads = backward(params, config, &trace, &upstream)?;
    Ok((total * scale, grads))
}

/// Mean loss over a batch.
pub fn batch_loss(params: &NetworkParams, config: &NetworkConfig, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let outputs = predict_params(params, config, inputs)?;
    let total: f64 = outputs
        .iter()
        .zip(labels)
        .map(|(fd, l)| crate::objective::loss_for_label(fd, *l).total)
        .sum();
    Ok(total / inputs.len() as f64)
}

fn normalize_layer(layer: &mut Dense, min_iterations: usize) -> Option<f64> {
    let pv = layer.power.as_mut()?;
    let w = &mut layer.weight;
    let mut sigma = 0.0;
    let mut prev = f64::NAN;
    for it in 0..POWER_ITERATION_CAP {
        let mut u = w.mul_vec(&pv.v);
        let nu = l2(&u);
        if nu == 0.0 {
            return None;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        let mut v = w.mul_t_vec(&u);
        sigma = l2(&v);
        if sigma == 0.0 {
            return None;
        }
        v.iter_mut().for_each(|x| *x /= sigma);
        pv.u = u;
        pv.v = v;
        if it + 1 >= min_iterations && (sigma - prev).abs() <= POWER_ITERATION_TOL * sigma {
            break;
        }
        prev = sigma;
    }
    w.data.iter_mut().for_each(|x| *x /= sigma);
    Some(sigma)
}

/// Divides every designated weight matrix by its power-iteration estimate of
/// the largest singular value. Returns the estimates found, in layer order;
/// all-zero matrices are left alone and skipped.
pub fn spectral_normalize(params: &mut NetworkParams, config: &NetworkConfig) -> Vec<f64> {
    params
        .layers_mut()
        .filter_map(|layer| normalize_layer(layer, config.power_iterations))
        .collect()
}

/// Current largest-singular-value estimates `u^T W v` of the normalized
/// layers, from the stored power vectors, without modifying anything.
pub fn spectral_estimates(params: &NetworkParams) -> Vec<f64> {
    params
        .layers()
        .filter_map(|layer| {
            let pv = layer.power.as_ref()?;
            let wv = layer.weight.mul_vec(&pv.v);
            Some(wv.iter().zip(&pv.u).map(|(a, b)| a * b).sum())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation crossed a ReLU kink or the logit clamp.
    pub skipped: usize,
}

/// Compares the analytic loss gradient with central differences over every
/// parameter.
pub fn gradient_check(
    params: &NetworkParams,
    config: &NetworkConfig,
    input: &[f64],
    label: usize,
    eps: f64,
) -> Result<GradientCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let inputs = vec![input.to_vec()];
    let (_, grads) = batch_loss_gradient(params, config, &inputs, &[label])?;
    let analytic = grads.flatten();
    let base = params.flatten();
    let c = config.alpha_logit_clamp;
    let base_sig = forward_one(params, config, input)?.kink_signature(c);
    let mut probe = params.clone();
    let mut eval = |values: &[f64]| -> Result<(f64, Vec<bool>)> {
        probe.assign_flat(values)?;
        let ex = forward_one(&probe, config, input)?;
        let l = crate::objective::loss_for_label(&ex.output, label).total;
        Ok((l, ex.kink_signature(c)))
    };
    let mut report = GradientCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut values = base.clone();
    for i in 0..base.len() {
        values[i] = base[i] + eps;
        let (up, sig_up) = eval(&values)?;
        values[i] = base[i] - eps;
        let (dn, sig_dn) = eval(&values)?;
        values[i] = base[i];
        if sig_up != base_sig || sig_dn != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - dn) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(d: usize, hidden: &[usize], k: usize) -> NetworkConfig {
        NetworkConfig::new(d, k).with_hidden(hidden, &[8])
    }

    #[test]
    fn zero_network_outputs() {
        let cfg = small(3, &[5], 4);
        let params = NetworkParams::zeros(&cfg).unwrap();
        let (out, _) = forward(&params, &cfg, &[vec![0.3, -1.0, 2.0]]).unwrap();
        assert!(out[0].alpha().iter().all(|a| *a == 1.0));
        assert!(out[0].p().iter().all(|p| (p - 0.25).abs() < 1e-15));
        assert!((out[0].tau() - (2f64.ln() + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn ablations_override_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![vec![0.5, -0.2]];
        for ablation in Ablation::ALL {
            let cfg = small(2, &[6], 3).with_ablation(ablation);
            let params = NetworkParams::init(&cfg, &mut rng).unwrap();
            let (out, _) = forward(&params, &cfg, &x).unwrap();
            let fd = &out[0];
            match ablation {
                Ablation::FixTau => assert_eq!(fd.tau(), 1.0),
                Ablation::FixPUniform => assert!(fd.p().iter().all(|p| *p == 1.0 / 3.0)),
                Ablation::FixPNormalized => {
                    for (p, a) in fd.p().iter().zip(fd.alpha()) {
                        assert!((p - a / fd.alpha0()).abs() < 1e-15);
                    }
                }
                Ablation::None => {}
            }
        }
        assert_eq!("fix_tau".parse::<Ablation>().unwrap(), Ablation::FixTau);
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn alpha_logit_clamp_bounds_alpha() {
        let cfg = small(1, &[2], 2);
        let mut params = NetworkParams::zeros(&cfg).unwrap();
        params.alpha_head.bias = vec![500.0, -500.0];
        let (out, _) = forward(&params, &cfg, &[vec![1.0]]).unwrap();
        assert_eq!(out[0].alpha()[0], 30f64.exp());
        assert_eq!(out[0].alpha()[1], (-30f64).exp());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let cfg = small(3, &[4], 2);
        let params = NetworkParams::zeros(&cfg).unwrap();
        assert!(matches!(forward(&params, &cfg, &[vec![1.0, 2.0]]), Err(Error::Config(_))));
    }

    #[test]
    fn backward_is_linear_and_checks_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small(2, &[6], 3);
        let params = NetworkParams::init(&cfg, &mut rng).unwrap();
        let inputs = vec![vec![0.1, 0.9], vec![-1.0, 0.4]];
        let (out, trace) = forward(&params, &cfg, &inputs).unwrap();
        let zero = vec![FdGradient::zeros(3); 2];
        let g0 = backward(&params, &cfg, &trace, &zero).unwrap();
        assert!(g0.flatten().iter().all(|v| *v == 0.0));

        let up: Vec<FdGradient> = out.iter().map(|fd| loss_and_gradient(fd, 1).1).collect();
        let mut doubled = up.clone();
        doubled.iter_mut().for_each(|g| g.scale(2.0));
        let g1 = backward(&params, &cfg, &trace, &up).unwrap().flatten();
        let g2 = backward(&params, &cfg, &trace, &doubled).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1e-300));
        }

        let mut other = params.clone();
        other.alpha_head.bias[0] += 1.0;
        assert!(matches!(backward(&other, &cfg, &trace, &up), Err(Error::Contract(_))));
        assert!(matches!(backward(&params, &cfg, &trace, &up[..1]), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_deterministic_and_trace_replays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small(4, &[8, 8], 5);
        let params = NetworkParams::init(&cfg, &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3, -0.2, 1.0, 0.5]).collect();
        let (a, trace_a) = forward(&params, &cfg, &inputs).unwrap();
        let (b, trace_b) = forward(&params, &cfg, &inputs).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace_a, trace_b);
        assert_eq!(trace_a.outputs(), a);
        for fd in &a {
            assert!((fd.p().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(fd.tau() >= cfg.tau_floor);
        }
    }

    #[test]
    fn gradient_check_small_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for ablation in Ablation::ALL {
            let cfg = small(2, &[4], 2).with_ablation(ablation);
            let params = NetworkParams::init(&cfg, &mut rng).unwrap();
            let r = gradient_check(&params, &cfg, &[0.7, -0.3], 1, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{ablation:?}: {r:?}");
            assert!(r.checked > 0);
        }
        let cfg = small(2, &[4], 2);
        let zero = NetworkParams::zeros(&cfg).unwrap();
        let r = gradient_check(&zero, &cfg, &[0.7, -0.3], 0, 1e-5).unwrap();
        assert!(r.max_rel_error.is_finite() && r.max_rel_error < 1e-4);
        assert!(gradient_check(&zero, &cfg, &[0.7, -0.3], 0, 1e-2).is_err());
    }

    #[test]
    fn flat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small(3, &[4, 5], 3);
        let params = NetworkParams::init(&cfg, &mut rng).unwrap();
        let mut copy = NetworkParams::zeros(&cfg).unwrap();
        copy.assign_flat(&params.flatten()).unwrap();
        assert_eq!(copy.flatten(), params.flatten());
        assert!(copy.assign_flat(&[1.0]).is_err());
        params.check_shapes(&cfg).unwrap();
        assert!(params.check_shapes(&small(3, &[4], 3)).is_err());
    }

    #[test]
    fn spectral_examples() {
        let mut layer = Dense {
            weight: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            bias: vec![3.0, 4.0],
            power: Some(PowerVectors {
                u: vec![0.6, 0.8],
                v: vec![0.8, 0.6],
            }),
        };
        normalize_layer(&mut layer, 1);
        assert!((layer.weight.get(0, 0) - 1.0).abs() < 1e-12 && layer.weight.get(0, 1).abs() < 1e-12);
        assert_eq!(layer.bias, vec![3.0, 4.0]);

        let mut layer = Dense {
            weight: Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]).unwrap(),
            bias: vec![0.0, 0.0],
            power: Some(PowerVectors {
                u: vec![0.6, 0.8],
                v: vec![0.8, 0.6],
            }),
        };
        let sigma = normalize_layer(&mut layer, 1).unwrap();
        assert!((sigma - 2.0).abs() < 1e-8);
        assert!((layer.weight.get(0, 0) - 1.0).abs() < 1e-8);
        assert!((layer.weight.get(1, 1) - 0.25).abs() < 1e-8);
    }
}
