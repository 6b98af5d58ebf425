//! Toy split pipeline `encoder → quantizer → decoder` trained end to end with
//! plain SGD and a straight-through estimator across the rounding step.
//!
//! Forward, the decoder sees the reconstruction `C`. Backward, the rounding is
//! treated as the identity, so `∂L/∂e = ∂L/∂C`, plus `α · ∂L_comm/∂e` with the
//! lattice `z` held constant. The scaling step's affine coefficients (clip
//! bounds, min and max) are constants of each forward pass; elements outside
//! the clip bounds get zero gradient.

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::quantizer::{self, LinearScale, QuantizeError, QuantizerConfig, Scaling};
use crate::tensor::{FeatureTensor, TensorError};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed parameter file: {0}")]
    Params(String),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    /// Tanh approximation of GELU.
    Gelu,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Gelu => 1,
            Activation::Relu => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Gelu),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Fully connected layer `y = act(W x + b)` with `W` stored row-major
/// (`out × in`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self, TrainError> {
        if in_dim == 0 || out_dim == 0 || weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(TrainError::Shape(format!(
                "layer {in_dim}->{out_dim} with {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|p| !p.is_finite()) {
            return Err(TrainError::Params("non-finite parameter".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            weights,
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let nw = self.weights.len();
        if idx < nw {
            &mut self.weights[idx]
        } else {
            &mut self.bias[idx - nw]
        }
    }

    /// Pre-activations and outputs for a `rows × in_dim` batch.
    fn forward_rows(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rows = input.len() / self.in_dim;
        let mut pre = Vec::with_capacity(rows * self.out_dim);
        for row in input.chunks_exact(self.in_dim) {
            for (o, w) in self.weights.chunks_exact(self.in_dim).enumerate() {
                let dot: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
                pre.push(dot + self.bias[o]);
            }
        }
        let out = pre.iter().map(|&p| self.activation.apply(p)).collect();
        (pre, out)
    }
}

fn check_chain(layers: &[DenseLayer], in_dim: usize) -> Result<usize, TrainError> {
    layers.iter().try_fold(in_dim, |dim, l| {
        if l.in_dim == dim {
            Ok(l.out_dim)
        } else {
            Err(TrainError::Shape(format!(
                "layer expects {} inputs, previous stage gives {dim}",
                l.in_dim
            )))
        }
    })
}

/// Runs `layers` over the last axis of `x`.
pub fn forward_layers(layers: &[DenseLayer], x: &FeatureTensor) -> Result<FeatureTensor, TrainError> {
    let out_dim = check_chain(layers, x.last_dim())?;
    let mut cur = x.data().to_vec();
    for l in layers {
        cur = l.forward_rows(&cur).1;
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = out_dim;
    Ok(FeatureTensor::new(shape, cur)?)
}

/// Single-process split forward: encode, quantize, reconstruct from the
/// indices alone, decode. Returns the decoder output and the unweighted
/// commitment loss.
pub fn forward_split(
    x: &FeatureTensor,
    enc: &[DenseLayer],
    dec: &[DenseLayer],
    cfg: &QuantizerConfig,
) -> Result<(FeatureTensor, f64), TrainError> {
    let h = forward_layers(enc, x)?;
    check_chain(dec, h.last_dim())?;
    let q = quantizer::quantize(&h, cfg)?;
    let c = quantizer::reconstruct(&q.block)?;
    Ok((forward_layers(dec, &c)?, q.commit_loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaskLoss {
    /// Mean squared error against the target (autoencoder).
    #[default]
    Mse,
    /// Softmax cross-entropy against one-hot targets, averaged over rows.
    CrossEntropy,
}

fn task_loss_and_grad(pred: &[f64], target: &[f64], width: usize, task: TaskLoss) -> (f64, Vec<f64>) {
    match task {
        TaskLoss::Mse => {
            let n = pred.len() as f64;
            let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
            let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
            (loss, grad)
        }
        TaskLoss::CrossEntropy => {
            let rows = pred.len() / width;
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(pred.len());
            for (logits, onehot) in pred.chunks_exact(width).zip(target.chunks_exact(width)) {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                let log_z = m + z.ln();
                for (l, t) in logits.iter().zip(onehot) {
                    loss -= t * (l - log_z);
                    grad.push(((l - log_z).exp() - t) / rows as f64);
                }
            }
            (loss / rows as f64, grad)
        }
    }
}

/// `task + alpha · commit`.
pub fn total_loss(
    pred: &FeatureTensor,
    target: &FeatureTensor,
    commit: f64,
    alpha: f64,
    task: TaskLoss,
) -> Result<f64, TrainError> {
    if pred.shape() != target.shape() {
        return Err(TrainError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (loss, _) = task_loss_and_grad(pred.data(), target.data(), pred.last_dim(), task);
    Ok(loss + alpha * commit)
}

/// What sits between encoder and decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bottleneck {
    /// No scaling, no rounding.
    Passthrough,
    /// Scale and round; straight-through backward.
    Quantized(QuantizerConfig),
    /// Scale, then pass `e` on unrounded. Commitment loss is still computed
    /// against the rounded lattice.
    Surrogate(QuantizerConfig),
}

impl Bottleneck {
    fn quantizer(&self) -> Option<&QuantizerConfig> {
        match self {
            Bottleneck::Passthrough => None,
            Bottleneck::Quantized(q) | Bottleneck::Surrogate(q) => Some(q),
        }
    }
}

/// Forward-pass constants that grad checking pins to their base values.
#[derive(Debug, Clone, Default)]
struct Frozen {
    scale: Option<LinearScale>,
    lattice: Option<Vec<f64>>,
}

struct LayerCache {
    input: Vec<f64>,
    pre: Vec<f64>,
}

struct Pass {
    enc: Vec<LayerCache>,
    dec: Vec<LayerCache>,
    /// `∂e/∂h` per element (empty for passthrough).
    scale_grad: Vec<f64>,
    e: Vec<f64>,
    z: Vec<f64>,
    out: Vec<f64>,
    commit: f64,
    scale: Option<LinearScale>,
}

fn run_layers(layers: &[DenseLayer], input: Vec<f64>, caches: &mut Vec<LayerCache>) -> Vec<f64> {
    let mut cur = input;
    for l in layers {
        let (pre, out) = l.forward_rows(&cur);
        caches.push(LayerCache { input: cur, pre });
        cur = out;
    }
    cur
}

fn forward_pass(model: &SplitModel, x: &[f64], bottleneck: &Bottleneck, frozen: &Frozen) -> Result<Pass, TrainError> {
    let mut enc = Vec::with_capacity(model.encoder.len());
    let h = run_layers(&model.encoder, x.to_vec(), &mut enc);

    let (c, e, z, scale_grad, commit, scale) = match bottleneck.quantizer() {
        None => (h, Vec::new(), Vec::new(), Vec::new(), 0.0, None),
        Some(q) => {
            let (e, scale_grad, scale) = match q.scaling {
                Scaling::Tanh => {
                    let e: Vec<f64> = h.iter().map(|v| v.tanh()).collect();
                    let g = e.iter().map(|v| 1.0 - v * v).collect();
                    (e, g, None)
                }
                Scaling::ClippedLinear => {
                    let sc = match frozen.scale {
                        Some(sc) => sc,
                        None => LinearScale::fit(&h)?,
                    };
                    let e = h.iter().map(|&v| sc.apply(v)).collect();
                    let g = h.iter().map(|&v| if sc.clips(v) { 0.0 } else { sc.slope() }).collect();
                    (e, g, Some(sc))
                }
            };
            let s = q.half_span();
            let z: Vec<f64> = match &frozen.lattice {
                Some(z) => z.clone(),
                None => e.iter().map(|&v| quantizer::round_level(v, q.levels())).collect(),
            };
            let commit = quantizer::commitment_loss(&e, &z, s, q.commitment);
            let c = match bottleneck {
                Bottleneck::Quantized(_) => z.iter().map(|v| v / s).collect(),
                _ => e.clone(),
            };
            (c, e, z, scale_grad, commit, scale)
        }
    };

    let mut dec = Vec::with_capacity(model.decoder.len());
    let out = run_layers(&model.decoder, c, &mut dec);
    Ok(Pass {
        enc,
        dec,
        scale_grad,
        e,
        z,
        out,
        commit,
        scale,
    })
}

/// Gradients laid out like [`SplitModel::parameters`].
fn backward_layers(
    layers: &[DenseLayer],
    caches: &[LayerCache],
    mut grad: Vec<f64>,
    grads: &mut [Vec<f64>],
) -> Vec<f64> {
    for (li, (l, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let rows = cache.input.len() / l.in_dim;
        let dpre: Vec<f64> = grad
            .iter()
            .zip(&cache.pre)
            .map(|(g, &p)| g * l.activation.derivative(p))
            .collect();
        let g = &mut grads[li];
        let nw = l.weights.len();
        let mut dinput = vec![0.0; rows * l.in_dim];
        for r in 0..rows {
            let input = &cache.input[r * l.in_dim..(r + 1) * l.in_dim];
            let dout = &dpre[r * l.out_dim..(r + 1) * l.out_dim];
            let din = &mut dinput[r * l.in_dim..(r + 1) * l.in_dim];
            for (o, &d) in dout.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let w = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                let gw = &mut g[o * l.in_dim..(o + 1) * l.in_dim];
                for i in 0..l.in_dim {
                    gw[i] += d * input[i];
                    din[i] += d * w[i];
                }
                g[nw + o] += d;
            }
        }
        grad = dinput;
    }
    grad
}

/// Encoder and decoder halves of the split model.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub encoder: Vec<DenseLayer>,
    pub decoder: Vec<DenseLayer>,
}

impl SplitModel {
    pub fn new(encoder: Vec<DenseLayer>, decoder: Vec<DenseLayer>) -> Result<Self, TrainError> {
        let first = encoder
            .first()
            .ok_or_else(|| TrainError::Shape("empty encoder".into()))?;
        let mid = check_chain(&encoder, first.in_dim)?;
        check_chain(&decoder, mid)?;
        Ok(Self { encoder, decoder })
    }

    /// Random layers for the given widths, e.g. `[4, 2]` and `[2, 4]`.
    pub fn random(
        enc_dims: &[usize],
        dec_dims: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if enc_dims.len() < 2 || dec_dims.len() < 2 || enc_dims.last() != dec_dims.first() {
            return Err(TrainError::Shape("encoder output must feed decoder input".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let build = |dims: &[usize], rng: &mut ChaCha8Rng| {
            let n = dims.len() - 1;
            dims.windows(2)
                .enumerate()
                .map(|(i, w)| {
                    let act = if i + 1 == n { Activation::Identity } else { activation };
                    DenseLayer::random(w[0], w[1], act, rng)
                })
                .collect::<Vec<_>>()
        };
        let encoder = build(enc_dims, &mut rng);
        let decoder = build(dec_dims, &mut rng);
        Self::new(encoder, decoder)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.last().map_or(self.bottleneck_dim(), |l| l.out_dim)
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.encoder.last().expect("encoder is non-empty").out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(DenseLayer::parameter_count).sum()
    }

    fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.encoder.iter().chain(&self.decoder)
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.layers().map(|l| vec![0.0; l.parameter_count()]).collect()
    }

    fn param_mut(&mut self, layer: usize, idx: usize) -> &mut f64 {
        let n_enc = self.encoder.len();
        if layer < n_enc {
            self.encoder[layer].param_mut(idx)
        } else {
            self.decoder[layer - n_enc].param_mut(idx)
        }
    }

    fn apply_update(&mut self, grads: &[Vec<f64>], lr: f64) {
        for (l, g) in self.encoder.iter_mut().chain(self.decoder.iter_mut()).zip(grads) {
            let nw = l.weights.len();
            for (p, d) in l.weights.iter_mut().zip(&g[..nw]) {
                *p -= lr * d;
            }
            for (p, d) in l.bias.iter_mut().zip(&g[nw..]) {
                *p -= lr * d;
            }
        }
    }

    /// Writes parameters as concatenated tensor fixtures: a rank-1 tensor of
    /// `[encoder_layers, activation codes...]`, then `weights (out × in)` and
    /// `bias` for every layer in order.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), TrainError> {
        let mut header = vec![self.encoder.len() as f64];
        header.extend(self.layers().map(|l| l.activation.code() as f64));
        FeatureTensor::from_vec(header)?.write_fixture(w)?;
        for l in self.layers() {
            FeatureTensor::new(vec![l.out_dim, l.in_dim], l.weights.clone())?.write_fixture(w)?;
            FeatureTensor::new(vec![l.out_dim], l.bias.clone())?.write_fixture(w)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Params(m.to_string());
        let header = FeatureTensor::read_fixture(r)?.ok_or_else(|| bad("missing header"))?;
        let (&n_enc, acts) = header.data().split_first().ok_or_else(|| bad("empty header"))?;
        let n_enc = n_enc as usize;
        if n_enc == 0 || n_enc > acts.len() {
            return Err(bad("encoder layer count out of range"));
        }
        let mut layers = Vec::with_capacity(acts.len());
        for &code in acts {
            let act = Activation::from_code(code as u8)
                .filter(|_| code.fract() == 0.0)
                .ok_or_else(|| bad("unknown activation code"))?;
            let w = FeatureTensor::read_fixture(r)?.ok_or_else(|| bad("missing weights"))?;
            let b = FeatureTensor::read_fixture(r)?.ok_or_else(|| bad("missing bias"))?;
            if w.shape().len() != 2 || b.shape() != [w.shape()[0]] {
                return Err(bad("weight/bias shapes disagree"));
            }
            let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
            layers.push(DenseLayer::new(in_dim, out_dim, w.into_data(), b.into_data(), act)?);
        }
        if FeatureTensor::read_fixture(r)?.is_some() {
            return Err(bad("trailing data"));
        }
        let decoder = layers.split_off(n_enc);
        Self::new(layers, decoder)
    }
}

/// Inputs and targets, one example per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: FeatureTensor,
    pub targets: FeatureTensor,
}

impl Dataset {
    pub fn new(inputs: FeatureTensor, targets: FeatureTensor) -> Result<Self, TrainError> {
        if inputs.shape().len() != 2 || targets.shape().len() != 2 || inputs.shape()[0] != targets.shape()[0] {
            return Err(TrainError::Shape(format!(
                "inputs {:?} and targets {:?} must be rows × features with matching rows",
                inputs.shape(),
                targets.shape()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn autoencoder(inputs: FeatureTensor) -> Result<Self, TrainError> {
        Self::new(inputs.clone(), inputs)
    }

    pub fn rows(&self) -> usize {
        self.inputs.shape()[0]
    }

    fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let (di, dt) = (self.inputs.last_dim(), self.targets.last_dim());
        let mut x = Vec::with_capacity(rows.len() * di);
        let mut y = Vec::with_capacity(rows.len() * dt);
        for &r in rows {
            x.extend_from_slice(&self.inputs.data()[r * di..(r + 1) * di]);
            y.extend_from_slice(&self.targets.data()[r * dt..(r + 1) * dt]);
        }
        (x, y)
    }
}

/// Four tight clusters on a 2×2 grid in a 2-D plane plus isotropic noise in
/// two further dimensions, rotated into 4-D by a fixed random orthogonal map.
pub fn gaussian_mixture(rows: usize, seed: u64) -> FeatureTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = random_orthogonal(4, &mut rng);
    let cluster = Normal::new(0.0, 0.1).expect("valid std");
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    let mut data = Vec::with_capacity(rows * 4);
    for _ in 0..rows {
        let c = rng.random_range(0..4usize);
        let latent = [
            if c & 1 == 0 { -1.5 } else { 1.5 } + cluster.sample(&mut rng),
            if c & 2 == 0 { -1.5 } else { 1.5 } + cluster.sample(&mut rng),
            noise.sample(&mut rng),
            noise.sample(&mut rng),
        ];
        for row in rotation.chunks_exact(4) {
            data.push(row.iter().zip(&latent).map(|(a, b)| a * b).sum());
        }
    }
    FeatureTensor::new(vec![rows, 4], data).expect("finite synthetic data")
}

/// Two interleaved half circles with one-hot labels.
pub fn two_moons(rows: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(rows * 2);
    let mut y = Vec::with_capacity(rows * 2);
    for i in 0..rows {
        let label = i % 2;
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (px, py) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        x.extend_from_slice(&[px + noise * nx, py + noise * ny]);
        y.extend_from_slice(if label == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] });
    }
    Dataset::new(
        FeatureTensor::new(vec![rows, 2], x).expect("finite synthetic data"),
        FeatureTensor::new(vec![rows, 2], y).expect("finite labels"),
    )
    .expect("consistent shapes")
}

fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    // Gram-Schmidt on a Gaussian matrix.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Commitment weight in `task + alpha · L_comm`.
    pub alpha: f64,
    pub seed: u64,
    /// `None` trains without a bottleneck quantizer.
    pub quantizer: Option<QuantizerConfig>,
    pub task: TaskLoss,
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch size and epochs must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TrainError::Config(format!("alpha {}", self.alpha)));
        }
        Ok(())
    }

    fn bottleneck(&self) -> Bottleneck {
        self.quantizer.map_or(Bottleneck::Passthrough, Bottleneck::Quantized)
    }
}

/// Dataset-wide losses after one epoch (epoch 0 is before any update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub task: f64,
    pub commit: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SplitModel,
    pub history: Vec<EpochLoss>,
}

impl TrainOutcome {
    pub fn initial(&self) -> &EpochLoss {
        &self.history[0]
    }

    pub fn last(&self) -> &EpochLoss {
        self.history.last().expect("history holds the initial entry")
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "epoch,total,task,commit")?;
        for h in &self.history {
            writeln!(w, "{},{:.9},{:.9},{:.9}", h.epoch, h.total, h.task, h.commit)?;
        }
        Ok(())
    }
}

fn batch_loss(
    model: &SplitModel,
    x: &[f64],
    y: &[f64],
    bottleneck: &Bottleneck,
    cfg: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    let pass = forward_pass(model, x, bottleneck, &Frozen::default())?;
    let (task, _) = task_loss_and_grad(&pass.out, y, model.output_dim(), cfg.task);
    Ok((task, pass.commit))
}

fn evaluate(
    model: &SplitModel,
    data: &Dataset,
    bottleneck: &Bottleneck,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochLoss, TrainError> {
    let order: Vec<usize> = (0..data.rows()).collect();
    let mut task = 0.0;
    let mut commit = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, y) = data.gather(chunk);
        let (t, c) = batch_loss(model, &x, &y, bottleneck, cfg)?;
        let w = chunk.len() as f64 / data.rows() as f64;
        task += w * t;
        commit += w * c;
    }
    let total = task + cfg.alpha * commit;
    if !total.is_finite() {
        return Err(TrainError::Diverged { epoch });
    }
    Ok(EpochLoss {
        epoch,
        total,
        task,
        commit,
    })
}

fn gradients(
    model: &SplitModel,
    x: &[f64],
    y: &[f64],
    bottleneck: &Bottleneck,
    alpha: f64,
    task: TaskLoss,
    frozen: &Frozen,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let pass = forward_pass(model, x, bottleneck, frozen)?;
    let (task_loss, d_out) = task_loss_and_grad(&pass.out, y, model.output_dim(), task);
    let mut grads = model.zero_grads();
    let n_enc = model.encoder.len();
    let (enc_grads, dec_grads) = grads.split_at_mut(n_enc);
    let d_c = backward_layers(&model.decoder, &pass.dec, d_out, dec_grads);
    let d_h = match bottleneck.quantizer() {
        None => d_c,
        Some(q) => {
            // Straight-through: ∂C/∂e = 1.
            let commit = quantizer::commitment_gradient(&pass.e, &pass.z, q.half_span(), q.commitment);
            d_c.iter()
                .zip(&commit)
                .zip(&pass.scale_grad)
                .map(|((dc, dm), ds)| (dc + alpha * dm) * ds)
                .collect()
        }
    };
    backward_layers(&model.encoder, &pass.enc, d_h, enc_grads);
    Ok((task_loss + alpha * pass.commit, grads))
}

/// Minibatch SGD. Deterministic for a given seed.
pub fn train(model: SplitModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.rows() == 0 {
        return Err(TrainError::Config("empty dataset".into()));
    }
    if data.inputs.last_dim() != model.input_dim() || data.targets.last_dim() != model.output_dim() {
        return Err(TrainError::Shape(format!(
            "model maps {} -> {}, data has {} -> {}",
            model.input_dim(),
            model.output_dim(),
            data.inputs.last_dim(),
            data.targets.last_dim()
        )));
    }
    let bottleneck = cfg.bottleneck();
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut history = vec![evaluate(&model, data, &bottleneck, cfg, 0)?];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(chunk);
            let (loss, grads) = gradients(&model, &x, &y, &bottleneck, cfg.alpha, cfg.task, &Frozen::default())?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            model.apply_update(&grads, cfg.learning_rate);
        }
        history.push(evaluate(&model, data, &bottleneck, cfg, epoch)?);
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub parameter_count: usize,
    pub perturbation: f64,
}

/// Denominator floor for relative errors, so parameters whose true gradient
/// is zero compare by absolute difference.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares STE-surrogate analytic gradients with central differences.
///
/// The surrogate replaces rounding with the identity on `e`, which is the
/// function the straight-through backward pass differentiates. The scaling
/// coefficients and the lattice used by the commitment term are frozen at the
/// unperturbed parameters.
pub fn grad_check(
    model: &SplitModel,
    data: &Dataset,
    quantizer: &QuantizerConfig,
    alpha: f64,
    task: TaskLoss,
    perturbation: f64,
) -> Result<GradCheckReport, TrainError> {
    if !(1e-6..=1e-2).contains(&perturbation) {
        return Err(TrainError::Config(format!(
            "perturbation {perturbation} outside [1e-6, 1e-2]"
        )));
    }
    let bottleneck = Bottleneck::Surrogate(*quantizer);
    let x = data.inputs.data();
    let y = data.targets.data();
    let base = forward_pass(model, x, &bottleneck, &Frozen::default())?;
    let frozen = Frozen {
        scale: base.scale,
        lattice: Some(base.z),
    };
    let (_, analytic) = gradients(model, x, y, &bottleneck, alpha, task, &frozen)?;

    let loss_at = |m: &SplitModel| -> Result<f64, TrainError> {
        let p = forward_pass(m, x, &bottleneck, &frozen)?;
        let (t, _) = task_loss_and_grad(&p.out, y, m.output_dim(), task);
        Ok(t + alpha * p.commit)
    };

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (layer, g) in analytic.iter().enumerate() {
        for (idx, &a) in g.iter().enumerate() {
            let orig = *probe.param_mut(layer, idx);
            *probe.param_mut(layer, idx) = orig + perturbation;
            let plus = loss_at(&probe)?;
            *probe.param_mut(layer, idx) = orig - perturbation;
            let minus = loss_at(&probe)?;
            *probe.param_mut(layer, idx) = orig;
            let numeric = (plus - minus) / (2.0 * perturbation);
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        parameter_count: model.parameter_count(),
        perturbation,
    })
}

/// Round half away from zero.
pub fn ste_round_forward(x: f64) -> f64 {
    x.round()
}

/// Straight-through backward: the upstream gradient passes unchanged.
pub fn ste_round_backward(upstream: f64) -> f64 {
    upstream
}
