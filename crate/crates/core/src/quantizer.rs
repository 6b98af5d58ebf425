//! Finite scalar quantization of bounded features.
//!
//! The client side scales an encoder output into `[-1, 1]`, snaps each element
//! to one of `K` symmetric levels and emits integer indices `0..K`. The server
//! side needs only `K` and the indices to rebuild the features:
//!
//! ```text
//! s = (K - 1) / 2
//! z = round(s·e)              K odd
//! z = round(s·e - 0.5) + 0.5  K even
//! I = z + s
//! C = (I - s) / s
//! ```
//!
//! Two scalings are available: the original `tanh` squashing and a clipped
//! linear map (clip to `mean ± 3·std`, then min-max to `[-1, 1]`) that keeps
//! the level histogram from piling up at the saturation points.

use thiserror::Error;

use crate::tensor::{FeatureTensor, TensorError};

/// Commitment weight used when none is given.
pub const DEFAULT_ALPHA: f64 = 0.25;

/// Slack allowed when checking that scaled values lie in `[-1, 1]`.
const RANGE_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizeError {
    #[error("level count {0} is below 2")]
    TooFewLevels(u32),
    #[error("commitment weight must be finite and >= 0, got {0}")]
    InvalidAlpha(f64),
    #[error("scaled value {value} at position {position} is outside [-1, 1]")]
    OutOfRange { position: usize, value: f64 },
    #[error("corrupt block: index {index} at position {position} is not below K={levels}")]
    CorruptBlock { position: usize, index: u32, levels: u32 },
    #[error("block holds {actual} indices but shape {shape:?} needs {expected}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    Tanh,
    #[default]
    ClippedLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CommitmentForm {
    /// `1 - cos(s·e, z)` over the flattened tensor.
    #[default]
    Cosine,
    /// `||s·e - z||² / n`.
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerConfig {
    levels: u32,
    pub scaling: Scaling,
    pub commitment: CommitmentForm,
    alpha: f64,
}

impl QuantizerConfig {
    /// Clipped linear scaling, cosine commitment, `alpha = 0.25`.
    pub fn new(levels: u32) -> Result<Self, QuantizeError> {
        check_levels(levels)?;
        Ok(Self {
            levels,
            scaling: Scaling::default(),
            commitment: CommitmentForm::default(),
            alpha: DEFAULT_ALPHA,
        })
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn with_commitment(mut self, commitment: CommitmentForm) -> Self {
        self.commitment = commitment;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self, QuantizeError> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(QuantizeError::InvalidAlpha(alpha));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `(K - 1) / 2`, the largest level magnitude.
    pub fn half_span(&self) -> f64 {
        half_span(self.levels)
    }
}

fn check_levels(levels: u32) -> Result<(), QuantizeError> {
    if levels < 2 {
        Err(QuantizeError::TooFewLevels(levels))
    } else {
        Ok(())
    }
}

fn half_span(levels: u32) -> f64 {
    (levels as f64 - 1.0) / 2.0
}

/// Indices as they cross the client/server boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedBlock {
    levels: u32,
    shape: Vec<usize>,
    indices: Vec<u32>,
}

impl QuantizedBlock {
    pub fn new(levels: u32, shape: Vec<usize>, indices: Vec<u32>) -> Result<Self, QuantizeError> {
        check_levels(levels)?;
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != indices.len() {
            return Err(QuantizeError::ShapeMismatch {
                shape,
                expected,
                actual: indices.len(),
            });
        }
        if let Some((position, &index)) = indices.iter().enumerate().find(|(_, &i)| i >= levels) {
            return Err(QuantizeError::CorruptBlock {
                position,
                index,
                levels,
            });
        }
        Ok(Self { levels, shape, indices })
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Shannon entropy (bits) of the index histogram: how evenly the `K`
    /// levels are used.
    pub fn index_entropy(&self) -> f64 {
        let mut counts = vec![0usize; self.levels as usize];
        for &i in &self.indices {
            counts[i as usize] += 1;
        }
        let n = self.indices.len() as f64;
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeOutput {
    pub block: QuantizedBlock,
    /// Client-side copy of the server reconstruction `C`.
    pub reconstructed: FeatureTensor,
    /// Unweighted commitment loss.
    pub commit_loss: f64,
    /// Scaled features `e` before rounding.
    pub scaled: FeatureTensor,
}

impl QuantizeOutput {
    /// Rounded lattice values `z = I - (K-1)/2`.
    pub fn lattice(&self) -> Vec<f64> {
        let s = half_span(self.block.levels);
        self.block.indices.iter().map(|&i| i as f64 - s).collect()
    }
}

/// Affine map produced by clipped linear scaling, with its bounds kept so the
/// map can be replayed (frozen) or inverted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearScale {
    /// `mean - 3·std` of the input.
    pub clip_lo: f64,
    /// `mean + 3·std` of the input.
    pub clip_hi: f64,
    /// Smallest clipped value.
    pub min: f64,
    /// Largest clipped value.
    pub max: f64,
}

impl LinearScale {
    pub fn fit(data: &[f64]) -> Result<Self, QuantizeError> {
        let s = crate::tensor::stats(data)?;
        let clip_lo = s.mean - 3.0 * s.std;
        let clip_hi = s.mean + 3.0 * s.std;
        // Clipping is monotone, so the clipped extremes are the clipped raw extremes.
        Ok(Self {
            clip_lo,
            clip_hi,
            min: s.min.clamp(clip_lo, clip_hi),
            max: s.max.clamp(clip_lo, clip_hi),
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }

    /// `de/dx` away from the clip bounds; zero for a degenerate range.
    pub fn slope(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            2.0 / (self.max - self.min)
        }
    }

    pub fn clips(&self, x: f64) -> bool {
        x < self.clip_lo || x > self.clip_hi
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        // Division is monotone, so fitted inputs land exactly in [-1, 1]. A
        // frozen map applied to new inputs may extend past the ends.
        let c = x.clamp(self.clip_lo, self.clip_hi);
        2.0 * (c - self.min) / (self.max - self.min) - 1.0
    }

    /// Maps a value in `[-1, 1]` back to the input scale.
    pub fn invert(&self, e: f64) -> f64 {
        if self.is_degenerate() {
            return self.min;
        }
        self.min + (e + 1.0) * (self.max - self.min) / 2.0
    }
}

/// Clips to `mean ± 3·std`, then maps the clipped range affinely onto `[-1, 1]`.
/// A constant input maps to all zeros.
pub fn scale_linear(t: &FeatureTensor) -> Result<FeatureTensor, QuantizeError> {
    let scale = LinearScale::fit(t.data())?;
    Ok(t.map(|x| scale.apply(x)))
}

pub fn scale_tanh(t: &FeatureTensor) -> Result<FeatureTensor, QuantizeError> {
    if t.is_empty() {
        return Err(TensorError::Empty.into());
    }
    Ok(t.map(f64::tanh))
}

pub fn scale(t: &FeatureTensor, scaling: Scaling) -> Result<FeatureTensor, QuantizeError> {
    match scaling {
        Scaling::Tanh => scale_tanh(t),
        Scaling::ClippedLinear => scale_linear(t),
    }
}

/// Lattice value for one scaled element. Ties round away from zero.
#[inline]
pub fn round_level(e: f64, levels: u32) -> f64 {
    let s = half_span(levels);
    if levels % 2 == 1 {
        (s * e).round()
    } else {
        (s * e - 0.5).round() + 0.5
    }
}

/// Snaps every element of `e` (in `[-1, 1]`) onto the `K`-level lattice.
pub fn round_levels(e: &FeatureTensor, levels: u32) -> Result<FeatureTensor, QuantizeError> {
    check_levels(levels)?;
    check_range(e.data())?;
    Ok(e.map(|x| round_level(x, levels)))
}

fn check_range(data: &[f64]) -> Result<(), QuantizeError> {
    match data.iter().enumerate().find(|(_, x)| x.abs() > 1.0 + RANGE_SLACK) {
        Some((position, &value)) => Err(QuantizeError::OutOfRange { position, value }),
        None => Ok(()),
    }
}

/// Scales `t` per `cfg` and quantizes the result.
pub fn quantize(t: &FeatureTensor, cfg: &QuantizerConfig) -> Result<QuantizeOutput, QuantizeError> {
    let e = scale(t, cfg.scaling)?;
    quantize_scaled(e, cfg)
}

/// Quantizes features that are already scaled into `[-1, 1]`.
pub fn quantize_scaled(e: FeatureTensor, cfg: &QuantizerConfig) -> Result<QuantizeOutput, QuantizeError> {
    check_levels(cfg.levels)?;
    check_range(e.data())?;
    let s = cfg.half_span();
    let z: Vec<f64> = e.data().iter().map(|&x| round_level(x, cfg.levels)).collect();
    let indices: Vec<u32> = z
        .iter()
        .map(|&v| ((v + s).round() as u32).min(cfg.levels - 1))
        .collect();
    let commit_loss = commitment_loss(e.data(), &z, s, cfg.commitment);
    let reconstructed = FeatureTensor::new(e.shape().to_vec(), z.iter().map(|&v| v / s).collect())?;
    let block = QuantizedBlock {
        levels: cfg.levels,
        shape: e.shape().to_vec(),
        indices,
    };
    Ok(QuantizeOutput {
        block,
        reconstructed,
        commit_loss,
        scaled: e,
    })
}

/// Server side: rebuilds `C` from `K` and the indices alone.
pub fn reconstruct(block: &QuantizedBlock) -> Result<FeatureTensor, QuantizeError> {
    let s = half_span(block.levels);
    let mut data = Vec::with_capacity(block.indices.len());
    for (position, &index) in block.indices.iter().enumerate() {
        if index >= block.levels {
            return Err(QuantizeError::CorruptBlock {
                position,
                index,
                levels: block.levels,
            });
        }
        data.push((index as f64 - s) / s);
    }
    Ok(FeatureTensor::new(block.shape.clone(), data)?)
}

/// Commitment loss between `s·e` and the (stop-gradient) lattice `z`.
pub fn commitment_loss(e: &[f64], z: &[f64], s: f64, form: CommitmentForm) -> f64 {
    debug_assert_eq!(e.len(), z.len());
    match form {
        CommitmentForm::Squared => e.iter().zip(z).map(|(&x, &q)| (s * x - q).powi(2)).sum::<f64>() / e.len() as f64,
        CommitmentForm::Cosine => {
            if e.iter().zip(z).all(|(&x, &q)| s * x == q) {
                return 0.0;
            }
            let (dot, aa, zz) = e.iter().zip(z).fold((0.0, 0.0, 0.0), |(d, a, b), (&x, &q)| {
                let v = s * x;
                (d + v * q, a + v * v, b + q * q)
            });
            if aa == 0.0 || zz == 0.0 {
                // Cosine is undefined; one side is the zero vector and the
                // other is not, so treat them as orthogonal.
                return 1.0;
            }
            let cos = (dot / (aa * zz).sqrt()).clamp(-1.0, 1.0);
            (1.0 - cos).max(0.0)
        }
    }
}

/// Gradient of [`commitment_loss`] with respect to `e`, holding `z` fixed.
pub fn commitment_gradient(e: &[f64], z: &[f64], s: f64, form: CommitmentForm) -> Vec<f64> {
    let n = e.len() as f64;
    match form {
        CommitmentForm::Squared => e.iter().zip(z).map(|(&x, &q)| 2.0 * s * (s * x - q) / n).collect(),
        CommitmentForm::Cosine => {
            let (dot, aa, zz) = e.iter().zip(z).fold((0.0, 0.0, 0.0), |(d, a, b), (&x, &q)| {
                let v = s * x;
                (d + v * q, a + v * v, b + q * q)
            });
            if aa == 0.0 || zz == 0.0 {
                return vec![0.0; e.len()];
            }
            let na = aa.sqrt();
            let nz = zz.sqrt();
            // d(1 - a·z/(|a||z|))/da = -(z/(|a||z|) - (a·z) a/(|a|³|z|)), then chain by s.
            e.iter()
                .zip(z)
                .map(|(&x, &q)| {
                    let a = s * x;
                    -s * (q / (na * nz) - dot * a / (aa * na * nz))
                })
                .collect()
        }
    }
}
