//! Random top-k sparsification, the comparison baseline.
//!
//! Each of the `k` slots keeps one of the `k` largest-magnitude entries, except
//! that with probability `epsilon` a slot is handed to a uniformly drawn entry
//! outside the top-k set instead. Kept values travel as FP16.

use half::f16;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::TopKFrame;
use crate::tensor::FeatureTensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("k={k} must be in 1..={len}")]
    InvalidK { k: usize, len: usize },
    #[error("epsilon must be in [0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("malformed top-k frame: {0}")]
    Frame(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatures {
    dims: usize,
    /// Strictly ascending indices with their FP16 values.
    kept: Vec<(u32, f16)>,
}

impl SparseFeatures {
    pub fn new(dims: usize, mut kept: Vec<(u32, f16)>) -> Result<Self, BaselineError> {
        kept.sort_by_key(|&(i, _)| i);
        let ascending = kept.windows(2).all(|w| w[0].0 < w[1].0);
        let in_range = kept.iter().all(|&(i, _)| (i as usize) < dims);
        if !ascending || !in_range || kept.is_empty() || kept.len() > dims {
            return Err(BaselineError::Frame(format!(
                "{} entries are not distinct indices below {dims}",
                kept.len()
            )));
        }
        Ok(Self { dims, kept })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn k(&self) -> usize {
        self.kept.len()
    }

    pub fn kept(&self) -> &[(u32, f16)] {
        &self.kept
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.kept.iter().map(|&(i, _)| i as usize)
    }

    /// Bits on the wire before framing: `k · (16 + ceil(log2 dims))`.
    pub fn wire_cost_bits(&self) -> usize {
        self.k() * (16 + TopKFrame::index_bits(self.dims as u32) as usize)
    }
}

/// Indices of the `k` largest `|v[i]|`, ties going to the lower index, in
/// rank order.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn topk_sparsify(v: &[f64], k: usize, epsilon: f64, seed: u64) -> Result<SparseFeatures, BaselineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sparsify_with(v, k, epsilon, &mut rng)
}

fn sparsify_with<R: Rng>(v: &[f64], k: usize, epsilon: f64, rng: &mut R) -> Result<SparseFeatures, BaselineError> {
    if k == 0 || k > v.len() {
        return Err(BaselineError::InvalidK { k, len: v.len() });
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(BaselineError::InvalidEpsilon(epsilon));
    }
    let top = top_k_indices(v, k);
    let mut is_top = vec![false; v.len()];
    for &i in &top {
        is_top[i] = true;
    }
    let mut rest: Vec<usize> = (0..v.len()).filter(|&i| !is_top[i]).collect();
    rest.shuffle(rng);
    let mut rest = rest.into_iter();

    let mut chosen = Vec::with_capacity(k);
    for &t in &top {
        let swap = epsilon > 0.0 && rng.random::<f64>() < epsilon;
        let pick = if swap { rest.next().unwrap_or(t) } else { t };
        chosen.push(pick);
    }
    let kept = chosen.into_iter().map(|i| (i as u32, f16::from_f64(v[i]))).collect();
    SparseFeatures::new(v.len(), kept)
}

/// Dense vector with kept values in place and zeros elsewhere.
pub fn densify(s: &SparseFeatures) -> Vec<f64> {
    let mut out = vec![0.0; s.dims];
    for &(i, v) in &s.kept {
        out[i as usize] = v.to_f64();
    }
    out
}

/// Sparsifies every last-axis row of `t` with one seeded stream.
pub fn sparsify_rows(
    t: &FeatureTensor,
    k: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<SparseFeatures>, BaselineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    t.data()
        .chunks(t.last_dim())
        .map(|row| sparsify_with(row, k, epsilon, &mut rng))
        .collect()
}

pub fn rows_to_frame(rows: &[SparseFeatures], request_id: u64) -> Result<TopKFrame, BaselineError> {
    let first = rows.first().ok_or_else(|| BaselineError::Frame("no rows".into()))?;
    let (dims, k) = (first.dims, first.k());
    if rows.iter().any(|r| r.dims != dims || r.k() != k) {
        return Err(BaselineError::Frame("rows differ in dims or k".into()));
    }
    let mut indices = Vec::with_capacity(rows.len() * k);
    let mut values = Vec::with_capacity(rows.len() * k);
    for r in rows {
        for &(i, v) in &r.kept {
            indices.push(i);
            values.push(v.to_bits());
        }
    }
    Ok(TopKFrame {
        request_id,
        rows: rows.len() as u32,
        dims: dims as u32,
        k: k as u32,
        indices,
        values,
    })
}

pub fn rows_from_frame(frame: &TopKFrame) -> Result<Vec<SparseFeatures>, BaselineError> {
    let k = frame.k as usize;
    if k == 0 || frame.indices.len() != frame.rows as usize * k || frame.values.len() != frame.indices.len() {
        return Err(BaselineError::Frame("entry count does not match rows·k".into()));
    }
    frame
        .indices
        .chunks(k)
        .zip(frame.values.chunks(k))
        .map(|(idx, vals)| {
            let kept = idx.iter().zip(vals).map(|(&i, &b)| (i, f16::from_bits(b))).collect();
            SparseFeatures::new(frame.dims as usize, kept)
        })
        .collect()
}
