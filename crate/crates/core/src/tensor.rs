//! Dense feature tensors and the batch statistics the quantizer and entropy
//! estimator are built on.
//!
//! A [`FeatureTensor`] is at most rank 3, laid out row-major as
//! `batch × tokens × dims`. Elements are kept as `f64`; the on-disk fixture
//! format stores them as little-endian `f32`.

use std::io::{self, Read, Write};

use thiserror::Error;

/// Highest rank a feature tensor may have.
pub const MAX_RANK: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("empty input")]
    Empty,
    #[error("invalid bound: lo {lo} > hi {hi}")]
    InvalidBound { lo: f64, hi: f64 },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite element at position {0}")]
    NonFinite(usize),
    #[error("malformed tensor fixture: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Population statistics over every element of a tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorStats {
    pub mean: f64,
    /// Population standard deviation (divisor `n`).
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::InvalidShape(shape.to_vec()))
}

impl FeatureTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite(pos));
        }
        Ok(Self { shape, data })
    }

    /// Rank-1 tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self, TensorError> {
        if data.is_empty() {
            return Err(TensorError::Empty);
        }
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; n],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the innermost (feature) dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Number of rows when the tensor is viewed as `rows × last_dim`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    /// Applies `f` elementwise. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        debug_assert!(data.iter().all(|x| x.is_finite()));
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn stats(&self) -> Result<TensorStats, TensorError> {
        stats(&self.data)
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Result<Self, TensorError> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(TensorError::InvalidBound { lo, hi });
        }
        Ok(self.map(|x| x.clamp(lo, hi)))
    }

    /// Writes the binary fixture form: `u32` rank, `u32` dims, then `f32` data,
    /// all little-endian.
    pub fn write_fixture<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_fixture_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.shape.len() + 4 * self.data.len());
        self.write_fixture(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one tensor in fixture form. Returns `Ok(None)` on a clean EOF
    /// before the rank word, so concatenated fixtures can be streamed.
    pub fn read_fixture<R: Read>(r: &mut R) -> Result<Option<Self>, TensorError> {
        let mut word = [0u8; 4];
        if !read_exact_or_eof(r, &mut word)? {
            return Ok(None);
        }
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::Fixture(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_word(r, &mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let n = check_shape(&shape)?;
        let mut raw = vec![0u8; n.checked_mul(4).ok_or(TensorError::InvalidShape(shape.clone()))?];
        r.read_exact(&mut raw)
            .map_err(|_| TensorError::Fixture("truncated tensor data".into()))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(shape, data).map(Some)
    }

    pub fn from_fixture_bytes(mut bytes: &[u8]) -> Result<Self, TensorError> {
        let t = Self::read_fixture(&mut bytes)?.ok_or_else(|| TensorError::Fixture("no tensor present".into()))?;
        if !bytes.is_empty() {
            return Err(TensorError::Fixture(format!(
                "{} trailing bytes after tensor",
                bytes.len()
            )));
        }
        Ok(t)
    }
}

fn read_word<R: Read>(r: &mut R, word: &mut [u8; 4]) -> Result<(), TensorError> {
    r.read_exact(word)
        .map_err(|_| TensorError::Fixture("truncated header".into()))
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool, TensorError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(TensorError::Fixture("truncated header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(TensorError::Fixture(e.to_string())),
        }
    }
    Ok(true)
}

/// Population statistics of a slice.
pub fn stats(data: &[f64]) -> Result<TensorStats, TensorError> {
    if data.is_empty() {
        return Err(TensorError::Empty);
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let (min, max) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    // Rounding in the mean can push it a hair outside [min, max] for
    // near-constant data.
    let mean = mean.clamp(min, max);
    let std = if min == max { 0.0 } else { var.sqrt() };
    Ok(TensorStats {
        mean,
        std,
        min,
        max,
        count: data.len(),
    })
}
