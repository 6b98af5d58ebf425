//! Differential entropy of activations and the bit width it implies.
//!
//! The density is a Gaussian KDE with Scott's-rule bandwidth
//! `h = (4/3)^(1/5) · σ · n^(-1/5)`, evaluated exactly on a uniform grid that
//! covers `[min - 5h, max + 5h]`. Entropy is the trapezoidal integral of
//! `-p̂ log₂ p̂` over that grid, and the recommended width is
//! `b = max(1, ceil(Ĥ))`.

use std::f64::consts::{E, PI};
use std::fmt::Write as _;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::quantizer::{self, QuantizeError};
use crate::tensor::{self, FeatureTensor, TensorError};

/// Grid resolution used when callers don't choose one.
pub const DEFAULT_GRID_POINTS: usize = 4096;
/// Smallest accepted grid.
pub const MIN_GRID_POINTS: usize = 64;
/// Grid margin beyond the sample range, in bandwidths.
pub const GRID_MARGIN: f64 = 5.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate sample (constant)")]
    Degenerate,
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("grid needs at least {MIN_GRID_POINTS} points, got {0}")]
    GridTooSmall(usize),
    #[error("non-finite sample at position {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
}

/// KDE evaluated on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl DensityEstimate {
    /// Trapezoidal integral of the density.
    pub fn mass(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "x,density")?;
        for (x, p) in self.grid.iter().zip(&self.density) {
            writeln!(w, "{x:.6},{p:.9}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub bandwidth: f64,
    pub sample_count: usize,
    pub sample_std: f64,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    pub entropy_bits: f64,
    pub recommended_bits: u32,
}

impl EntropyReport {
    /// Line-oriented `key=value` form with fixed decimals.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sample_count={}", self.sample_count);
        let _ = writeln!(s, "sample_std={:.6}", self.sample_std);
        let _ = writeln!(s, "bandwidth={:.6}", self.bandwidth);
        let _ = writeln!(s, "grid_lo={:.6}", self.grid_lo);
        let _ = writeln!(s, "grid_hi={:.6}", self.grid_hi);
        let _ = writeln!(s, "grid_points={}", self.grid_points);
        let _ = writeln!(s, "entropy_bits={:.6}", self.entropy_bits);
        let _ = writeln!(s, "recommended_bits={}", self.recommended_bits);
        s
    }
}

/// Where in the pipeline activations are sampled for entropy estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tap {
    /// Features as given.
    #[default]
    Raw,
    /// After clipped linear scaling into `[-1, 1]`.
    Scaled,
}

/// Pools every element of `t` into one 1-D sample at the given tap point.
pub fn tap_samples(t: &FeatureTensor, tap: Tap) -> Result<Vec<f64>, EntropyError> {
    Ok(match tap {
        Tap::Raw => t.data().to_vec(),
        Tap::Scaled => quantizer::scale_linear(t)?.into_data(),
    })
}

fn check_samples(samples: &[f64]) -> Result<(), EntropyError> {
    if samples.len() < 2 {
        return Err(EntropyError::TooFewSamples(samples.len()));
    }
    if let Some(pos) = samples.iter().position(|x| !x.is_finite()) {
        return Err(EntropyError::NonFinite(pos));
    }
    Ok(())
}

/// Scott's rule, `(4/3)^(1/5) · σ · n^(-1/5)` with population `σ`.
pub fn scott_bandwidth(samples: &[f64]) -> Result<f64, EntropyError> {
    check_samples(samples)?;
    let s = tensor::stats(samples)?;
    if s.std == 0.0 {
        return Err(EntropyError::Degenerate);
    }
    Ok(scott_factor(samples.len()) * s.std)
}

/// `(4/3)^(1/5) · n^(-1/5)`.
fn scott_factor(n: usize) -> f64 {
    (4.0f64 / 3.0).powf(0.2) * (n as f64).powf(-0.2)
}

/// Exact Gaussian KDE on `grid_points` evenly spaced points.
pub fn kde_density(samples: &[f64], h: f64, grid_points: usize) -> Result<DensityEstimate, EntropyError> {
    if samples.is_empty() {
        return Err(EntropyError::TooFewSamples(0));
    }
    if let Some(pos) = samples.iter().position(|x| !x.is_finite()) {
        return Err(EntropyError::NonFinite(pos));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(EntropyError::InvalidBandwidth(h));
    }
    if grid_points < MIN_GRID_POINTS {
        return Err(EntropyError::GridTooSmall(grid_points));
    }
    let s = tensor::stats(samples)?;
    let lo = s.min - GRID_MARGIN * h;
    let hi = s.max + GRID_MARGIN * h;
    let step = (hi - lo) / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points)
        .map(|i| if i == grid_points - 1 { hi } else { lo + i as f64 * step })
        .collect();

    let inv_h = 1.0 / h;
    let norm = INV_SQRT_2PI / (samples.len() as f64 * h);
    let density = grid
        .par_iter()
        .map(|&x| {
            let sum: f64 = samples
                .iter()
                .map(|&xi| {
                    let u = (x - xi) * inv_h;
                    (-0.5 * u * u).exp()
                })
                .sum();
            sum * norm
        })
        .collect();
    Ok(DensityEstimate { grid, density })
}

/// `∫ -p̂ log₂ p̂` by the trapezoidal rule, with `0 · log 0 = 0`.
pub fn entropy_bits(d: &DensityEstimate) -> f64 {
    let integrand: Vec<f64> = d
        .density
        .iter()
        .map(|&p| if p > 0.0 { -p * p.log2() } else { 0.0 })
        .collect();
    trapezoid(&d.grid, &integrand)
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// Smallest integer width satisfying `b >= Ĥ`, never below one bit.
pub fn bits_for_entropy(entropy_bits: f64) -> u32 {
    entropy_bits.ceil().max(1.0) as u32
}

/// Bandwidth, density, entropy and bit width for a pooled 1-D sample.
pub fn recommend_bits(samples: &[f64], grid_points: usize) -> Result<EntropyReport, EntropyError> {
    let bandwidth = scott_bandwidth(samples)?;
    let density = kde_density(samples, bandwidth, grid_points)?;
    Ok(report_from(samples, bandwidth, &density))
}

/// Like [`recommend_bits`] but also hands back the density for plotting.
pub fn analyze(samples: &[f64], grid_points: usize) -> Result<(EntropyReport, DensityEstimate), EntropyError> {
    let bandwidth = scott_bandwidth(samples)?;
    let density = kde_density(samples, bandwidth, grid_points)?;
    Ok((report_from(samples, bandwidth, &density), density))
}

fn report_from(samples: &[f64], bandwidth: f64, density: &DensityEstimate) -> EntropyReport {
    let s = tensor::stats(samples).expect("samples validated by caller");
    let entropy = entropy_bits(density);
    EntropyReport {
        bandwidth,
        sample_count: samples.len(),
        sample_std: s.std,
        grid_lo: density.grid[0],
        grid_hi: *density.grid.last().expect("grid is non-empty"),
        grid_points: density.grid.len(),
        entropy_bits: entropy,
        recommended_bits: bits_for_entropy(entropy),
    }
}

/// One report per feature (last-axis) column instead of a pooled sample.
pub fn recommend_bits_per_dim(t: &FeatureTensor, grid_points: usize) -> Result<Vec<EntropyReport>, EntropyError> {
    let dims = t.last_dim();
    (0..dims)
        .map(|j| {
            let column: Vec<f64> = t.data().iter().skip(j).step_by(dims).copied().collect();
            recommend_bits(&column, grid_points)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDistribution {
    /// Standard normal.
    Normal,
    /// Uniform on `(-1, 1)`.
    Uniform,
}

impl ProbeDistribution {
    /// Closed-form differential entropy in bits.
    pub fn entropy_bits(self) -> f64 {
        match self {
            ProbeDistribution::Normal => 0.5 * (2.0 * PI * E).log2(),
            ProbeDistribution::Uniform => 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R, n: usize) -> Vec<f64> {
        match self {
            ProbeDistribution::Normal => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            ProbeDistribution::Uniform => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }
}

/// Mean absolute entropy error `|Ĥ - H|` over `trials` independent draws at
/// each sample size. Trials run in parallel on independent ChaCha streams, so
/// the output depends only on the arguments.
pub fn convergence_probe(
    distribution: ProbeDistribution,
    sizes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>, EntropyError> {
    let truth = distribution.entropy_bits();
    sizes
        .iter()
        .enumerate()
        .map(|(size_idx, &n)| {
            let errors: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((size_idx * trials + trial) as u64);
                    let samples = distribution.sample(&mut rng, n);
                    recommend_bits(&samples, DEFAULT_GRID_POINTS).map(|r| (r.entropy_bits - truth).abs())
                })
                .collect::<Result<_, _>>()?;
            Ok((n, errors.iter().sum::<f64>() / trials.max(1) as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn normal_pdf(x: f64) -> f64 {
        INV_SQRT_2PI * (-0.5 * x * x).exp()
    }

    fn normal_samples(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ProbeDistribution::Normal
            .sample(&mut rng, n)
            .into_iter()
            .map(|x| x * sigma)
            .collect()
    }

    #[test]
    fn scott_examples() {
        // n = 1024, σ = 1: 1024^(-1/5) = 1/4 exactly.
        let mut v: Vec<f64> = (0..512).flat_map(|_| [-1.0, 1.0]).collect();
        assert!((scott_bandwidth(&v).unwrap() - (4.0f64 / 3.0).powf(0.2) * 0.25).abs() < 1e-12);
        assert!((scott_bandwidth(&v).unwrap() - 0.2649).abs() < 1e-4);

        // n = 32, σ = 2: 32^(-1/5) = 1/2 exactly.
        v = (0..16).flat_map(|_| [-2.0, 2.0]).collect();
        let h = scott_bandwidth(&v).unwrap();
        assert!((h - (4.0f64 / 3.0).powf(0.2)).abs() < 1e-12);
        assert!((h - 1.0592).abs() < 1e-4);

        assert_eq!(scott_bandwidth(&[3.0, 3.0, 3.0]), Err(EntropyError::Degenerate));
        assert_eq!(scott_bandwidth(&[3.0]), Err(EntropyError::TooFewSamples(1)));
        assert_eq!(EntropyError::Degenerate.to_string(), "degenerate sample (constant)");
    }

    #[test]
    fn single_kernel_is_standard_normal() {
        let d = kde_density(&[0.0], 1.0, 1001).unwrap();
        for (&x, &p) in d.grid.iter().zip(&d.density) {
            assert!((p - normal_pdf(x)).abs() < 1e-15);
        }
        assert!((d.density[500] - 0.39894).abs() < 1e-5);
        assert!((d.mass() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn symmetric_pair_gives_symmetric_density() {
        let d = kde_density(&[-1.0, 1.0], 1.0, 257).unwrap();
        let n = d.density.len();
        for i in 0..n {
            assert!((d.grid[i] + d.grid[n - 1 - i]).abs() < 1e-12);
            assert!((d.density[i] - d.density[n - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn kde_rejects_bad_inputs() {
        assert_eq!(kde_density(&[0.0], 0.0, 64), Err(EntropyError::InvalidBandwidth(0.0)));
        assert_eq!(kde_density(&[0.0], -1.0, 64), Err(EntropyError::InvalidBandwidth(-1.0)));
        assert_eq!(kde_density(&[0.0], 1.0, 63), Err(EntropyError::GridTooSmall(63)));
    }

    #[test]
    fn large_normal_sample_tracks_analytic_pdf() {
        let v = normal_samples(100_000, 1.0, 7);
        let h = scott_bandwidth(&v).unwrap();
        let d = kde_density(&v, h, DEFAULT_GRID_POINTS).unwrap();
        let worst = d
            .grid
            .iter()
            .zip(&d.density)
            .map(|(&x, &p)| (p - normal_pdf(x)).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.02, "max deviation {worst}");
        assert!((d.mass() - 1.0).abs() <= 0.01);
    }

    #[test]
    fn entropy_of_reference_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = ProbeDistribution::Uniform.sample(&mut rng, 100_000);
        let r = recommend_bits(&u, DEFAULT_GRID_POINTS).unwrap();
        assert!((r.entropy_bits - 1.0).abs() <= 0.1, "{}", r.entropy_bits);

        let g = normal_samples(100_000, 1.0, 12);
        let r = recommend_bits(&g, DEFAULT_GRID_POINTS).unwrap();
        let truth = ProbeDistribution::Normal.entropy_bits();
        assert!((truth - 2.047).abs() < 1e-3);
        assert!((r.entropy_bits - truth).abs() <= 0.05, "{}", r.entropy_bits);
        assert_eq!(r.recommended_bits, 3);

        let g = normal_samples(100_000, 0.5, 13);
        let r = recommend_bits(&g, DEFAULT_GRID_POINTS).unwrap();
        assert!((r.entropy_bits - (truth - 1.0)).abs() <= 0.05, "{}", r.entropy_bits);
    }

    #[test]
    fn bit_rule() {
        assert_eq!(bits_for_entropy(1.8077), 2);
        assert_eq!(bits_for_entropy(2.047), 3);
        assert_eq!(bits_for_entropy(0.3), 1);
        assert_eq!(bits_for_entropy(-0.7), 1);
        assert_eq!(bits_for_entropy(2.0), 2);
    }

    #[test]
    fn report_invariants() {
        let v = normal_samples(2000, 1.3, 3);
        let r = recommend_bits(&v, 512).unwrap();
        let expect_h = (4.0f64 / 3.0).powf(0.2) * r.sample_std * (2000f64).powf(-0.2);
        assert!((r.bandwidth - expect_h).abs() < 1e-12);
        assert!(r.grid_lo < r.grid_hi);
        assert_eq!(r.recommended_bits, bits_for_entropy(r.entropy_bits));
        assert!(r.to_kv().contains("recommended_bits=3\n"));
    }

    #[test]
    fn per_dim_reports_each_column() {
        let mut data = Vec::new();
        let a = normal_samples(500, 1.0, 1);
        let b = normal_samples(500, 0.1, 2);
        for i in 0..500 {
            data.push(a[i]);
            data.push(b[i]);
        }
        let t = FeatureTensor::new(vec![500, 2], data).unwrap();
        let reports = recommend_bits_per_dim(&t, 512).unwrap();
        assert_eq!(reports.len(), 2);
        assert!(reports[0].entropy_bits > reports[1].entropy_bits + 2.0);
    }

    #[test]
    fn scaled_tap_is_bounded() {
        let t = FeatureTensor::from_vec(normal_samples(1000, 5.0, 4)).unwrap();
        let s = tap_samples(&t, Tap::Scaled).unwrap();
        assert!(s.iter().all(|x| x.abs() <= 1.0));
        assert_eq!(tap_samples(&t, Tap::Raw).unwrap(), t.data());
    }

    #[test]
    fn probe_is_deterministic() {
        let a = convergence_probe(ProbeDistribution::Uniform, &[200, 400], 3, 5).unwrap();
        let b = convergence_probe(ProbeDistribution::Uniform, &[200, 400], 3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].0, 200);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn density_is_normalized(v in prop::collection::vec(-10f64..10.0, 2..200)) {
            prop_assume!(tensor::stats(&v).unwrap().std > 1e-3);
            let h = scott_bandwidth(&v).unwrap();
            let d = kde_density(&v, h, 1024).unwrap();
            prop_assert!(d.density.iter().all(|&p| p >= 0.0));
            prop_assert!((d.mass() - 1.0).abs() <= 0.01);
        }

        #[test]
        fn bandwidth_scales_linearly(v in prop::collection::vec(-10f64..10.0, 2..200), c in 0.01f64..100.0) {
            prop_assume!(tensor::stats(&v).unwrap().std > 1e-3);
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let a = scott_bandwidth(&scaled).unwrap();
            let b = c * scott_bandwidth(&v).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * b);
        }

        #[test]
        fn entropy_shifts_by_log_scale(seed in 0u64..1000, c in 0.1f64..10.0) {
            let v = normal_samples(2000, 1.0, seed);
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let a = recommend_bits(&v, 2048).unwrap().entropy_bits;
            let b = recommend_bits(&scaled, 2048).unwrap().entropy_bits;
            prop_assert!((b - a - c.log2()).abs() <= 0.05);
        }

        #[test]
        fn permutation_invariant(seed in 0u64..1000) {
            let v = normal_samples(300, 1.0, seed);
            let mut rev = v.clone();
            rev.reverse();
            let a = recommend_bits(&v, 512).unwrap();
            let b = recommend_bits(&rev, 512).unwrap();
            prop_assert_eq!(a.recommended_bits, b.recommended_bits);
            prop_assert!((a.entropy_bits - b.entropy_bits).abs() < 1e-9);
        }
    }
}
