//! Chain diagnostics: effective sample size, streaming moments and distances
//! to known ground truth.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fewest samples [`ess`] accepts.
pub const MIN_ESS_SAMPLES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("need at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("zero variance in dimension {0}")]
    ZeroVariance(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty chain")]
    Empty,
}

/// Samples in iteration-major order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Chain {
    dim: usize,
    data: Vec<f64>,
}

impl Chain {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DiagError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut c = Self::new(dim);
        for r in rows {
            c.push(r)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, z: &[f64]) -> Result<(), DiagError> {
        if z.len() != self.dim {
            return Err(DiagError::Dimension {
                expected: self.dim,
                got: z.len(),
            });
        }
        self.data.extend_from_slice(z);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        self.data.iter().skip(d).step_by(self.dim.max(1)).copied().collect()
    }

    /// The first `n` samples.
    pub fn prefix(&self, n: usize) -> Chain {
        let n = n.min(self.len());
        Chain {
            dim: self.dim,
            data: self.data[..n * self.dim].to_vec(),
        }
    }
}

/// Normalized autocorrelations `ρ_0..ρ_{n-1}` via zero-padded FFT.
pub fn autocorrelation(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    buf.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    if c0 <= 0.0 {
        return vec![f64::NAN; n];
    }
    buf[..n].iter().map(|c| c.re / c0).collect()
}

/// Effective sample size of a scalar series with Geyer's initial positive
/// sequence truncation, clamped to `(0, N]`.
pub fn ess_series(x: &[f64]) -> Result<f64, DiagError> {
    let n = x.len();
    if n < MIN_ESS_SAMPLES {
        return Err(DiagError::TooShort {
            need: MIN_ESS_SAMPLES,
            got: n,
        });
    }
    let first = x[0];
    if x.iter().all(|v| *v == first) {
        return Err(DiagError::ZeroVariance(0));
    }
    let rho = autocorrelation(x);
    if rho[0].is_nan() {
        return Err(DiagError::ZeroVariance(0));
    }
    let mut sum_pairs = 0.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = rho[2 * k] + rho[2 * k + 1];
        if pair <= 0.0 {
            break;
        }
        sum_pairs += pair;
        k += 1;
    }
    let tau = -1.0 + 2.0 * sum_pairs;
    let n = n as f64;
    Ok(if tau > 0.0 { (n / tau).min(n) } else { n })
}

pub fn ess(chain: &Chain, dim: usize) -> Result<f64, DiagError> {
    if dim >= chain.dim() {
        return Err(DiagError::Dimension {
            expected: chain.dim(),
            got: dim,
        });
    }
    ess_series(&chain.column(dim)).map_err(|e| match e {
        DiagError::ZeroVariance(_) => DiagError::ZeroVariance(dim),
        other => other,
    })
}

/// Checkpoints `16, 32, 64, …` up to and including `n`.
pub fn checkpoints(n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = std::iter::successors(Some(16usize), |c| c.checked_mul(2))
        .take_while(|c| *c <= n)
        .collect();
    if n >= MIN_ESS_SAMPLES && out.last() != Some(&n) {
        out.push(n);
    }
    out
}

/// ESS of growing prefixes at [`checkpoints`].
pub fn cumulative_ess(chain: &Chain, dim: usize) -> Result<Vec<(usize, f64)>, DiagError> {
    checkpoints(chain.len())
        .into_iter()
        .map(|n| Ok((n, ess(&chain.prefix(n), dim)?)))
        .collect()
}

/// Welford accumulator for per-dimension mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Pools another accumulator into this one.
    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased variance (zero for fewer than two samples).
    pub fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|s| s / (self.n - 1) as f64).collect()
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance().iter().map(|v| v.sqrt()).collect()
    }
}

pub fn moments(chain: &Chain) -> Result<Moments, DiagError> {
    if chain.is_empty() {
        return Err(DiagError::Empty);
    }
    let mut m = Moments::new(chain.dim());
    for i in 0..chain.len() {
        m.push(chain.row(i));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `None` where the chain has no variance or is too short.
    pub ess: Vec<Option<f64>>,
    pub acceptance_rate: f64,
    pub divergences: u64,
}

pub fn summarize(chain: &Chain, acceptance_rate: f64, divergences: u64) -> Result<SummaryStats, DiagError> {
    let m = moments(chain)?;
    Ok(SummaryStats {
        n: chain.len(),
        mean: m.mean().to_vec(),
        std: m.std(),
        ess: (0..chain.dim()).map(|d| ess(chain, d).ok()).collect(),
        acceptance_rate,
        divergences,
    })
}

/// Reference marginal moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub std_abs_err: Vec<f64>,
    pub mean_abs_err: Option<Vec<f64>>,
    /// Sum of squared per-dimension errors over every reported component.
    pub sum_sq: f64,
}

pub fn compare_to_truth(mean: &[f64], std: &[f64], truth: &Truth) -> Result<DistanceReport, DiagError> {
    let check = |expected: usize, got: usize| {
        if expected == got {
            Ok(())
        } else {
            Err(DiagError::Dimension { expected, got })
        }
    };
    check(truth.std.len(), std.len())?;
    let std_abs_err: Vec<f64> = std.iter().zip(&truth.std).map(|(a, b)| (a - b).abs()).collect();
    let mean_abs_err = match &truth.mean {
        Some(tm) => {
            check(tm.len(), mean.len())?;
            Some(mean.iter().zip(tm).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        }
        None => None,
    };
    let sum_sq = std_abs_err
        .iter()
        .chain(mean_abs_err.iter().flatten())
        .map(|e| e * e)
        .sum();
    Ok(DistanceReport {
        std_abs_err,
        mean_abs_err,
        sum_sq,
    })
}
