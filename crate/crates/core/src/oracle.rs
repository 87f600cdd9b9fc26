//! Brute-force reference computations: adaptive Gauss–Kronrod quadrature and
//! plain Monte-Carlo estimation of E_p̃[q/p].
//!
//! Nothing in this module calls the closed forms it is meant to check.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distkit::{TruncatedLogNormal, TruncatedLogUniform};
use crate::error::{contract, Error, Result};

/// Integration problem over θ (or over log θ when `log_space` is set).
#[derive(Debug, Clone)]
pub struct QuadratureSpec {
    pub lo: f64,
    pub hi: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
    /// Integrate f(eʸ)·eʸ over y ∈ [ln lo, ln hi] instead of f over [lo, hi].
    pub log_space: bool,
    /// Interior points where the integrand has features narrower than the
    /// initial panel (spikes, kinks); the interval is pre-split there.
    pub breakpoints: Vec<f64>,
}

impl QuadratureSpec {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            rel_tol: 1e-8,
            abs_tol: 0.0,
            max_subdivisions: 4000,
            log_space: false,
            breakpoints: Vec::new(),
        }
    }

    pub fn rel_tol(mut self, tol: f64) -> Self {
        self.rel_tol = tol;
        self
    }

    pub fn log_space(mut self) -> Self {
        self.log_space = true;
        self
    }

    pub fn breakpoints(mut self, points: impl IntoIterator<Item = f64>) -> Self {
        self.breakpoints.extend(points);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(contract(format!("quadrature needs lo < hi, got [{}, {}]", self.lo, self.hi)));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-2) {
            return Err(contract(format!("rel_tol must lie in (0, 1e-2], got {}", self.rel_tol)));
        }
        if self.max_subdivisions == 0 {
            return Err(contract("max_subdivisions must be positive"));
        }
        if self.log_space && self.lo <= 0.0 {
            return Err(contract("log-space quadrature needs lo > 0"));
        }
        Ok(())
    }
}

// 15-point Kronrod nodes/weights with the embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let sum = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * sum;
        if j % 2 == 1 {
            gauss += WG[j / 2] * sum;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn adaptive<F: Fn(f64) -> f64>(f: &F, spec: &QuadratureSpec, lo: f64, hi: f64, cuts: &[f64]) -> Result<f64> {
    let mut edges = vec![lo];
    let mut interior: Vec<f64> = cuts.iter().copied().filter(|&c| c > lo && c < hi).collect();
    interior.sort_by(f64::total_cmp);
    interior.dedup();
    edges.extend(interior);
    edges.push(hi);

    let mut heap = BinaryHeap::new();
    let (mut total, mut total_err) = (0.0, 0.0);
    for w in edges.windows(2) {
        let (value, error) = gauss_kronrod(f, w[0], w[1]);
        total += value;
        total_err += error;
        heap.push(Panel { a: w[0], b: w[1], value, error });
    }
    let mut panels = heap.len();
    while total_err > spec.abs_tol.max(spec.rel_tol * total.abs()) {
        if panels >= spec.max_subdivisions {
            return Err(Error::Convergence { best: total, error: total_err });
        }
        let worst = heap.pop().expect("heap holds at least one panel");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(Error::Convergence { best: total, error: total_err });
        }
        let (lv, le) = gauss_kronrod(f, worst.a, mid);
        let (rv, re) = gauss_kronrod(f, mid, worst.b);
        total += lv + rv - worst.value;
        total_err += le + re - worst.error;
        heap.push(Panel { a: worst.a, b: mid, value: lv, error: le });
        heap.push(Panel { a: mid, b: worst.b, value: rv, error: re });
        panels += 1;
    }
    // Re-sum to shed the drift of the running update.
    Ok(heap.iter().map(|p| p.value).sum())
}

/// ∫ f over [spec.lo, spec.hi] with achieved error ≤ max(abs_tol, rel_tol·|I|).
pub fn quad_integrate<F: Fn(f64) -> f64>(spec: &QuadratureSpec, f: F) -> Result<f64> {
    spec.validate()?;
    if spec.log_space {
        let cuts: Vec<f64> = spec.breakpoints.iter().filter(|&&c| c > 0.0).map(|c| c.ln()).collect();
        let g = |y: f64| {
            let t = y.exp();
            f(t) * t
        };
        adaptive(&g, spec, spec.lo.ln(), spec.hi.ln(), &cuts)
    } else {
        adaptive(&f, spec, spec.lo, spec.hi, &spec.breakpoints)
    }
}

/// log ∫ exp(log_f(x)) dx over [lo, hi] (no log-space change of variables).
///
/// The integrand is shifted by its largest sampled log value before
/// exponentiating, so integrals around e^-10000 stay representable.
pub fn quad_integrate_log<F: Fn(f64) -> f64>(spec: &QuadratureSpec, log_f: F) -> Result<f64> {
    spec.validate()?;
    if spec.log_space {
        return Err(contract("quad_integrate_log works on the raw variable; transform the integrand instead"));
    }
    let mut probes: Vec<f64> = (0..=2000).map(|i| spec.lo + (spec.hi - spec.lo) * i as f64 / 2000.0).collect();
    probes.extend(spec.breakpoints.iter().copied().filter(|&c| c >= spec.lo && c <= spec.hi));
    let shift = probes.iter().map(|&x| log_f(x)).filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let value = adaptive(&|x: f64| (log_f(x) - shift).exp(), spec, spec.lo, spec.hi, &spec.breakpoints)?;
    Ok(shift + value.ln())
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl McEstimate {
    /// True when `value` lies within `k` standard errors of the mean.
    pub fn agrees_with(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error + 1e-12 * value.abs()
    }
}

/// Reduced prior p̃ for Monte-Carlo sampling.
#[derive(Debug, Clone, Copy)]
pub enum ReducedDistribution {
    LogNormal(TruncatedLogNormal),
    LogUniform(TruncatedLogUniform),
}

impl ReducedDistribution {
    fn sample_log(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = loop {
            let u = rng.random::<f64>();
            if u > 0.0 {
                break u;
            }
        };
        match self {
            ReducedDistribution::LogNormal(d) => d.sample(u).expect("u in (0,1)").ln(),
            ReducedDistribution::LogUniform(d) => d.log_lo + u * d.log_width(),
        }
    }
}

/// Estimates E_p̃[q(θ)/p(θ)] from `n` draws θ ~ p̃.
pub fn mc_delta_f(
    q: &TruncatedLogNormal,
    p: &TruncatedLogUniform,
    p_tilde: &ReducedDistribution,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n < 1000 {
        return Err(contract(format!("Monte-Carlo estimate needs at least 1000 samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_norm = q.sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln() + q.log_z();
    let log_p = -p.log_width().ln();
    let log_ratio = |y: f64| {
        if y < p.log_lo || y > p.log_hi || y < q.log_lo || y > q.log_hi {
            f64::NEG_INFINITY
        } else {
            let t = (y - q.mu) / q.sigma;
            -0.5 * t * t - log_norm - log_p
        }
    };
    // Ratios are accumulated relative to exp(shift) so that tiny values keep
    // their spread instead of underflowing in the variance.
    let ys: Vec<f64> = (0..n).map(|_| p_tilde.sample_log(&mut rng)).collect();
    let shift = ys.iter().map(|&y| log_ratio(y)).fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return Ok(McEstimate { mean: 0.0, std_error: 0.0, n_samples: n });
    }
    // Welford accumulation.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (i, &y) in ys.iter().enumerate() {
        let ratio = (log_ratio(y) - shift).exp();
        let delta = ratio - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (ratio - mean);
    }
    let var = m2 / (n - 1) as f64;
    let scale = shift.exp();
    Ok(McEstimate { mean: mean * scale, std_error: (var / n as f64).sqrt() * scale, n_samples: n })
}
