//! Numerical kernels for the standard normal, truncated normal, truncated
//! log-normal and truncated log-uniform distributions.
//!
//! Every truncated quantity is evaluated in log θ coordinates. Normalising
//! constants are carried as logarithms so that posteriors squeezed against a
//! truncation bound (or reduced priors with variances around 1e-12) do not
//! underflow.

use std::f64::consts::{LN_2, PI, SQRT_2};

use crate::error::{contract, domain, Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Standard normal N(0, 1): density, distribution function and quantile.
pub mod std_normal {
    use super::*;

    /// Below this argument `log_cdf` switches from `erfc` to the Mills-ratio
    /// continued fraction.
    const DEEP_TAIL: f64 = -20.0;

    pub fn pdf(t: f64) -> f64 {
        (-0.5 * t * t - LN_SQRT_2PI).exp()
    }

    pub fn log_pdf(t: f64) -> f64 {
        -0.5 * t * t - LN_SQRT_2PI
    }

    /// Φ(t).
    pub fn cdf(t: f64) -> f64 {
        0.5 * libm::erfc(-t / SQRT_2)
    }

    /// 1 − Φ(t), without cancellation for large t.
    pub fn sf(t: f64) -> f64 {
        0.5 * libm::erfc(t / SQRT_2)
    }

    /// Q(x)/φ(x) for x ≥ 20 via the Laplace continued fraction.
    fn mills_ratio(x: f64) -> f64 {
        let mut acc = x;
        for k in (1..=60).rev() {
            acc = x + k as f64 / acc;
        }
        1.0 / acc
    }

    /// log Φ(t), finite for every finite t.
    pub fn log_cdf(t: f64) -> f64 {
        if t == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else if t < DEEP_TAIL {
            log_pdf(t) + mills_ratio(-t).ln()
        } else if t < 0.0 {
            cdf(t).ln()
        } else {
            (-sf(t)).ln_1p()
        }
    }

    /// log(1 − Φ(t)).
    pub fn log_sf(t: f64) -> f64 {
        log_cdf(-t)
    }

    // Acklam's rational approximation, refined below with one Halley step.
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];

    fn inv_cdf_lower(p: f64) -> f64 {
        debug_assert!(p > 0.0 && p <= 0.5);
        let x = if p < 0.024_25 {
            let q = (-2.0 * p.ln()).sqrt();
            (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
                / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
        } else {
            let q = p - 0.5;
            let r = q * q;
            (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
                / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
        };
        let e = cdf(x) - p;
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        x - u / (1.0 + 0.5 * x * u)
    }

    /// Φ⁻¹(u) for u ∈ [0, 1]; returns ∓∞ at the endpoints.
    pub fn inv_cdf(u: f64) -> f64 {
        if u <= 0.0 {
            f64::NEG_INFINITY
        } else if u >= 1.0 {
            f64::INFINITY
        } else if u <= 0.5 {
            inv_cdf_lower(u)
        } else {
            // 1 - u is exact for u in [0.5, 1].
            -inv_cdf_lower(1.0 - u)
        }
    }

    /// Solves log Φ(x) = `log_p`, including arguments far below f64::MIN_POSITIVE.
    pub fn inv_log_cdf(log_p: f64) -> f64 {
        if log_p >= 0.0 {
            return f64::INFINITY;
        }
        if log_p > -680.0 {
            return inv_cdf(log_p.exp());
        }
        let mut x = -(-2.0 * log_p).sqrt();
        for _ in 0..50 {
            let lc = log_cdf(x);
            // d/dx log Φ(x) = φ(x)/Φ(x)
            let slope = (log_pdf(x) - lc).exp();
            let step = (lc - log_p) / slope;
            x -= step;
            if step.abs() <= 1e-15 * x.abs() {
                break;
            }
        }
        x
    }
}

use std_normal as sn;

/// log(1 − eˣ) for x ≤ 0.
fn log1m_exp(x: f64) -> f64 {
    if x > -LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// log(Φ(b) − Φ(a)) for a ≤ b, evaluated on whichever side of zero avoids
/// cancellation.
pub fn log_normal_mass(a: f64, b: f64) -> f64 {
    if !(a < b) {
        return f64::NEG_INFINITY;
    }
    if b <= 0.0 {
        let lb = sn::log_cdf(b);
        lb + log1m_exp(sn::log_cdf(a) - lb)
    } else if a >= 0.0 {
        let la = sn::log_sf(a);
        la + log1m_exp(sn::log_sf(b) - la)
    } else {
        // Straddles zero: both erf terms add with the same sign.
        (0.5 * (libm::erf(b / SQRT_2) - libm::erf(a / SQRT_2))).ln()
    }
}

/// Φ(b) − Φ(a).
pub fn normal_mass(a: f64, b: f64) -> f64 {
    log_normal_mass(a, b).exp()
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("{name} must be finite, got {v}")))
    }
}

/// CDF at `x` of N(mu, sigma²) truncated to [lo, hi].
pub fn trunc_normal_cdf(x: f64, mu: f64, sigma: f64, lo: f64, hi: f64) -> Result<f64> {
    for (name, v) in [("x", x), ("mu", mu), ("sigma", sigma), ("lo", lo), ("hi", hi)] {
        check_finite(name, v)?;
    }
    if !(sigma > 0.0) {
        return Err(domain(format!("sigma must be positive, got {sigma}")));
    }
    if !(lo < hi) {
        return Err(contract(format!("truncation bounds must satisfy lo < hi, got [{lo}, {hi}]")));
    }
    if x <= lo {
        return Ok(0.0);
    }
    if x >= hi {
        return Ok(1.0);
    }
    let alpha = (lo - mu) / sigma;
    let beta = (hi - mu) / sigma;
    let t = (x - mu) / sigma;
    Ok((log_normal_mass(alpha, t) - log_normal_mass(alpha, beta)).exp().min(1.0))
}

/// Log-uniform distribution on [exp(log_lo), exp(log_hi)].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedLogUniform {
    pub log_lo: f64,
    pub log_hi: f64,
}

impl TruncatedLogUniform {
    pub fn new(log_lo: f64, log_hi: f64) -> Result<Self> {
        check_finite("log_lo", log_lo)?;
        check_finite("log_hi", log_hi)?;
        if !(log_lo < log_hi) {
            return Err(contract(format!("log_lo < log_hi required, got [{log_lo}, {log_hi}]")));
        }
        Ok(Self { log_lo, log_hi })
    }

    /// log b − log a.
    pub fn log_width(&self) -> f64 {
        self.log_hi - self.log_lo
    }

    pub fn pdf(&self, theta: f64) -> f64 {
        if theta <= 0.0 {
            return 0.0;
        }
        let y = theta.ln();
        if y < self.log_lo || y > self.log_hi {
            0.0
        } else {
            1.0 / (theta * self.log_width())
        }
    }

    /// Density of log θ (uniform on [log_lo, log_hi]).
    pub fn log_space_pdf(&self, y: f64) -> f64 {
        if y < self.log_lo || y > self.log_hi {
            0.0
        } else {
            1.0 / self.log_width()
        }
    }

    pub fn cdf(&self, theta: f64) -> f64 {
        if theta <= 0.0 {
            return 0.0;
        }
        ((theta.ln() - self.log_lo) / self.log_width()).clamp(0.0, 1.0)
    }
}

/// Log-normal distribution whose log is N(mu, sigma²) restricted to
/// [log_lo, log_hi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedLogNormal {
    pub mu: f64,
    pub sigma: f64,
    pub log_lo: f64,
    pub log_hi: f64,
}

/// Reparameterised draw together with the pathwise derivatives of log θ.
#[derive(Debug, Clone, Copy)]
pub struct ReparamSample {
    pub theta: f64,
    pub dlog_theta_dmu: f64,
    pub dlog_theta_dsigma: f64,
}

/// KL(q ‖ LogU) and its partial derivatives.
#[derive(Debug, Clone, Copy)]
pub struct KlWithGrad {
    pub kl: f64,
    pub dmu: f64,
    pub dsigma: f64,
}

/// Signal-to-noise ratio E[θ]/√Var[θ]; `degenerate` marks a vanishing variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr {
    pub value: f64,
    pub degenerate: bool,
}

impl TruncatedLogNormal {
    pub fn new(mu: f64, sigma: f64, log_lo: f64, log_hi: f64) -> Result<Self> {
        for (name, v) in [("mu", mu), ("sigma", sigma), ("log_lo", log_lo), ("log_hi", log_hi)] {
            check_finite(name, v)?;
        }
        if !(sigma > 0.0) {
            return Err(domain(format!("sigma must be positive, got {sigma}")));
        }
        if !(log_lo < log_hi) {
            return Err(contract(format!("log_lo < log_hi required, got [{log_lo}, {log_hi}]")));
        }
        let d = Self { mu, sigma, log_lo, log_hi };
        if d.log_z() == f64::NEG_INFINITY {
            return Err(Error::Numerical(format!("normalising constant underflows for {d:?}")));
        }
        Ok(d)
    }

    pub fn alpha(&self) -> f64 {
        (self.log_lo - self.mu) / self.sigma
    }

    pub fn beta(&self) -> f64 {
        (self.log_hi - self.mu) / self.sigma
    }

    /// log Z with Z = Φ(β) − Φ(α).
    pub fn log_z(&self) -> f64 {
        log_normal_mass(self.alpha(), self.beta())
    }

    pub fn z(&self) -> f64 {
        self.log_z().exp()
    }

    pub fn support(&self) -> (f64, f64) {
        (self.log_lo.exp(), self.log_hi.exp())
    }

    /// Density of log θ.
    pub fn log_space_pdf(&self, y: f64) -> f64 {
        if y < self.log_lo || y > self.log_hi {
            return 0.0;
        }
        let t = (y - self.mu) / self.sigma;
        (sn::log_pdf(t) - self.sigma.ln() - self.log_z()).exp()
    }

    pub fn pdf(&self, theta: f64) -> f64 {
        if theta <= 0.0 {
            return 0.0;
        }
        self.log_space_pdf(theta.ln()) / theta
    }

    pub fn cdf(&self, theta: f64) -> f64 {
        if theta <= 0.0 {
            return 0.0;
        }
        trunc_normal_cdf(theta.ln(), self.mu, self.sigma, self.log_lo, self.log_hi)
            .unwrap_or(f64::NAN)
    }

    /// q(e^lo ≤ θ ≤ e^hi) as a logarithm; the interval is clipped to the support.
    pub fn log_interval_mass(&self, lo: f64, hi: f64) -> f64 {
        let lo = lo.max(self.log_lo);
        let hi = hi.min(self.log_hi);
        if !(lo < hi) {
            return f64::NEG_INFINITY;
        }
        let a = (lo - self.mu) / self.sigma;
        let b = (hi - self.mu) / self.sigma;
        (log_normal_mass(a, b) - self.log_z()).min(0.0)
    }

    /// Standardised truncated-normal quantile x at level u.
    fn std_quantile(&self, u: f64) -> f64 {
        let (alpha, beta) = (self.alpha(), self.beta());
        let x = if beta <= 0.0 {
            let lp = log_add_exp((1.0 - u).ln() + sn::log_cdf(alpha), u.ln() + sn::log_cdf(beta));
            sn::inv_log_cdf(lp)
        } else if alpha >= 0.0 {
            let ls = log_add_exp((1.0 - u).ln() + sn::log_sf(alpha), u.ln() + sn::log_sf(beta));
            -sn::inv_log_cdf(ls)
        } else {
            sn::inv_cdf((1.0 - u) * sn::cdf(alpha) + u * sn::cdf(beta))
        };
        x.clamp(alpha, beta)
    }

    /// θ = exp(mu + sigma · Φ⁻¹(Φ(α) + u·Z)).
    pub fn sample(&self, u: f64) -> Result<f64> {
        Ok(self.sample_with_grad(u)?.theta)
    }

    /// Reparameterised sample plus ∂log θ/∂mu and ∂log θ/∂sigma at fixed u.
    pub fn sample_with_grad(&self, u: f64) -> Result<ReparamSample> {
        if !(u > 0.0 && u < 1.0) {
            return Err(domain(format!("noise u must lie in (0, 1), got {u}")));
        }
        let (alpha, beta) = (self.alpha(), self.beta());
        let x = self.std_quantile(u);
        let ra = (1.0 - u) * (0.5 * (x * x - alpha * alpha)).exp();
        let rb = u * (0.5 * (x * x - beta * beta)).exp();
        let theta = (self.mu + self.sigma * x).exp();
        Ok(ReparamSample {
            theta,
            dlog_theta_dmu: 1.0 - (ra + rb),
            dlog_theta_dsigma: x - (ra * alpha + rb * beta),
        })
    }

    /// E[θᵏ].
    pub fn moment(&self, k: u32) -> f64 {
        let k = k as f64;
        let shift = k * self.sigma;
        let log_num = log_normal_mass(self.alpha() - shift, self.beta() - shift);
        (k * self.mu + 0.5 * k * k * self.sigma * self.sigma + log_num - self.log_z()).exp()
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m1 = self.moment(1);
        (self.moment(2) - m1 * m1).max(0.0)
    }

    pub fn snr(&self) -> Snr {
        let var = self.variance();
        let mean = self.mean();
        if var <= f64::EPSILON * f64::EPSILON * mean * mean || var == 0.0 {
            Snr { value: f64::INFINITY, degenerate: true }
        } else {
            Snr { value: mean / var.sqrt(), degenerate: false }
        }
    }

    /// Differential entropy of log θ.
    pub fn log_space_entropy(&self) -> f64 {
        let (alpha, beta) = (self.alpha(), self.beta());
        let log_z = self.log_z();
        let ra = (sn::log_pdf(alpha) - log_z).exp();
        let rb = (sn::log_pdf(beta) - log_z).exp();
        0.5 * (2.0 * PI * std::f64::consts::E).ln() + self.sigma.ln() + log_z
            + 0.5 * (alpha * ra - beta * rb)
    }

    /// KL(q ‖ p) for a log-uniform p on the same support, with derivatives in
    /// mu and sigma.
    pub fn kl_log_uniform_with_grad(&self, p: &TruncatedLogUniform) -> Result<KlWithGrad> {
        if p.log_lo != self.log_lo || p.log_hi != self.log_hi {
            return Err(contract(format!(
                "KL needs matching supports: q on [{}, {}], p on [{}, {}]",
                self.log_lo, self.log_hi, p.log_lo, p.log_hi
            )));
        }
        let (alpha, beta) = (self.alpha(), self.beta());
        let sigma = self.sigma;
        let log_z = self.log_z();
        let ra = (sn::log_pdf(alpha) - log_z).exp();
        let rb = (sn::log_pdf(beta) - log_z).exp();
        // Terms with alpha or beta = ±large and ra or rb = 0 must stay 0.
        let mul = |t: f64, r: f64| if r == 0.0 { 0.0 } else { t * r };
        let t = mul(alpha, ra) - mul(beta, rb);
        let kl = p.log_width().ln() - 0.5 * (2.0 * PI * std::f64::consts::E).ln() - sigma.ln() - log_z
            - 0.5 * t;

        let qa = mul(1.0 - alpha * alpha, ra);
        let qb = mul(1.0 - beta * beta, rb);
        let dz_dmu = (ra - rb) / sigma;
        let dt_dmu = (qb - qa) / sigma - t * dz_dmu;
        let dt_dsigma = (mul(beta, qb) - mul(alpha, qa)) / sigma - t * t / sigma;
        Ok(KlWithGrad {
            kl: kl.max(0.0),
            dmu: -dz_dmu - 0.5 * dt_dmu,
            dsigma: -1.0 / sigma - t / sigma - 0.5 * dt_dsigma,
        })
    }
}

/// Reparameterised draw from q at noise level u ∈ (0, 1).
pub fn sample_trunc_log_normal(d: &TruncatedLogNormal, u: f64) -> Result<f64> {
    d.sample(u)
}

/// E[θᵏ] under a truncated log-normal, k ≥ 1.
pub fn trunc_log_normal_moment(d: &TruncatedLogNormal, k: u32) -> Result<f64> {
    if k == 0 {
        return Err(domain("moment order must be at least 1"));
    }
    Ok(d.moment(k))
}

pub fn snr(d: &TruncatedLogNormal) -> Snr {
    d.snr()
}

/// KL(q ‖ p) between a truncated log-normal and the log-uniform on the same support.
pub fn kl_q_p(q: &TruncatedLogNormal, p: &TruncatedLogUniform) -> Result<f64> {
    Ok(q.kl_log_uniform_with_grad(p)?.kl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tln(mu: f64, sigma: f64) -> TruncatedLogNormal {
        TruncatedLogNormal::new(mu, sigma, -20.0, 0.0).unwrap()
    }

    #[test]
    fn cdf_at_zero_is_half() {
        assert_eq!(std_normal::cdf(0.0), 0.5);
    }

    #[test]
    fn inverse_cdf_round_trips() {
        let mut u = 1e-10;
        while u < 1.0 - 1e-10 {
            let back = std_normal::cdf(std_normal::inv_cdf(u));
            assert!((back - u).abs() <= 1e-12 * u.max(1e-4), "u={u} back={back}");
            u = if u < 0.01 { u * 3.0 } else { u + 0.0137 };
        }
        let hi = 1.0 - 1e-10;
        assert!((std_normal::cdf(std_normal::inv_cdf(hi)) - hi).abs() < 1e-12);
    }

    #[test]
    fn log_cdf_is_continuous_across_the_tail_switch() {
        let left = std_normal::log_cdf(-20.0 - 1e-9);
        let right = std_normal::log_cdf(-20.0 + 1e-9);
        assert!((left - right).abs() < 1e-6);
        // Deep tail stays finite and matches the asymptotic leading term.
        let t = -1e3;
        let approx = std_normal::log_pdf(t) - (-t).ln();
        assert!((std_normal::log_cdf(t) - approx).abs() < 1e-5);
    }

    #[test]
    fn inv_log_cdf_handles_underflowing_probabilities() {
        for x in [-45.0, -100.0, -400.0] {
            let lp = std_normal::log_cdf(x);
            assert!((std_normal::inv_log_cdf(lp) - x).abs() < 1e-9 * x.abs());
        }
    }

    #[test]
    fn trunc_cdf_boundaries() {
        assert_eq!(trunc_normal_cdf(1.0, 0.0, 1.0, -1.0, 1.0).unwrap(), 1.0);
        assert_eq!(trunc_normal_cdf(-1.0, 0.0, 1.0, -1.0, 1.0).unwrap(), 0.0);
        let mid = trunc_normal_cdf(0.7, 0.7, 2.0, 0.7 - 100.0, 0.7 + 100.0).unwrap();
        assert!((mid - 0.5).abs() < 1e-15);
    }

    #[test]
    fn trunc_cdf_rejects_bad_input() {
        assert!(matches!(trunc_normal_cdf(f64::NAN, 0.0, 1.0, -1.0, 1.0), Err(Error::Domain(_))));
        assert!(trunc_normal_cdf(0.0, 0.0, 0.0, -1.0, 1.0).is_err());
        assert!(trunc_normal_cdf(0.0, 0.0, 1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn sample_median_and_limits() {
        let d = tln(-3.0, 2.0);
        let median = d.sample(0.5).unwrap();
        let x = std_normal::inv_cdf(0.5 * (std_normal::cdf(d.alpha()) + std_normal::cdf(d.beta())));
        assert!((median.ln() - (d.mu + d.sigma * x)).abs() < 1e-12);
        let low = d.sample(1e-25).unwrap();
        assert!((low.ln() - d.log_lo).abs() < 1e-6);
        assert!(d.sample(0.0).is_err());
        assert!(d.sample(1.0).is_err());
    }

    #[test]
    fn sampler_is_defined_when_the_posterior_sits_outside_the_support() {
        // mu far above log b: Φ(α) and Φ(β) are both ~1 in linear space.
        let d = TruncatedLogNormal::new(3.0, 0.05, -20.0, 0.0).unwrap();
        for u in [1e-6, 0.3, 0.5, 0.9, 1.0 - 1e-6] {
            let y = d.sample(u).unwrap().ln();
            assert!((-20.0..=0.0).contains(&y));
            let back = trunc_normal_cdf(y, d.mu, d.sigma, d.log_lo, d.log_hi).unwrap();
            assert!((back - u).abs() < 1e-9, "u={u} back={back}");
        }
    }

    #[test]
    fn reparam_gradient_matches_finite_differences() {
        let h = 1e-6;
        for &(mu, sigma, u) in &[(-2.0, 1.3, 0.2), (-19.0, 0.7, 0.8), (0.4, 0.3, 0.5), (-10.0, 5.0, 0.01)] {
            let d = tln(mu, sigma);
            let s = d.sample_with_grad(u).unwrap();
            let fd_mu = (tln(mu + h, sigma).sample(u).unwrap().ln()
                - tln(mu - h, sigma).sample(u).unwrap().ln())
                / (2.0 * h);
            let fd_sigma = (tln(mu, sigma + h).sample(u).unwrap().ln()
                - tln(mu, sigma - h).sample(u).unwrap().ln())
                / (2.0 * h);
            assert!((s.dlog_theta_dmu - fd_mu).abs() < 1e-6, "{mu} {sigma} {u}");
            assert!((s.dlog_theta_dsigma - fd_sigma).abs() < 1e-6, "{mu} {sigma} {u}");
        }
    }

    #[test]
    fn mean_in_degenerate_limit() {
        let d = tln(-0.7, 1e-6);
        assert!((d.mean() - (-0.7f64).exp()).abs() < 1e-9);
        // Clamped to the support when mu lies above log b.
        let d = tln(0.5, 1e-4);
        assert!((d.mean() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn variance_is_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let d = tln(rng.random_range(-25.0..5.0), rng.random_range(1e-3..8.0));
            assert!(d.variance() >= 0.0);
        }
    }

    #[test]
    fn snr_decreases_with_sigma() {
        let mut prev = f64::INFINITY;
        for i in 1..=20 {
            let s = tln(-1.0, 0.1 * i as f64).snr();
            assert!(!s.degenerate);
            assert!(s.value < prev);
            prev = s.value;
        }
    }

    #[test]
    fn snr_flags_zero_variance() {
        let d = TruncatedLogNormal { mu: -1.0, sigma: 1e-300, log_lo: -20.0, log_hi: 0.0 };
        let s = d.snr();
        assert!(s.degenerate && s.value.is_infinite());
    }

    #[test]
    fn kl_vanishes_for_flat_posterior() {
        let p = TruncatedLogUniform::new(-20.0, 0.0).unwrap();
        let kl = kl_q_p(&tln(-10.0, 1e4), &p).unwrap();
        assert!(kl < 1e-3, "kl={kl}");
    }

    #[test]
    fn kl_rejects_mismatched_support() {
        let p = TruncatedLogUniform::new(-10.0, 0.0).unwrap();
        assert!(matches!(kl_q_p(&tln(-1.0, 1.0), &p), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let p = TruncatedLogUniform::new(-20.0, 0.0).unwrap();
        let h = 1e-5;
        for &(mu, sigma) in &[(0.0, 1.0), (-5.0, 0.5), (-19.5, 2.0), (1.0, 0.2), (-10.0, 8.0)] {
            let g = tln(mu, sigma).kl_log_uniform_with_grad(&p).unwrap();
            let kl = |m: f64, s: f64| kl_q_p(&tln(m, s), &p).unwrap();
            let fd_mu = (kl(mu + h, sigma) - kl(mu - h, sigma)) / (2.0 * h);
            let fd_sigma = (kl(mu, sigma + h) - kl(mu, sigma - h)) / (2.0 * h);
            assert!((g.dmu - fd_mu).abs() <= 1e-6 * fd_mu.abs().max(1.0), "{mu} {sigma}: {} vs {fd_mu}", g.dmu);
            assert!((g.dsigma - fd_sigma).abs() <= 1e-6 * fd_sigma.abs().max(1.0), "{mu} {sigma}: {} vs {fd_sigma}", g.dsigma);
        }
    }

    #[test]
    fn constructors_validate() {
        assert!(TruncatedLogNormal::new(0.0, -1.0, -20.0, 0.0).is_err());
        assert!(TruncatedLogNormal::new(0.0, 1.0, 0.0, -20.0).is_err());
        assert!(TruncatedLogUniform::new(0.0, 0.0).is_err());
        assert!(trunc_log_normal_moment(&tln(0.0, 1.0), 0).is_err());
    }

    #[test]
    fn pdfs_vanish_outside_support() {
        let q = tln(-3.0, 1.0);
        let p = TruncatedLogUniform::new(-20.0, 0.0).unwrap();
        for theta in [0.0, 1e-12, 1.5, 10.0] {
            assert_eq!(q.pdf(theta), 0.0);
            assert_eq!(p.pdf(theta), 0.0);
        }
    }
}
