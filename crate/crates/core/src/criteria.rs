//! Pruning scores: the two change-in-evidence criteria and three baselines.

use serde::{Deserialize, Serialize};

use crate::distkit::{log_normal_mass, TruncatedLogNormal};
use crate::error::{contract, Error, Result};
use crate::gate::DEFAULT_LOG_LO;
use crate::nn::{Network, StructureId};

/// Reduced prior LogN_[a,b](μ̃_p, σ̃_p²) concentrated near the lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedLogNormalPrior {
    pub mu_tilde_p: f64,
    pub sigma2_tilde_p: f64,
}

impl Default for ReducedLogNormalPrior {
    fn default() -> Self {
        Self { mu_tilde_p: DEFAULT_LOG_LO, sigma2_tilde_p: 1e-12 }
    }
}

impl ReducedLogNormalPrior {
    pub fn new(mu_tilde_p: f64, sigma2_tilde_p: f64) -> Result<Self> {
        if !mu_tilde_p.is_finite() || !(sigma2_tilde_p > 0.0 && sigma2_tilde_p.is_finite()) {
            return Err(contract(format!("reduced log-normal prior needs finite mu and positive sigma², got ({mu_tilde_p}, {sigma2_tilde_p})")));
        }
        Ok(Self { mu_tilde_p, sigma2_tilde_p })
    }
}

/// Reduced prior LogU[a′, b′], stored as log bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedLogUniformPrior {
    pub log_lo: f64,
    pub log_hi: f64,
}

impl ReducedLogUniformPrior {
    /// a′ = 2^-p2, b′ = 2^-p1.
    pub fn from_bits(p1: u32, p2: u32) -> Result<Self> {
        if p2 <= p1 {
            return Err(contract(format!("reduced support needs p2 > p1, got p1 = {p1}, p2 = {p2}")));
        }
        let ln2 = std::f64::consts::LN_2;
        Ok(Self { log_lo: -(p2 as f64) * ln2, log_hi: -(p1 as f64) * ln2 })
    }

    pub fn from_log_bounds(log_lo: f64, log_hi: f64) -> Result<Self> {
        if !(log_lo < log_hi) || !log_lo.is_finite() || !log_hi.is_finite() {
            return Err(contract(format!("reduced support needs finite log_lo < log_hi, got [{log_lo}, {log_hi}]")));
        }
        Ok(Self { log_lo, log_hi })
    }
}

fn non_finite(what: &str, q: &TruncatedLogNormal, value: f64) -> Error {
    Error::Numerical(format!(
        "{what} is {value} for q = (mu {}, sigma {}, support [{}, {}])",
        q.mu, q.sigma, q.log_lo, q.log_hi
    ))
}

/// ΔF for swapping the log-uniform prior on q's support for the reduced
/// log-normal prior. The Gaussian product is folded into
/// −½log(2π(σ_q² + σ̃_p²)) − (μ_q − μ̃_p)²/(2(σ_q² + σ̃_p²)), which is the
/// same quantity without the 1/σ̃_p² cancellation.
pub fn delta_f_lognormal(q: &TruncatedLogNormal, prior: &ReducedLogNormalPrior) -> Result<f64> {
    let (lo, hi) = (q.log_lo, q.log_hi);
    let s2q = q.sigma * q.sigma;
    let s2p = prior.sigma2_tilde_p;
    let total = s2q + s2p;
    let s2qt = s2q * s2p / total;
    let sqt = s2qt.sqrt();
    let sp = s2p.sqrt();
    // Bound offsets from μ̃_q, expanded so a spike prior at a bound does not
    // cancel: b − μ̃_q = ((b − μ_q)σ̃_p² + (b − μ̃_p)σ_q²)/(σ_q² + σ̃_p²).
    let offset = |b: f64| ((b - q.mu) * s2p + (b - prior.mu_tilde_p) * s2q) / total;
    let log_zqt = log_normal_mass(offset(lo) / sqt, offset(hi) / sqt);
    let log_zpt = log_normal_mass((lo - prior.mu_tilde_p) / sp, (hi - prior.mu_tilde_p) / sp);
    if !log_zpt.is_finite() {
        return Err(non_finite("log Z_p~", q, log_zpt));
    }
    let df = log_zqt + (hi - lo).ln() - log_zpt - q.log_z()
        - 0.5 * (2.0 * std::f64::consts::PI * total).ln()
        - (q.mu - prior.mu_tilde_p).powi(2) / (2.0 * total);
    if df.is_nan() || df == f64::INFINITY {
        return Err(non_finite("delta F", q, df));
    }
    Ok(df)
}

/// ΔF for swapping LogU[a, b] for LogU[a′, b′]:
/// log((log b − log a)/(log b′ − log a′)) + log q(a′ ≤ θ ≤ b′).
pub fn delta_f_loguniform(q: &TruncatedLogNormal, prior: &ReducedLogUniformPrior) -> Result<f64> {
    if !(q.log_lo <= prior.log_lo && prior.log_lo < prior.log_hi && prior.log_hi <= q.log_hi) {
        return Err(contract(format!(
            "reduced support [{}, {}] must nest inside [{}, {}]",
            prior.log_lo, prior.log_hi, q.log_lo, q.log_hi
        )));
    }
    let width_ratio = if prior.log_lo == q.log_lo && prior.log_hi == q.log_hi {
        0.0
    } else {
        ((q.log_hi - q.log_lo) / (prior.log_hi - prior.log_lo)).ln()
    };
    let df = width_ratio + q.log_interval_mass(prior.log_lo, prior.log_hi);
    if df.is_nan() {
        return Err(non_finite("delta F", q, df));
    }
    Ok(df)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    BmrsN,
    BmrsU,
    Snr,
    MeanTheta,
    L2,
    None,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 6] =
        [CriterionKind::BmrsN, CriterionKind::BmrsU, CriterionKind::Snr, CriterionKind::MeanTheta, CriterionKind::L2, CriterionKind::None];

    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::BmrsN => "bmrs_n",
            CriterionKind::BmrsU => "bmrs_u",
            CriterionKind::Snr => "snr",
            CriterionKind::MeanTheta => "mean_theta",
            CriterionKind::L2 => "l2",
            CriterionKind::None => "none",
        }
    }

    pub fn is_bmrs(self) -> bool {
        matches!(self, CriterionKind::BmrsN | CriterionKind::BmrsU)
    }
}

impl std::str::FromStr for CriterionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CriterionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion {s:?}; expected one of bmrs_n, bmrs_u, snr, mean_theta, l2, none")))
    }
}

impl std::fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_p1() -> u32 {
    8
}
fn default_p2() -> u32 {
    23
}
fn default_mu_tilde_p() -> f64 {
    DEFAULT_LOG_LO
}
fn default_sigma2_tilde_p() -> f64 {
    1e-12
}

/// Which score to compute and how to threshold it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionConfig {
    pub criterion: CriterionKind,
    #[serde(default = "default_p1")]
    pub p1: u32,
    #[serde(default = "default_p2")]
    pub p2: u32,
    /// Baseline threshold; SNR defaults to 1, E[θ] to 0.1. L2 has no default.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default = "default_mu_tilde_p")]
    pub mu_tilde_p: f64,
    #[serde(default = "default_sigma2_tilde_p")]
    pub sigma2_tilde_p: f64,
}

impl CriterionConfig {
    pub fn new(criterion: CriterionKind) -> Self {
        Self {
            criterion,
            p1: default_p1(),
            p2: default_p2(),
            threshold: None,
            mu_tilde_p: default_mu_tilde_p(),
            sigma2_tilde_p: default_sigma2_tilde_p(),
        }
    }

    pub fn bmrs_u(p1: u32, p2: u32) -> Self {
        Self { p1, p2, ..Self::new(CriterionKind::BmrsU) }
    }

    pub fn with_threshold(mut self, t: f64) -> Self {
        self.threshold = Some(t);
        self
    }

    pub fn effective_threshold(&self) -> Option<f64> {
        self.threshold.or(match self.criterion {
            CriterionKind::Snr => Some(1.0),
            CriterionKind::MeanTheta => Some(0.1),
            _ => None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self.criterion {
            CriterionKind::BmrsN => {
                ReducedLogNormalPrior::new(self.mu_tilde_p, self.sigma2_tilde_p).map_err(|e| Error::Config(e.to_string()))?;
            }
            CriterionKind::BmrsU => {
                ReducedLogUniformPrior::from_bits(self.p1, self.p2).map_err(|e| Error::Config(e.to_string()))?;
            }
            _ => {}
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(Error::Config(format!("threshold must be finite, got {t}")));
            }
        }
        Ok(())
    }

    /// Scores one structure. `prune` follows ΔF ≥ 0 for the BMRS rules and
    /// score < threshold for the baselines; `none` never prunes.
    pub fn score(&self, net: &Network, id: StructureId) -> Result<CriterionScore> {
        let gate = net.gate(id.layer)?;
        if !gate.alive.get(id.index).copied().unwrap_or(false) {
            return Err(contract(format!("structure {id:?} is not a live structure")));
        }
        let (score, prune) = match self.criterion {
            CriterionKind::BmrsN => {
                let prior = ReducedLogNormalPrior::new(self.mu_tilde_p, self.sigma2_tilde_p)?;
                let df = delta_f_lognormal(&gate.posterior(id.index)?, &prior)?;
                (df, df >= 0.0)
            }
            CriterionKind::BmrsU => {
                let prior = ReducedLogUniformPrior::from_bits(self.p1, self.p2)?;
                let df = delta_f_loguniform(&gate.posterior(id.index)?, &prior)?;
                (df, df >= 0.0)
            }
            CriterionKind::Snr => {
                let s = score_snr(&gate.posterior(id.index)?);
                (s, s < self.effective_threshold().unwrap_or(1.0))
            }
            CriterionKind::MeanTheta => {
                let s = score_mean_theta(&gate.posterior(id.index)?);
                (s, s < self.effective_threshold().unwrap_or(0.1))
            }
            CriterionKind::L2 => {
                let s = score_l2(net, id)?;
                (s, self.threshold.is_some_and(|t| s < t))
            }
            CriterionKind::None => (0.0, false),
        };
        Ok(CriterionScore { structure_id: id, score, prune, prunability: prunability(self.criterion, score) })
    }

    /// Scores every live structure, in ascending structure order.
    pub fn score_all(&self, net: &Network) -> Result<Vec<CriterionScore>> {
        net.alive_structures().into_iter().map(|id| self.score(net, id)).collect()
    }
}

/// Higher means "prune sooner". ΔF ranks directly; the baselines rank by
/// their negated score.
pub fn prunability(kind: CriterionKind, score: f64) -> f64 {
    match kind {
        CriterionKind::BmrsN | CriterionKind::BmrsU => score,
        CriterionKind::Snr | CriterionKind::MeanTheta | CriterionKind::L2 => -score,
        CriterionKind::None => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub structure_id: StructureId,
    pub score: f64,
    pub prune: bool,
    pub prunability: f64,
}

/// E[θ]/√Var[θ]; +∞ when the variance vanishes.
pub fn score_snr(q: &TruncatedLogNormal) -> f64 {
    q.snr().value
}

pub fn score_mean_theta(q: &TruncatedLogNormal) -> f64 {
    q.mean()
}

/// Norm of the incoming weights of a structure, bias excluded.
pub fn score_l2(net: &Network, id: StructureId) -> Result<f64> {
    net.structure_l2(id)
}

/// Orders scores most-prunable first; ties go to the lower structure id.
pub fn rank_most_prunable(scores: &[CriterionScore]) -> Vec<CriterionScore> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.prunability.total_cmp(&a.prunability).then(a.structure_id.cmp(&b.structure_id)));
    v
}
