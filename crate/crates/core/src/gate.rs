//! Multiplicative noise gate: h = θ · (W h₋₁) with a truncated log-normal
//! posterior over each structure's θ and a log-uniform prior on the same support.

use crate::distkit::{TruncatedLogNormal, TruncatedLogUniform};
use crate::error::{contract, Error, Result};
use crate::nn::{Mode, Param};
use crate::tensor::Tensor;

pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 10.0;
pub const DEFAULT_LOG_LO: f64 = -20.0;
pub const DEFAULT_LOG_HI: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateInit {
    pub mu: f64,
    pub sigma: f64,
    pub log_lo: f64,
    pub log_hi: f64,
}

impl Default for GateInit {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 1.0, log_lo: DEFAULT_LOG_LO, log_hi: DEFAULT_LOG_HI }
    }
}

#[derive(Debug, Clone)]
struct GateCache {
    input: Tensor,
    theta: Vec<f64>,
    /// ∂θ/∂mu and ∂θ/∂log σ per structure; empty in eval mode.
    dtheta_dmu: Vec<f64>,
    dtheta_dlog_sigma: Vec<f64>,
}

/// One gate per structure (neuron or conv channel) along axis 1 of its input.
#[derive(Debug, Clone)]
pub struct NoiseGate {
    pub mu: Param,
    pub log_sigma: Param,
    pub log_lo: f64,
    pub log_hi: f64,
    pub alive: Vec<bool>,
    cache: Option<GateCache>,
}

impl NoiseGate {
    pub fn new(n: usize, init: GateInit) -> Result<Self> {
        if !(init.log_lo < init.log_hi) {
            return Err(contract("gate bounds need log_lo < log_hi"));
        }
        if !(init.sigma > 0.0) {
            return Err(contract("gate sigma init must be positive"));
        }
        Ok(Self {
            mu: Param::new(Tensor::new(vec![n], vec![init.mu; n])?),
            log_sigma: Param::new(Tensor::new(vec![n], vec![init.sigma.ln(); n])?),
            log_lo: init.log_lo,
            log_hi: init.log_hi,
            alive: vec![true; n],
            cache: None,
        })
    }

    /// Restores a gate from stored parameters.
    pub fn from_parts(mu: Vec<f64>, log_sigma: Vec<f64>, log_lo: f64, log_hi: f64, alive: Vec<bool>) -> Result<Self> {
        let n = mu.len();
        if log_sigma.len() != n || alive.len() != n {
            return Err(contract("gate parts have inconsistent lengths"));
        }
        if !(log_lo < log_hi) {
            return Err(contract("gate bounds need log_lo < log_hi"));
        }
        Ok(Self {
            mu: Param::new(Tensor::new(vec![n], mu)?),
            log_sigma: Param::new(Tensor::new(vec![n], log_sigma)?),
            log_lo,
            log_hi,
            alive,
            cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    pub fn n_alive(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// σ as read by every consumer, clamped to [1e-4, 10].
    pub fn sigma(&self, i: usize) -> f64 {
        self.log_sigma.value.data()[i].exp().clamp(SIGMA_MIN, SIGMA_MAX)
    }

    fn sigma_clamped(&self, i: usize) -> bool {
        let s = self.log_sigma.value.data()[i].exp();
        !(SIGMA_MIN..=SIGMA_MAX).contains(&s)
    }

    pub fn prior(&self) -> TruncatedLogUniform {
        TruncatedLogUniform { log_lo: self.log_lo, log_hi: self.log_hi }
    }

    /// Variational posterior of structure `i`.
    pub fn posterior(&self, i: usize) -> Result<TruncatedLogNormal> {
        TruncatedLogNormal::new(self.mu.value.data()[i], self.sigma(i), self.log_lo, self.log_hi)
    }

    /// Eval-mode multipliers: E_q[θ] for live structures, 0 for pruned ones.
    pub fn expected_multipliers(&self) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|i| if self.alive[i] { Ok(self.posterior(i)?.mean()) } else { Ok(0.0) })
            .collect()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, u: Option<&[f64]>) -> Result<Tensor> {
        let (out, theta, dmu, dls) = self.apply(x, mode, u)?;
        self.cache = Some(GateCache { input: x.clone(), theta, dtheta_dmu: dmu, dtheta_dlog_sigma: dls });
        Ok(out)
    }

    /// Eval-mode forward that leaves no cache behind.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.apply(x, Mode::Eval, None)?.0)
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn apply(&self, x: &Tensor, mode: Mode, u: Option<&[f64]>) -> Result<(Tensor, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let n = self.len();
        if x.shape().len() < 2 || x.shape()[1] != n {
            return Err(contract(format!("gate with {n} structures got input of shape {:?}", x.shape())));
        }
        let (theta, dmu, dls) = match (mode, u) {
            (Mode::Train, Some(u)) => {
                if u.len() != n {
                    return Err(contract(format!("gate with {n} structures got {} noise draws", u.len())));
                }
                let mut theta = vec![0.0; n];
                let mut dmu = vec![0.0; n];
                let mut dls = vec![0.0; n];
                for i in 0..n {
                    if !self.alive[i] {
                        continue;
                    }
                    let s = self.posterior(i)?.sample_with_grad(u[i])?;
                    theta[i] = s.theta;
                    dmu[i] = s.theta * s.dlog_theta_dmu;
                    if !self.sigma_clamped(i) {
                        dls[i] = s.theta * s.dlog_theta_dsigma * self.sigma(i);
                    }
                }
                (theta, dmu, dls)
            }
            (Mode::Eval, None) => (self.expected_multipliers()?, Vec::new(), Vec::new()),
            (Mode::Train, None) => return Err(contract("train-mode gate forward needs noise draws")),
            (Mode::Eval, Some(_)) => return Err(contract("eval-mode gate forward takes no noise draws")),
        };
        let out = scale_structures(x, &theta);
        Ok((out, theta, dmu, dls))
    }

    /// Multiplies structure s by `theta[s]` (0 for pruned structures).
    pub fn apply_multipliers(&self, x: &Tensor, theta: &[f64]) -> Result<Tensor> {
        let n = self.len();
        if x.shape().len() < 2 || x.shape()[1] != n || theta.len() != n {
            return Err(contract(format!("gate with {n} structures got input {:?} and {} multipliers", x.shape(), theta.len())));
        }
        let masked: Vec<f64> = theta.iter().zip(&self.alive).map(|(&t, &a)| if a { t } else { 0.0 }).collect();
        Ok(scale_structures(x, &masked))
    }

    /// Propagates `dy` and accumulates gradients of the gate parameters
    /// (train mode only; eval mode treats θ as constant).
    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| contract("gate backward without forward"))?;
        if dy.shape() != cache.input.shape() {
            return Err(contract("gate backward shape mismatch"));
        }
        let n = self.len();
        let inner = dy.row_len() / n.max(1);
        let mut dx = dy.clone();
        let mut dtheta = vec![0.0; n];
        if n == 0 || inner == 0 {
            return Ok(dx);
        }
        for (row_dx, row_x) in dx.data_mut().chunks_mut(n * inner).zip(cache.input.data().chunks(n * inner)) {
            for s in 0..n {
                let block = &mut row_dx[s * inner..(s + 1) * inner];
                let xs = &row_x[s * inner..(s + 1) * inner];
                let mut acc = 0.0;
                for (d, &xv) in block.iter_mut().zip(xs) {
                    acc += *d * xv;
                    *d *= cache.theta[s];
                }
                dtheta[s] += acc;
            }
        }
        if !cache.dtheta_dmu.is_empty() {
            let gmu = self.mu.grad_mut();
            for s in 0..n {
                gmu[s] += dtheta[s] * cache.dtheta_dmu[s];
            }
            let gls = self.log_sigma.grad_mut();
            for s in 0..n {
                gls[s] += dtheta[s] * cache.dtheta_dlog_sigma[s];
            }
        }
        Ok(dx)
    }

    /// Σ over live structures of KL(q_s ‖ LogU[a, b]).
    pub fn kl(&self) -> Result<f64> {
        let prior = self.prior();
        let mut total = 0.0;
        for i in 0..self.len() {
            if self.alive[i] {
                total += self.posterior(i)?.kl_log_uniform_with_grad(&prior)?.kl;
            }
        }
        Ok(total)
    }

    /// Adds `scale` · ∇KL to the gate gradients; returns the unscaled KL.
    pub fn accumulate_kl_grad(&mut self, scale: f64) -> Result<f64> {
        let prior = self.prior();
        let mut total = 0.0;
        for i in 0..self.len() {
            if !self.alive[i] {
                continue;
            }
            let g = self.posterior(i)?.kl_log_uniform_with_grad(&prior)?;
            total += g.kl;
            self.mu.grad_mut()[i] += scale * g.dmu;
            if !self.sigma_clamped(i) {
                let sigma = self.sigma(i);
                self.log_sigma.grad_mut()[i] += scale * g.dsigma * sigma;
            }
        }
        Ok(total)
    }

    /// Marks `indices` as pruned. Returns the sorted indices removed.
    pub fn prune_indices(&mut self, indices: &[usize]) -> Result<Vec<usize>> {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(contract(format!("structure {} listed twice", w[0])));
            }
        }
        for &i in &sorted {
            match self.alive.get(i) {
                None => return Err(contract(format!("structure {i} out of range ({} structures)", self.len()))),
                Some(false) => return Err(contract(format!("structure {i} is already pruned"))),
                Some(true) => {}
            }
        }
        for &i in &sorted {
            self.alive[i] = false;
        }
        Ok(sorted)
    }

    /// Drops pruned entries (parameters and optimiser moments).
    pub(crate) fn compact(&mut self) {
        let keep = self.alive.clone();
        self.mu.retain_grouped(0, 1, &keep);
        self.log_sigma.retain_grouped(0, 1, &keep);
        self.alive.retain(|&a| a);
        self.cache = None;
    }

    pub fn ensure_finite_grads(&self, layer: usize) -> Result<()> {
        for (name, p) in [("mu", &self.mu), ("log_sigma", &self.log_sigma)] {
            if let Some(i) = p.grad().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in gate layer {layer}, {name}[{i}]")));
            }
        }
        Ok(())
    }
}

fn scale_structures(x: &Tensor, theta: &[f64]) -> Tensor {
    let n = theta.len();
    let inner = x.row_len() / n.max(1);
    let mut out = x.clone();
    if n > 0 && inner > 0 {
        for row in out.data_mut().chunks_mut(n * inner) {
            for (block, &t) in row.chunks_mut(inner).zip(theta) {
                block.iter_mut().for_each(|v| *v *= t);
            }
        }
    }
    out
}
