//! Discrete Bernoulli diffusion over solution indicator bits.
//!
//! Each variable follows an independent 2-state chain with symmetric
//! doubly-stochastic transition matrices Q_t = [[1-b_t, b_t], [b_t, 1-b_t]].
//! The cumulative product Qbar_t stays in the same family, so a schedule is
//! fully described by the per-step flip probabilities and their cumulative
//! flip probabilities.

mod sampling;

pub use sampling::{
    local_rewrite, posterior_logprob_grad, reverse_step, reverse_step_to, sample_heatmap, sl_loss,
    sl_loss_at, LocalRewriteConfig, ReverseStep, SlLossValue,
};
pub(crate) use sampling::SAMPLING_BN;

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Probability clamp applied before logarithms in sampling code.
pub const PROB_EPS: f64 = 1e-6;

/// How the noise levels are laid out over the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BetaSpec {
    /// Linear interpolation from `min` to `max` over the T steps.
    Linear { min: f64, max: f64 },
    /// Cosine cumulative schedule; per-step betas are recovered from the
    /// cumulative stay-minus-flip products and clamped to (0, 0.5].
    Cosine,
}

impl BetaSpec {
    /// Default used across the lab: linear 1e-4 .. 0.5, which drives the
    /// cumulative kernel to the uniform distribution by the final step.
    pub fn default_linear() -> Self {
        BetaSpec::Linear { min: 1e-4, max: 0.5 }
    }
}

/// Noise schedule with per-step and cumulative 2x2 transition matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    /// Per-step flip probabilities b_1..b_T (index t-1).
    betas: Vec<f64>,
    /// Cumulative flip probabilities: off-diagonal of Qbar_t (index t-1).
    qbar_flip: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds a schedule of `t_max` steps from a beta layout.
    pub fn new(t_max: usize, spec: BetaSpec) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = match spec {
            BetaSpec::Linear { min, max } => {
                if !(0.0 < min && min <= max && max <= 0.5) {
                    return Err(Error::Config(format!(
                        "linear betas must satisfy 0 < min <= max <= 0.5, got ({min}, {max})"
                    )));
                }
                (0..t_max)
                    .map(|i| {
                        if t_max == 1 {
                            max
                        } else {
                            // Clamp: the endpoint can land one ulp above max.
                            (min + (max - min) * i as f64 / (t_max - 1) as f64).min(max)
                        }
                    })
                    .collect()
            }
            BetaSpec::Cosine => {
                // Cumulative target: 1 - 2*qbar_t = f(t)/f(0) with the shifted
                // cosine-squared profile.
                let f = |t: f64| ((t / t_max as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2);
                let mut betas = Vec::with_capacity(t_max);
                let mut prev = 1.0;
                for t in 1..=t_max {
                    let cur = f(t as f64) / f(0.0);
                    let ratio = (cur / prev).clamp(0.0, 1.0);
                    let beta = ((1.0 - ratio) / 2.0).clamp(1e-9, 0.5);
                    betas.push(beta);
                    prev = (1.0 - 2.0 * beta) * prev;
                }
                betas
            }
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit per-step flip probabilities.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        for (i, b) in betas.iter().enumerate() {
            if !(0.0 < *b && *b <= 0.5) {
                return Err(Error::Config(format!(
                    "beta_{} = {b} outside (0, 0.5]",
                    i + 1
                )));
            }
        }
        let mut qbar_flip = Vec::with_capacity(betas.len());
        let mut flip = 0.0f64;
        for &b in &betas {
            // flip_t = flip_{t-1} * (1 - b) + (1 - flip_{t-1}) * b
            flip = flip * (1.0 - b) + (1.0 - flip) * b;
            qbar_flip.push(flip);
        }
        Ok(Self { betas, qbar_flip })
    }

    /// Total number of steps T.
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Flip probability of the per-step kernel Q_t (t in 1..=T).
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Flip probability of the cumulative kernel Qbar_t; t = 0 is the
    /// identity kernel.
    pub fn qbar_flipprob(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.qbar_flip[t - 1]
        }
    }

    /// Per-step transition matrix Q_t as rows [from][to].
    pub fn q_matrix(&self, t: usize) -> [[f64; 2]; 2] {
        let b = self.beta(t);
        [[1.0 - b, b], [b, 1.0 - b]]
    }

    /// Cumulative transition matrix Qbar_t.
    pub fn qbar_matrix(&self, t: usize) -> [[f64; 2]; 2] {
        let f = self.qbar_flipprob(t);
        [[1.0 - f, f], [f, 1.0 - f]]
    }

    /// Effective flip probability of the kernel from time `t_lo` to `t_hi`
    /// (the product Q_{t_lo+1} ... Q_{t_hi}).
    pub fn flip_between(&self, t_lo: usize, t_hi: usize) -> f64 {
        assert!(t_lo < t_hi && t_hi <= self.t_max());
        let lo = 1.0 - 2.0 * self.qbar_flipprob(t_lo);
        let hi = 1.0 - 2.0 * self.qbar_flipprob(t_hi);
        if lo <= 0.0 {
            // Chain already uniform at t_lo; any further kernel is uniform too.
            return 0.5;
        }
        ((1.0 - hi / lo) / 2.0).clamp(0.0, 0.5)
    }

    /// Descending inference/rollout time grid with `steps` entries, stride
    /// uniform from T down to T/steps.
    pub fn time_grid(&self, steps: usize) -> Result<Vec<usize>> {
        self.time_grid_from(self.t_max(), steps)
    }

    /// Stride-uniform grid descending from `t_start` (used by partial
    /// re-noising, where denoising restarts below T). The grid always ends at
    /// t = 1 so the final clean-data prediction is made at the sharpest noise
    /// level.
    pub fn time_grid_from(&self, t_start: usize, steps: usize) -> Result<Vec<usize>> {
        if t_start < 1 || t_start > self.t_max() {
            return Err(Error::Config(format!(
                "grid start {t_start} outside 1..={}",
                self.t_max()
            )));
        }
        if steps < 1 || steps > t_start {
            return Err(Error::Config(format!("steps {steps} outside 1..={t_start}")));
        }
        if steps == 1 {
            return Ok(vec![t_start]);
        }
        let mut grid: Vec<usize> = (0..steps)
            .map(|k| {
                let frac = k as f64 / (steps - 1) as f64;
                ((t_start as f64 - (t_start as f64 - 1.0) * frac).round() as usize).clamp(1, t_start)
            })
            .collect();
        grid.dedup();
        Ok(grid)
    }
}

/// A noisy solution state x_t.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisyState {
    pub t: usize,
    pub bits: Vec<u8>,
}

/// Samples x_t ~ q(x_t | x_0): each bit independently keeps its value with
/// probability 1 - qbar_flip(t).
pub fn forward_sample(x0_bits: &[u8], t: usize, sched: &DiffusionSchedule, rng: &mut Rng) -> Result<NoisyState> {
    if t < 1 || t > sched.t_max() {
        return Err(Error::Config(format!(
            "timestep {t} outside 1..={}",
            sched.t_max()
        )));
    }
    let flip = sched.qbar_flipprob(t);
    let bits = x0_bits
        .iter()
        .map(|&b| if rng.gen::<f64>() < flip { 1 - b } else { b })
        .collect();
    Ok(NoisyState { t, bits })
}

/// Samples the Bern(0.5) initial state x_T.
pub fn sample_terminal_noise(num_vars: usize, t_max: usize, rng: &mut Rng) -> NoisyState {
    let bits = (0..num_vars).map(|_| u8::from(rng.gen::<f64>() < 0.5)).collect();
    NoisyState { t: t_max, bits }
}

/// Per-bit distribution over the previous state, as [p(0), p(1)].
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDist {
    pub t_lo: usize,
    pub probs: Vec<[f64; 2]>,
}

/// Model-substituted posterior for one bit over the kernel t_lo -> t_hi:
///
/// p(x_lo = s) = sum_c x0_prob(c) * Q_eff[s, b] * Qbar_lo[c, s] / Qbar_hi[c, b]
///
/// where b is the observed bit at t_hi. The result sums to one analytically.
pub fn posterior_bit(
    sched: &DiffusionSchedule,
    bit_hi: u8,
    x0_prob1: f64,
    t_hi: usize,
    t_lo: usize,
) -> [f64; 2] {
    let beta_eff = sched.flip_between(t_lo, t_hi);
    let q_eff = [[1.0 - beta_eff, beta_eff], [beta_eff, 1.0 - beta_eff]];
    let qbar_lo = sched.qbar_matrix(t_lo);
    let qbar_hi = sched.qbar_matrix(t_hi);
    let b = bit_hi as usize;
    let p = [1.0 - x0_prob1, x0_prob1];
    let mut out = [0.0f64; 2];
    for (s, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..2 {
            acc += p[c] * q_eff[s][b] * qbar_lo[c][s] / qbar_hi[c][b];
        }
        *slot = acc;
    }
    out
}

/// Posterior over x_{t-1} for every bit of a noisy state, with the network's
/// per-bit class-1 probabilities substituted for the clean data.
pub fn posterior(
    xt: &NoisyState,
    x0_prob: &[f64],
    sched: &DiffusionSchedule,
) -> Result<PosteriorDist> {
    posterior_to(xt, x0_prob, sched, xt.t.checked_sub(1).ok_or_else(|| {
        Error::Config("posterior undefined at t = 0".into())
    })?)
}

/// Generalized posterior over x_{t_lo} for a strided reverse step.
pub fn posterior_to(
    xt: &NoisyState,
    x0_prob: &[f64],
    sched: &DiffusionSchedule,
    t_lo: usize,
) -> Result<PosteriorDist> {
    if xt.t < 1 || xt.t > sched.t_max() {
        return Err(Error::Config(format!(
            "state timestep {} outside 1..={}",
            xt.t,
            sched.t_max()
        )));
    }
    if t_lo >= xt.t {
        return Err(Error::Config(format!(
            "target timestep {t_lo} must precede state timestep {}",
            xt.t
        )));
    }
    if x0_prob.len() != xt.bits.len() {
        return Err(Error::DimensionMismatch(format!(
            "x0 probabilities ({}) vs state bits ({})",
            x0_prob.len(),
            xt.bits.len()
        )));
    }
    for &p in x0_prob {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::Numerical(format!("x0 probability {p} outside [0,1]")));
        }
    }
    let probs = xt
        .bits
        .iter()
        .zip(x0_prob)
        .map(|(&b, &p1)| posterior_bit(sched, b, p1, xt.t, t_lo))
        .collect();
    Ok(PosteriorDist { t_lo, probs })
}

/// Samples a state from a per-bit posterior, returning the state and the
/// summed log-probability of the sampled values (clamped at [`PROB_EPS`]).
pub fn sample_posterior(dist: &PosteriorDist, rng: &mut Rng) -> (NoisyState, f64) {
    let mut bits = Vec::with_capacity(dist.probs.len());
    let mut logprob = 0.0;
    for pr in &dist.probs {
        let total = pr[0] + pr[1];
        let p1 = (pr[1] / total).clamp(0.0, 1.0);
        let bit = u8::from(rng.gen::<f64>() < p1);
        let p_sampled = if bit == 1 { p1 } else { 1.0 - p1 };
        logprob += p_sampled.clamp(PROB_EPS, 1.0 - PROB_EPS).ln();
        bits.push(bit);
    }
    (
        NoisyState {
            t: dist.t_lo,
            bits,
        },
        logprob,
    )
}
