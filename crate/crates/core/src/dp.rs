//! Differentially private client optimizer.
//!
//! Per-example L2 clipping, Gaussian noising of the summed gradient, an Adam
//! update, and a Rényi-DP accountant for the subsampled Gaussian mechanism
//! with ε→σ calibration by bisection. The accountant follows the standard
//! subsampled-Gaussian RDP bound (exact binomial expansion at integer orders,
//! the erfc series at fractional orders) and converts to (ε, δ) with
//! ε = min_α [ rdp(α) + log(1/δ)/(α−1) ].

use crate::nn::{adam_step, AdamParams, AdamState, ModelError, Network};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("clip norm must be positive, got {0}")]
    BadClipNorm(f64),
    #[error("sigma = 0 gives infinite privacy loss; refuse to account")]
    InfinitePrivacyLoss,
    #[error("invalid DP configuration: {0}")]
    BadConfig(String),
    #[error(
        "epsilon target {target} unreachable within sigma bounds \
         [{sigma_lo}, {sigma_hi}] (attainable range [{eps_min:.4}, {eps_max:.4}])"
    )]
    TargetUnreachable {
        target: f64,
        sigma_lo: f64,
        sigma_hi: f64,
        eps_min: f64,
        eps_max: f64,
    },
    #[error("privacy budget exhausted after {steps} steps (ε spent {spent:.4} of {target:.4})")]
    BudgetExhausted {
        steps: u64,
        spent: f64,
        target: f64,
    },
    #[error("per-example gradient length {got} does not match parameter count {expected}")]
    GradLength { got: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// User-facing DP knobs as they appear in experiment configs. Exactly one of
/// `epsilon` / `sigma` must be given; the other is derived at resolution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DpSpec {
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Defaults to 1/N for a private silo of N examples.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

fn default_clip() -> f64 {
    1.0
}

impl DpSpec {
    pub fn with_epsilon(epsilon: f64) -> DpSpec {
        DpSpec {
            epsilon: Some(epsilon),
            sigma: None,
            delta: None,
            clip_norm: default_clip(),
        }
    }

    /// Resolve into a full [`DpConfig`] for a silo of `n` examples trained
    /// `max_steps` iterations at `batch_size`.
    pub fn resolve(
        &self,
        n: usize,
        batch_size: usize,
        max_steps: u64,
    ) -> Result<DpConfig, DpError> {
        if self.clip_norm <= 0.0 {
            return Err(DpError::BadClipNorm(self.clip_norm));
        }
        if n == 0 || batch_size == 0 {
            return Err(DpError::BadConfig("empty silo or batch".into()));
        }
        let delta = match self.delta {
            Some(d) => d,
            None => 1.0 / n as f64,
        };
        if !(0.0..1.0).contains(&delta) || delta == 0.0 {
            return Err(DpError::BadConfig(format!(
                "delta must lie in (0,1), got {delta}"
            )));
        }
        let q = (batch_size as f64 / n as f64).min(1.0);
        let (epsilon_target, sigma) = match (self.epsilon, self.sigma) {
            (Some(eps), None) => {
                if eps <= 0.0 {
                    return Err(DpError::BadConfig(format!(
                        "epsilon target must be positive, got {eps}"
                    )));
                }
                (eps, calibrate_sigma(eps, delta, q, max_steps)?)
            }
            (None, Some(sigma)) => {
                if sigma <= 0.0 {
                    return Err(DpError::InfinitePrivacyLoss);
                }
                // Derived budget: whatever T steps at this sigma spend.
                let (eps, _) = epsilon_after(q, sigma, max_steps, delta)?;
                (eps, sigma)
            }
            (Some(_), Some(_)) => {
                return Err(DpError::BadConfig(
                    "give either epsilon or sigma, not both".into(),
                ))
            }
            (None, None) => {
                return Err(DpError::BadConfig(
                    "one of epsilon or sigma is required".into(),
                ))
            }
        };
        Ok(DpConfig {
            epsilon_target,
            delta,
            clip_norm: self.clip_norm,
            sigma,
            sampling_rate: q,
            max_steps,
        })
    }
}

/// Fully resolved privacy budget machinery for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon_target: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub sigma: f64,
    pub sampling_rate: f64,
    pub max_steps: u64,
}

/// Default RDP order grid: dense at small α where small-ε optima live.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5];
    orders.extend((2..=64).map(f64::from));
    orders.push(128.0);
    orders.push(256.0);
    orders
}

/// Accumulated Rényi divergences per order.
#[derive(Debug, Clone)]
pub struct AccountantState {
    pub steps_taken: u64,
    orders: Vec<f64>,
    rdp_values: Vec<f64>,
    // Per-step RDP cache for the (q, sigma) most recently stepped with.
    cache: Option<(f64, f64, Vec<f64>)>,
}

impl Default for AccountantState {
    fn default() -> Self {
        Self::new()
    }
}

impl AccountantState {
    pub fn new() -> AccountantState {
        let orders = default_orders();
        AccountantState {
            steps_taken: 0,
            rdp_values: vec![0.0; orders.len()],
            orders,
            cache: None,
        }
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn rdp_values(&self) -> &[f64] {
        &self.rdp_values
    }

    /// Account one step of the subsampled Gaussian mechanism.
    pub fn rdp_step(&mut self, q: f64, sigma: f64) -> Result<(), DpError> {
        if sigma <= 0.0 {
            return Err(DpError::InfinitePrivacyLoss);
        }
        let cached = match &self.cache {
            Some((cq, cs, v)) if *cq == q && *cs == sigma => v.clone(),
            _ => {
                let v: Vec<f64> = self
                    .orders
                    .iter()
                    .map(|&alpha| rdp_subsampled_gaussian(q, sigma, alpha))
                    .collect();
                self.cache = Some((q, sigma, v.clone()));
                v
            }
        };
        for (acc, step) in self.rdp_values.iter_mut().zip(&cached) {
            *acc += step;
        }
        self.steps_taken += 1;
        Ok(())
    }

    /// Convert to (ε, best order) at the given δ.
    pub fn epsilon(&self, delta: f64) -> (f64, f64) {
        if self.steps_taken == 0 {
            return (0.0, self.orders[0]);
        }
        let log_inv_delta = (1.0 / delta).ln();
        let mut best = (f64::INFINITY, self.orders[0]);
        for (&alpha, &rdp) in self.orders.iter().zip(&self.rdp_values) {
            let eps = rdp + log_inv_delta / (alpha - 1.0);
            if eps < best.0 {
                best = (eps, alpha);
            }
        }
        best
    }
}

/// ε spent by `steps` iterations of the subsampled Gaussian at (q, σ).
pub fn epsilon_after(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<(f64, f64), DpError> {
    if sigma <= 0.0 {
        return Err(DpError::InfinitePrivacyLoss);
    }
    let orders = default_orders();
    if steps == 0 {
        return Ok((0.0, orders[0]));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = (f64::INFINITY, orders[0]);
    for &alpha in &orders {
        let rdp = rdp_subsampled_gaussian(q, sigma, alpha) * steps as f64;
        let eps = rdp + log_inv_delta / (alpha - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    Ok(best)
}

// ── subsampled Gaussian RDP ─────────────────────────────────────────────

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    // log(eᵃ − eᵇ) for a ≥ b; pairs of series terms always leave a
    // positive partial sum here.
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    let r = erfc(x);
    if r > 0.0 {
        r.ln()
    } else {
        // Laurent tail of erfc for large positive x.
        -std::f64::consts::PI.ln() / 2.0 - x.ln() - x * x - 0.5 * x.powi(-2)
            + 0.625 * x.powi(-4)
            - 37.0 / 24.0 * x.powi(-6)
            + 353.0 / 64.0 * x.powi(-8)
    }
}

/// RDP of one subsampled-Gaussian step at order `alpha`.
/// For q = 1 this is exactly α/(2σ²).
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> f64 {
    debug_assert!(sigma > 0.0 && alpha > 1.0 && (0.0..=1.0).contains(&q));
    if q == 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if (alpha - alpha.round()).abs() < 1e-12 {
        log_a_int(q, sigma, alpha.round() as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    log_a / (alpha - 1.0)
}

/// log A_α via the exact binomial expansion (integer α).
fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (log_q, log_1mq) = (q.ln(), (-q).ln_1p());
    let mut log_a = f64::NEG_INFINITY;
    let mut log_binom = 0.0; // ln C(α, 0)
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let term = log_binom
            + k as f64 * log_q
            + (alpha - k) as f64 * log_1mq
            + (k * k - k) as f64 / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    log_a
}

/// log A_α via the two-sided erfc series (fractional α).
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2s = std::f64::consts::SQRT_2 * sigma;
    let (log_q, log_1mq) = (q.ln(), (-q).ln_1p());
    let half = 0.5f64.ln();

    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    let mut coef = 1.0f64; // binom(alpha, i), with exact sign
    let mut i = 0u64;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_coef = coef.abs().ln();
        let log_t0 = log_coef + fi * log_q + j * log_1mq;
        let log_t1 = log_coef + j * log_q + fi * log_1mq;
        let log_e0 = half + log_erfc((fi - z0) / sqrt2s);
        let log_e1 = half + log_erfc((z0 - j) / sqrt2s);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        i += 1;
        coef *= (alpha - fi) / (fi + 1.0);
        if log_s0.max(log_s1) < -30.0 || i > 4096 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

// ── calibration ─────────────────────────────────────────────────────────

pub const SIGMA_LO: f64 = 0.3;
pub const SIGMA_HI: f64 = 100.0;

/// σ in [0.3, 100] whose T-step ε lands in (0.99·target, target].
pub fn calibrate_sigma(
    epsilon_target: f64,
    delta: f64,
    q: f64,
    max_steps: u64,
) -> Result<f64, DpError> {
    if epsilon_target <= 0.0 {
        return Err(DpError::BadConfig(format!(
            "epsilon target must be positive, got {epsilon_target}"
        )));
    }
    let eps_at = |sigma: f64| -> Result<f64, DpError> {
        Ok(epsilon_after(q, sigma, max_steps, delta)?.0)
    };
    let eps_max = eps_at(SIGMA_LO)?;
    let eps_min = eps_at(SIGMA_HI)?;
    let window_lo = 0.99 * epsilon_target;
    if eps_min > epsilon_target || eps_max <= window_lo {
        return Err(DpError::TargetUnreachable {
            target: epsilon_target,
            sigma_lo: SIGMA_LO,
            sigma_hi: SIGMA_HI,
            eps_min,
            eps_max,
        });
    }
    if eps_max <= epsilon_target {
        // Even the noisiest allowed σ stays within budget and within 1%.
        return Ok(SIGMA_LO);
    }
    // ε(σ) decreases in σ: keep ε(hi) ≤ target < ε(lo).
    let (mut lo, mut hi) = (SIGMA_LO, SIGMA_HI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? > epsilon_target {
            lo = mid;
        } else {
            hi = mid;
        }
        let eps_hi = eps_at(hi)?;
        if eps_hi > window_lo && eps_hi <= epsilon_target {
            return Ok(hi);
        }
    }
    Err(DpError::TargetUnreachable {
        target: epsilon_target,
        sigma_lo: SIGMA_LO,
        sigma_hi: SIGMA_HI,
        eps_min,
        eps_max,
    })
}

// ── mechanism ───────────────────────────────────────────────────────────

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale each per-example gradient to L2 norm at most `c`. Vectors already
/// within the bound are returned bit-identical.
pub fn clip_per_example(grads: &[Vec<f64>], c: f64) -> Result<Vec<Vec<f64>>, DpError> {
    if grads.is_empty() {
        return Err(DpError::EmptyBatch);
    }
    if c <= 0.0 {
        return Err(DpError::BadClipNorm(c));
    }
    Ok(grads
        .iter()
        .map(|g| {
            let norm = l2_norm(g);
            if norm <= c {
                g.clone()
            } else {
                let s = c / norm;
                g.iter().map(|v| v * s).collect()
            }
        })
        .collect())
}

/// (Σ clipped + N(0, σ²C² I)) / batch_size.
pub fn noised_average(
    clipped: &[Vec<f64>],
    sigma: f64,
    c: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>, DpError> {
    if clipped.is_empty() {
        return Err(DpError::EmptyBatch);
    }
    let dim = clipped[0].len();
    let batch = clipped.len() as f64;
    let mut sum = vec![0.0f64; dim];
    for g in clipped {
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    let noise_std = sigma * c;
    if noise_std > 0.0 {
        for s in sum.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *s += noise_std * z;
        }
    }
    for s in sum.iter_mut() {
        *s /= batch;
    }
    Ok(sum)
}

/// One DP client update: clip → noise → Adam, with the accountant advanced,
/// refusing the step if it would exceed the ε budget.
///
/// `per_example_grads` are flattened parameter gradients, one per example,
/// in `net.params()` order.
#[allow(clippy::too_many_arguments)]
pub fn dp_client_step(
    net: &mut Network,
    per_example_grads: &[Vec<f64>],
    cfg: &DpConfig,
    accountant: &mut AccountantState,
    adam: &mut AdamState,
    hp: &AdamParams,
    rng: &mut ChaCha20Rng,
) -> Result<(), DpError> {
    if per_example_grads.is_empty() {
        return Err(DpError::EmptyBatch);
    }
    let expected = net.param_count();
    for g in per_example_grads {
        if g.len() != expected {
            return Err(DpError::GradLength {
                got: g.len(),
                expected,
            });
        }
    }

    // Refuse the step if taking it would exceed the budget.
    if cfg.sigma > 0.0 {
        let mut probe = accountant.clone();
        probe.rdp_step(cfg.sampling_rate, cfg.sigma)?;
        let (spent_after, _) = probe.epsilon(cfg.delta);
        if spent_after > cfg.epsilon_target {
            return Err(DpError::BudgetExhausted {
                steps: accountant.steps_taken,
                spent: spent_after,
                target: cfg.epsilon_target,
            });
        }
        *accountant = probe;
    }

    let clipped = clip_per_example(per_example_grads, cfg.clip_norm)?;
    let avg = noised_average(&clipped, cfg.sigma, cfg.clip_norm, rng)?;

    // Unflatten into per-parameter segments for Adam.
    let mut grads = Vec::with_capacity(net.params().len());
    let mut offset = 0;
    for p in net.params() {
        grads.push(avg[offset..offset + p.data.len()].to_vec());
        offset += p.data.len();
    }
    adam_step(net, &grads, adam, hp)?;
    Ok(())
}

/// Privacy report emitted per run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub epsilon_target: f64,
    pub delta: f64,
    pub sigma: f64,
    #[serde(rename = "C")]
    pub clip_norm: f64,
    pub q: f64,
    pub steps: u64,
    pub epsilon_spent: f64,
    pub best_alpha: f64,
}

impl PrivacyReport {
    pub fn from_state(cfg: &DpConfig, accountant: &AccountantState) -> PrivacyReport {
        let (epsilon_spent, best_alpha) = accountant.epsilon(cfg.delta);
        PrivacyReport {
            epsilon_target: cfg.epsilon_target,
            delta: cfg.delta,
            sigma: cfg.sigma,
            clip_norm: cfg.clip_norm,
            q: cfg.sampling_rate,
            steps: accountant.steps_taken,
            epsilon_spent,
            best_alpha,
        }
    }
}
