//! Relative maximum momentum change (RMMC) and the per-step sync decision.
//!
//! RMMC is measured on the accumulated buffer `B = M + G`, one value per layer
//! per worker; the cluster takes the maximum. The previous norm starts at 0,
//! so the first step always synchronizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmmcConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub tau: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl RmmcConfig {
    pub fn new(tau: f64) -> Self {
        RmmcConfig {
            epsilon: DEFAULT_EPSILON,
            tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyncPolicy {
    EveryStep,
    Scheduled { h: u64 },
    Adaptive(RmmcConfig),
}

impl SyncPolicy {
    pub fn adaptive(tau: f64) -> Self {
        SyncPolicy::Adaptive(RmmcConfig::new(tau))
    }

    /// Whether the policy needs the per-step flag all-reduce.
    pub fn uses_flag(&self) -> bool {
        matches!(self, SyncPolicy::Adaptive(_))
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            SyncPolicy::Adaptive(c) => c.epsilon,
            _ => DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SyncPolicy::EveryStep => Ok(()),
            SyncPolicy::Scheduled { h } if h >= 1 => Ok(()),
            SyncPolicy::Scheduled { .. } => Err(Error::config("policy.h", "must be at least 1")),
            SyncPolicy::Adaptive(c) => {
                if !(c.epsilon > 0.0 && c.epsilon.is_finite()) {
                    return Err(Error::config("policy.epsilon", "must be positive"));
                }
                // tau = 0 is allowed: it reduces to synchronizing every step.
                if !(c.tau >= 0.0 && c.tau.is_finite()) {
                    return Err(Error::config("policy.tau", "must be a nonnegative number"));
                }
                Ok(())
            }
        }
    }
}

pub fn layer_rmmc(prev_norm: f64, cur_norm: f64, epsilon: f64) -> f64 {
    (cur_norm - prev_norm).abs() / (prev_norm + epsilon)
}

/// Maximum over every layer of every worker.
pub fn global_max_rmmc(per_worker: &[Vec<f64>]) -> Result<f64> {
    let mut it = per_worker.iter().flatten().copied();
    let first = it
        .next()
        .ok_or_else(|| Error::Precondition("global_max_rmmc needs at least one value".into()))?;
    Ok(it.fold(first, f64::max))
}

pub fn decide(policy: &SyncPolicy, step: u64, global_rmmc: f64) -> bool {
    match *policy {
        SyncPolicy::EveryStep => true,
        SyncPolicy::Scheduled { h } => step.is_multiple_of(h),
        SyncPolicy::Adaptive(c) => global_rmmc > c.tau,
    }
}

/// Replays a recorded single-layer norm trace through the trigger and counts
/// sync decisions. `norms[t]` is the buffer norm at step `t + 1`.
pub fn count_syncs(norms: &[f64], policy: &SyncPolicy) -> usize {
    let eps = policy.epsilon();
    let mut prev = 0.0;
    let mut count = 0;
    for (i, &cur) in norms.iter().enumerate() {
        let r = layer_rmmc(prev, cur, eps);
        prev = cur;
        if decide(policy, i as u64 + 1, r) {
            count += 1;
        }
    }
    count
}
