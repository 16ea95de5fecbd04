//! Wall-clock projection: per-step time of every-step Dion versus the
//! adaptive policy on a given network, and the resulting speedup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub t_compute_ms: f64,
    pub t_opt_ms: f64,
    pub t_flag_ms: f64,
    pub t_sync_ms: f64,
    pub sync_rate: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel {
            t_compute_ms: 3375.0,
            t_opt_ms: 39.0,
            t_flag_ms: 0.5,
            t_sync_ms: 70.0,
            sync_rate: 0.01,
        }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_compute_ms", self.t_compute_ms),
            ("t_opt_ms", self.t_opt_ms),
            ("t_flag_ms", self.t_flag_ms),
            ("t_sync_ms", self.t_sync_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be a nonnegative time"));
            }
        }
        if !(0.0..=1.0).contains(&self.sync_rate) {
            return Err(Error::config("sync_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn with_sync(self, t_sync_ms: f64) -> Self {
        TimingModel { t_sync_ms, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub name: String,
    pub t_sync_ms: f64,
}

impl NetworkProfile {
    pub fn new(name: &str, t_sync_ms: f64) -> Self {
        NetworkProfile {
            name: name.to_string(),
            t_sync_ms,
        }
    }
}

pub fn default_profiles() -> Vec<NetworkProfile> {
    vec![
        NetworkProfile::new("infiniband", 70.0),
        NetworkProfile::new("10gbe", 700.0),
        NetworkProfile::new("wan", 12000.0),
    ]
}

pub fn step_time_baseline(tm: &TimingModel) -> f64 {
    tm.t_compute_ms + tm.t_opt_ms + tm.t_sync_ms
}

pub fn step_time_adaptive(tm: &TimingModel) -> f64 {
    tm.t_compute_ms + tm.t_opt_ms + tm.t_flag_ms + tm.sync_rate * tm.t_sync_ms
}

pub fn speedup(tm: &TimingModel) -> Result<f64> {
    let a = step_time_adaptive(tm);
    if !(a > 0.0) {
        return Err(Error::Precondition(
            "adaptive step time must be positive to form a speedup".into(),
        ));
    }
    Ok(step_time_baseline(tm) / a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub network: String,
    pub t_sync_ms: f64,
    pub baseline_ms: f64,
    pub adaptive_ms: f64,
    pub speedup: f64,
}

/// One row per profile; `base.t_sync_ms` is replaced by each profile's value.
pub fn project_table(profiles: &[NetworkProfile], base: &TimingModel) -> Result<Vec<ProjectionRow>> {
    base.validate()?;
    profiles
        .iter()
        .map(|p| {
            if !(p.t_sync_ms >= 0.0) {
                return Err(Error::config(
                    format!("profile.{}.t_sync_ms", p.name),
                    "must be nonnegative",
                ));
            }
            let tm = base.with_sync(p.t_sync_ms);
            Ok(ProjectionRow {
                network: p.name.clone(),
                t_sync_ms: p.t_sync_ms,
                baseline_ms: step_time_baseline(&tm),
                adaptive_ms: step_time_adaptive(&tm),
                speedup: speedup(&tm)?,
            })
        })
        .collect()
}
