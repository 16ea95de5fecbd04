//! TOML run configuration.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected so that typos surface as errors.

use serde::{Deserialize, Serialize};

use crate::curvlab::{
    default_start, HvpOracle, LabQuadratic, LabRun, MomentumInit, DEFAULT_FD_EPS,
};
use crate::dion::DionConfig;
use crate::distsim::{CommConvention, SimConfig};
use crate::error::{Error, Result};
use crate::problems::{
    curvature_switch_problem, keyed_rng, periodic_switches, quadratic_problem, tiny_mlp_problem,
    CurvatureSwitchSpec, Problem, SpectralSpd,
};
use crate::trigger::{RmmcConfig, SyncPolicy, DEFAULT_EPSILON};

const LANDSCAPE_DOMAIN: u64 = 0x4c61_6e64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    pub n_workers: usize,
    pub comm: CommConvention,
    /// Fixed per-sync byte count, overriding the convention.
    pub full_sync_bytes: Option<u64>,
    pub parallel: bool,
    pub out: String,
    pub policy: PolicySpec,
    pub dion: DionConfig,
    pub problem: ProblemSpec,
    pub compare: CompareSpec,
    pub theorem: TheoremSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            steps: 320,
            n_workers: 4,
            comm: CommConvention::Fullgrad,
            full_sync_bytes: None,
            parallel: false,
            out: "out".into(),
            policy: PolicySpec::default(),
            dion: DionConfig::default(),
            problem: ProblemSpec::default(),
            compare: CompareSpec::default(),
            theorem: TheoremSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    EveryStep,
    Scheduled,
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub tau: f64,
    pub epsilon: f64,
    pub h: u64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            kind: PolicyKind::Adaptive,
            tau: 0.3,
            epsilon: DEFAULT_EPSILON,
            h: 100,
        }
    }
}

impl PolicySpec {
    pub fn to_policy(&self) -> SyncPolicy {
        match self.kind {
            PolicyKind::EveryStep => SyncPolicy::EveryStep,
            PolicyKind::Scheduled => SyncPolicy::Scheduled { h: self.h },
            PolicyKind::Adaptive => SyncPolicy::Adaptive(RmmcConfig {
                epsilon: self.epsilon,
                tau: self.tau,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `σ ξ`.
    #[default]
    Isotropic,
    /// `σ A^{1/2} ξ`: noise covariance proportional to the active Hessian.
    Curvature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSchedule {
    pub first: u64,
    pub length: u64,
    pub period: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        #[serde(default = "default_layers")]
        layers: Vec<[usize; 2]>,
        #[serde(default = "default_quadratic_range")]
        eigen_range: [f64; 2],
        #[serde(default)]
        bias_scale: f64,
        #[serde(default)]
        noise_sigma: f64,
        #[serde(default)]
        noise_model: NoiseModel,
        #[serde(default = "default_init_scale")]
        init_scale: f64,
        #[serde(default)]
        problem_seed: Option<u64>,
    },
    CurvatureSwitch {
        #[serde(default = "default_layers")]
        layers: Vec<[usize; 2]>,
        #[serde(default = "default_flat_range")]
        flat_range: [f64; 2],
        #[serde(default = "default_sharp_range")]
        sharp_range: [f64; 2],
        #[serde(default)]
        switch_steps: Option<Vec<u64>>,
        #[serde(default)]
        schedule: Option<SwitchSchedule>,
        #[serde(default = "default_switch_sigma")]
        noise_sigma: f64,
        #[serde(default)]
        noise_model: NoiseModel,
        #[serde(default = "default_init_scale")]
        init_scale: f64,
        #[serde(default)]
        problem_seed: Option<u64>,
    },
    Mlp {
        #[serde(default = "default_in")]
        in_dim: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_out")]
        out_dim: usize,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default)]
        dataset_seed: u64,
        #[serde(default = "default_init_scale")]
        init_scale: f64,
    },
}

fn default_layers() -> Vec<[usize; 2]> {
    vec![[16, 8], [8, 4]]
}
fn default_quadratic_range() -> [f64; 2] {
    [0.1, 1.0]
}
fn default_flat_range() -> [f64; 2] {
    [0.01, 0.1]
}
fn default_sharp_range() -> [f64; 2] {
    [1.0, 10.0]
}
fn default_switch_sigma() -> f64 {
    0.05
}
fn default_init_scale() -> f64 {
    0.5
}
fn default_in() -> usize {
    8
}
fn default_hidden() -> usize {
    16
}
fn default_out() -> usize {
    4
}
fn default_samples() -> usize {
    256
}
fn default_batch() -> usize {
    16
}

/// Default switch schedule: five sharp steps every seventy, starting at 40.
pub const DEFAULT_SCHEDULE: SwitchSchedule = SwitchSchedule {
    first: 40,
    length: 5,
    period: 70,
};

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec::CurvatureSwitch {
            layers: default_layers(),
            flat_range: default_flat_range(),
            sharp_range: default_sharp_range(),
            switch_steps: None,
            schedule: None,
            noise_sigma: default_switch_sigma(),
            noise_model: NoiseModel::default(),
            init_scale: default_init_scale(),
            problem_seed: None,
        }
    }
}

fn shapes_of(layers: &[[usize; 2]]) -> Result<Vec<(usize, usize)>> {
    if layers.is_empty() {
        return Err(Error::config("problem.layers", "need at least one layer"));
    }
    if layers.iter().any(|l| l[0] == 0 || l[1] == 0) {
        return Err(Error::config("problem.layers", "layer dimensions must be at least 1"));
    }
    Ok(layers.iter().map(|l| (l[0], l[1])).collect())
}

fn check_range(r: [f64; 2], field: &str) -> Result<()> {
    if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
        return Err(Error::config(field, format!("need 0 < lo <= hi, got {r:?}")));
    }
    Ok(())
}

fn check_sigma(s: f64) -> Result<()> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::config("problem.noise_sigma", "must be nonnegative"));
    }
    Ok(())
}

impl ProblemSpec {
    /// Builds the problem; `seed` keys the random landscape unless the
    /// problem pins `problem_seed`.
    pub fn build(&self, seed: u64, steps: u64) -> Result<Box<dyn Problem>> {
        match self {
            ProblemSpec::Quadratic {
                layers,
                eigen_range,
                bias_scale,
                noise_sigma,
                noise_model,
                init_scale,
                problem_seed,
            } => {
                let shapes = shapes_of(layers)?;
                check_range(*eigen_range, "problem.eigen_range")?;
                check_sigma(*noise_sigma)?;
                let d: usize = shapes.iter().map(|(m, n)| m * n).sum();
                let mut rng = keyed_rng(problem_seed.unwrap_or(seed), LANDSCAPE_DOMAIN, 0, 0);
                let spd = SpectralSpd::random(d, eigen_range[0], eigen_range[1], &mut rng)?;
                let b: Vec<f64> = crate::matrix::Matrix::gaussian(d, 1, &mut rng)
                    .scale(*bias_scale)
                    .into_vec();
                let mut p = quadratic_problem(&shapes, spd.matrix(), b, *noise_sigma)?
                    .with_init_scale(*init_scale)
                    .with_curvature_bound(spd.max_eigenvalue());
                if *noise_model == NoiseModel::Curvature {
                    p = p.with_noise_factor(spd.sqrt_matrix())?;
                }
                Ok(Box::new(p))
            }
            ProblemSpec::CurvatureSwitch {
                layers,
                flat_range,
                sharp_range,
                switch_steps,
                schedule,
                noise_sigma,
                noise_model,
                init_scale,
                problem_seed,
            } => {
                let shapes = shapes_of(layers)?;
                check_range(*flat_range, "problem.flat_range")?;
                check_range(*sharp_range, "problem.sharp_range")?;
                check_sigma(*noise_sigma)?;
                let switches = match (switch_steps, schedule) {
                    (Some(_), Some(_)) => {
                        return Err(Error::config(
                            "problem.switch_steps",
                            "give either switch_steps or schedule, not both",
                        ))
                    }
                    (Some(s), None) => s.clone(),
                    (None, Some(s)) => periodic_switches(s.first, s.length, s.period, steps),
                    (None, None) => periodic_switches(
                        DEFAULT_SCHEDULE.first,
                        DEFAULT_SCHEDULE.length,
                        DEFAULT_SCHEDULE.period,
                        steps,
                    ),
                };
                let d: usize = shapes.iter().map(|(m, n)| m * n).sum();
                let mut rng = keyed_rng(problem_seed.unwrap_or(seed), LANDSCAPE_DOMAIN, 1, 0);
                let flat = SpectralSpd::random(d, flat_range[0], flat_range[1], &mut rng)?;
                let sharp = SpectralSpd::random(d, sharp_range[0], sharp_range[1], &mut rng)?;
                let spec = CurvatureSwitchSpec {
                    a_flat: flat.matrix(),
                    a_sharp: sharp.matrix(),
                    switch_steps: switches,
                };
                let mut p = curvature_switch_problem(&shapes, spec, *noise_sigma)?
                    .with_init_scale(*init_scale)
                    .with_curvature_bounds(flat.max_eigenvalue(), sharp.max_eigenvalue());
                if *noise_model == NoiseModel::Curvature {
                    p = p.with_noise_factors(flat.sqrt_matrix(), sharp.sqrt_matrix())?;
                }
                Ok(Box::new(p))
            }
            ProblemSpec::Mlp {
                in_dim,
                hidden,
                out_dim,
                samples,
                batch_size,
                dataset_seed,
                init_scale,
            } => Ok(Box::new(
                tiny_mlp_problem(*in_dim, *hidden, *out_dim, *samples, *batch_size, *dataset_seed)?
                    .with_init_scale(*init_scale),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    /// Fixed interval for the scheduled run; `None` derives it from the
    /// adaptive run's measured sync rate.
    pub h: Option<u64>,
    /// Half-width of the window around a switch step.
    pub window: u64,
}

impl Default for CompareSpec {
    fn default() -> Self {
        CompareSpec { h: None, window: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabProblemKind {
    #[default]
    Isotropic,
    Diagonal,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSpec {
    pub problem: LabProblemKind,
    /// Dimension of the isotropic problem.
    pub dim: usize,
    pub lambda: f64,
    /// Hessian diagonal of the diagonal problem.
    pub values: Vec<f64>,
    /// Gradient of the linear problem.
    pub b: Vec<f64>,
    pub etas: Vec<f64>,
    pub mu: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub init: MomentumInit,
    pub start_radius: f64,
    /// Explicit start point, overriding `start_radius`.
    pub start: Option<Vec<f64>>,
    pub oracle: OracleKind,
    pub fd_eps: f64,
}

impl Default for TheoremSpec {
    fn default() -> Self {
        TheoremSpec {
            problem: LabProblemKind::Isotropic,
            dim: 4,
            lambda: 1.0,
            values: vec![1.0, 100.0],
            b: vec![0.3, -1.2, 0.5],
            etas: vec![0.02, 0.01, 0.005],
            mu: 0.95,
            steps: 300,
            burn_in: 50,
            init: MomentumInit::Equilibrium,
            start_radius: 1e-5,
            start: None,
            oracle: OracleKind::Analytic,
            fd_eps: DEFAULT_FD_EPS,
        }
    }
}

pub struct LabSetup {
    pub problem: LabQuadratic,
    pub oracle: HvpOracle,
    pub template: LabRun,
    pub etas: Vec<f64>,
}

impl TheoremSpec {
    pub fn build(&self) -> Result<LabSetup> {
        let problem = match self.problem {
            LabProblemKind::Isotropic => {
                if self.dim == 0 {
                    return Err(Error::config("theorem.dim", "must be at least 1"));
                }
                LabQuadratic::isotropic(self.dim, self.lambda)?
            }
            LabProblemKind::Diagonal => {
                LabQuadratic::diagonal(&self.values, vec![0.0; self.values.len()])?
            }
            LabProblemKind::Linear => LabQuadratic::linear(self.b.clone())?,
        };
        let oracle = match self.oracle {
            OracleKind::Analytic => problem.analytic_oracle(),
            OracleKind::FiniteDifference => HvpOracle::finite_difference(self.fd_eps)?,
        };
        let x0 = match &self.start {
            Some(s) => s.clone(),
            None => default_start(problem.dim(), self.start_radius),
        };
        if self.etas.is_empty() {
            return Err(Error::config("theorem.etas", "need at least one step size"));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::config("theorem.mu", "must lie in [0, 1)"));
        }
        if self.burn_in >= self.steps {
            return Err(Error::config("theorem.burn_in", "must be smaller than steps"));
        }
        let template = LabRun {
            eta: self.etas[0],
            mu: self.mu,
            steps: self.steps,
            burn_in: self.burn_in,
            init: self.init,
            x0,
            m0: None,
        };
        Ok(LabSetup {
            problem,
            oracle,
            template,
            etas: self.etas.clone(),
        })
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sim_config(&self, threads: Option<usize>) -> Result<SimConfig> {
        let cfg = SimConfig {
            n_workers: self.n_workers,
            policy: self.policy.to_policy(),
            dion: self.dion.clone(),
            steps: self.steps,
            seed: self.seed,
            comm: self.comm,
            full_sync_bytes: self.full_sync_bytes,
            parallel: self.parallel,
            threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_problem(&self) -> Result<Box<dyn Problem>> {
        let p = self.problem.build(self.seed, self.steps)?;
        Ok(p)
    }
}
