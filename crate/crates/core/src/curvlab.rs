//! Numerical check of the first-order link between the relative momentum
//! change and directional curvature.
//!
//! Along plain heavy-ball descent `x_t = x_{t-1} − η M_{t-1}`,
//! `M_t = μ M_{t-1} + ∇F(x_t)`, the measured relative change
//! `|‖M_t‖ − ‖M_{t-1}‖| / ‖M_{t-1}‖` is compared with `|η κ_M + B_t|`, where
//! `κ_M = vᵀ∇²F v`, `v = M_{t-1}/‖M_{t-1}‖` and
//! `B_t = (1−μ) − vᵀ∇F(x_{t-1})/‖M_{t-1}‖`. The lab works on flat vectors
//! and measures the change on the momentum itself, not on a buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, matvec, norm2, Matrix};
use crate::problems::check_symmetric;

/// Step-size guard: `η ‖M‖ L` must stay below this.
pub const STEP_GUARD: f64 = 0.1;

/// Medians at or below this are rounding noise; ratios are then not reported.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum HvpOracle {
    AnalyticQuadratic(Matrix),
    FiniteDifference { fd_eps: f64 },
}

impl HvpOracle {
    pub fn analytic(a: Matrix) -> Result<Self> {
        check_symmetric(&a, "oracle.A")?;
        Ok(HvpOracle::AnalyticQuadratic(a))
    }

    pub fn finite_difference(fd_eps: f64) -> Result<Self> {
        if !(fd_eps > 0.0) {
            return Err(Error::config("oracle.fd_eps", "must be positive"));
        }
        Ok(HvpOracle::FiniteDifference { fd_eps })
    }
}

/// Deterministic objective on flat vectors: `F(x) = ½ xᵀAx + bᵀx`.
///
/// `A = 0` gives a linear objective with constant gradient `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabQuadratic {
    a: Matrix,
    b: Vec<f64>,
    max_curvature: f64,
}

impl LabQuadratic {
    /// Diagonal Hessian; the largest entry is the curvature bound.
    pub fn diagonal(values: &[f64], b: Vec<f64>) -> Result<Self> {
        if values.is_empty() || b.len() != values.len() {
            return Err(Error::config("theorem.problem", "dimension mismatch or empty"));
        }
        if values.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::config("theorem.problem", "curvatures must be nonnegative"));
        }
        Ok(LabQuadratic {
            a: Matrix::diag(values),
            b,
            max_curvature: values.iter().copied().fold(0.0, f64::max),
        })
    }

    pub fn isotropic(d: usize, lambda: f64) -> Result<Self> {
        LabQuadratic::diagonal(&vec![lambda; d], vec![0.0; d])
    }

    pub fn linear(b: Vec<f64>) -> Result<Self> {
        let d = b.len();
        LabQuadratic::diagonal(&vec![0.0; d], b)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn hessian(&self) -> &Matrix {
        &self.a
    }

    pub fn max_curvature(&self) -> f64 {
        self.max_curvature
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = matvec(&self.a, x).expect("dimension");
        for (gi, bi) in g.iter_mut().zip(&self.b) {
            *gi += bi;
        }
        g
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        0.5 * dot(x, &matvec(&self.a, x).expect("dimension")) + dot(&self.b, x)
    }

    pub fn analytic_oracle(&self) -> HvpOracle {
        HvpOracle::AnalyticQuadratic(self.a.clone())
    }
}

pub fn directional_curvature(
    oracle: &HvpOracle,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    v: &[f64],
) -> Result<f64> {
    let nv = norm2(v);
    if (nv - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "direction must be a unit vector, has norm {nv}"
        )));
    }
    match oracle {
        HvpOracle::AnalyticQuadratic(a) => Ok(dot(v, &matvec(a, v)?)),
        HvpOracle::FiniteDifference { fd_eps } => {
            let h = *fd_eps;
            let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
            let (gp, gm) = (grad(&xp), grad(&xm));
            let hv: Vec<f64> = gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * h)).collect();
            Ok(dot(v, &hv))
        }
    }
}

/// `(1−μ) − Mᵀ∇F / ‖M‖²`.
pub fn equilibrium_bias(grad: &[f64], m: &[f64], mu: f64) -> Result<f64> {
    let mm = dot(m, m);
    if !(mm > 0.0) {
        return Err(Error::Precondition("equilibrium bias needs nonzero momentum".into()));
    }
    Ok((1.0 - mu) - dot(m, grad) / mm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MomentumInit {
    /// `M_0 = ∇F(x_0) / (1−μ)`: the momentum already at its steady magnitude.
    #[default]
    Equilibrium,
    /// `M_0 = ∇F(x_0)`: momentum still building up.
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabRun {
    pub eta: f64,
    pub mu: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub init: MomentumInit,
    pub x0: Vec<f64>,
    /// Explicit initial momentum; overrides `init` when set.
    pub m0: Option<Vec<f64>>,
}

/// Unit all-ones direction scaled to `radius`.
pub fn default_start(d: usize, radius: f64) -> Vec<f64> {
    vec![radius / (d as f64).sqrt(); d]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureProbe {
    pub step: usize,
    pub kappa_m: f64,
    pub bias: f64,
    pub measured_rmmc: f64,
    pub predicted_rmmc: f64,
    pub residual: f64,
}

/// Full trajectory of probes, including the burn-in steps.
pub fn theorem_trace(problem: &LabQuadratic, oracle: &HvpOracle, run: &LabRun) -> Result<Vec<CurvatureProbe>> {
    if run.x0.len() != problem.dim() {
        return Err(Error::config("theorem.start", "start point has the wrong dimension"));
    }
    if !(run.eta > 0.0) || !(0.0..1.0).contains(&run.mu) {
        return Err(Error::config("theorem", "need eta > 0 and mu in [0, 1)"));
    }
    let grad = |x: &[f64]| problem.gradient(x);
    let mut x = run.x0.clone();
    let g0 = grad(&x);
    let mut m: Vec<f64> = match (&run.m0, run.init) {
        (Some(m0), _) if m0.len() != problem.dim() => {
            return Err(Error::config("theorem.m0", "initial momentum has the wrong dimension"))
        }
        (Some(m0), _) => m0.clone(),
        (None, MomentumInit::Equilibrium) => g0.iter().map(|g| g / (1.0 - run.mu)).collect(),
        (None, MomentumInit::Gradient) => g0,
    };
    let l = problem.max_curvature();
    let mut out = Vec::with_capacity(run.steps);
    for step in 1..=run.steps {
        let mnorm = norm2(&m);
        let guard = run.eta * mnorm * l;
        if !(guard < STEP_GUARD) {
            return Err(Error::StepSizeGuard { step, value: guard });
        }
        let v: Vec<f64> = m.iter().map(|a| a / mnorm).collect();
        let g_prev = grad(&x);
        let kappa_m = directional_curvature(oracle, grad, &x, &v)?;
        let bias = equilibrium_bias(&g_prev, &m, run.mu)?;
        let predicted_rmmc = (run.eta * kappa_m + bias).abs();

        for (xi, mi) in x.iter_mut().zip(&m) {
            *xi -= run.eta * mi;
        }
        let g = grad(&x);
        for (mi, gi) in m.iter_mut().zip(&g) {
            *mi = run.mu * *mi + gi;
        }
        let measured_rmmc = (norm2(&m) - mnorm).abs() / mnorm;
        out.push(CurvatureProbe {
            step,
            kappa_m,
            bias,
            measured_rmmc,
            predicted_rmmc,
            residual: (measured_rmmc - predicted_rmmc).abs(),
        });
    }
    Ok(out)
}

/// Residuals `|measured − predicted|` for the steps after burn-in.
pub fn theorem_residual(problem: &LabQuadratic, oracle: &HvpOracle, run: &LabRun) -> Result<Vec<f64>> {
    Ok(theorem_trace(problem, oracle, run)?
        .into_iter()
        .filter(|p| p.step > run.burn_in)
        .map(|p| p.residual)
        .collect())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub eta: f64,
    pub median_residual: f64,
    /// `median_residual / eta²`, the empirical constant of the second-order term.
    pub constant: f64,
    /// Previous row's median over this one; `None` for the first row or when
    /// both residuals sit at rounding level.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderStudy {
    pub rows: Vec<OrderRow>,
    pub traces: Vec<Vec<CurvatureProbe>>,
}

impl OrderStudy {
    pub fn ratios(&self) -> Vec<Option<f64>> {
        self.rows.iter().skip(1).map(|r| r.ratio).collect()
    }

    /// Every reported ratio reaches `min`; unreported ones are skipped.
    pub fn passes(&self, min: f64) -> bool {
        self.ratios().into_iter().flatten().all(|r| r >= min)
    }

    pub fn all_not_applicable(&self) -> bool {
        self.ratios().iter().all(Option::is_none)
    }
}

pub fn convergence_order_study(
    problem: &LabQuadratic,
    oracle: &HvpOracle,
    etas: &[f64],
    template: &LabRun,
) -> Result<OrderStudy> {
    if etas.len() < 3 {
        return Err(Error::Precondition(format!(
            "order study needs at least 3 step sizes, got {}",
            etas.len()
        )));
    }
    for w in etas.windows(2) {
        if ((w[1] - 0.5 * w[0]) / w[0]).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "step sizes must halve each time, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let mut rows: Vec<OrderRow> = Vec::new();
    let mut traces = Vec::new();
    for &eta in etas {
        let run = LabRun {
            eta,
            ..template.clone()
        };
        let trace = theorem_trace(problem, oracle, &run)?;
        let post: Vec<f64> = trace
            .iter()
            .filter(|p| p.step > run.burn_in)
            .map(|p| p.residual)
            .collect();
        let med = median(&post).ok_or_else(|| {
            Error::Precondition("no steps remain after burn-in".into())
        })?;
        let ratio = rows.last().and_then(|prev| {
            if prev.median_residual <= RESIDUAL_FLOOR && med <= RESIDUAL_FLOOR {
                None
            } else {
                Some(prev.median_residual / med)
            }
        });
        rows.push(OrderRow {
            eta,
            median_residual: med,
            constant: med / (eta * eta),
            ratio,
        });
        traces.push(trace);
    }
    Ok(OrderStudy { rows, traces })
}
