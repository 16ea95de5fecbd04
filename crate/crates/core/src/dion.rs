//! The Dion update for a single layer and the local (unsynchronized) path.
//!
//! A sync step forms the buffer `B = M + G`, runs one warm-started power
//! iteration against the previous right factor `Q`, keeps the untransmitted
//! residual in the buffer (error feedback) and moves the parameters along the
//! orthonormal direction `P Qᵀ` scaled by `sqrt(m/n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{
    column_normalize, matmul, matmul_nt, matmul_tn, orthonormalize_columns, random_orthonormal,
    Matrix, MatrixError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DionConfig {
    pub eta: f64,
    pub mu: f64,
    pub rank_fraction: f64,
    /// Step size on local steps. `None` means "same as `eta`".
    pub eta_local: Option<f64>,
    pub weight_decay: f64,
    /// Power iterations per sync step.
    pub power_iters: usize,
}

impl Default for DionConfig {
    fn default() -> Self {
        DionConfig {
            eta: 0.02,
            mu: 0.95,
            rank_fraction: 0.125,
            eta_local: None,
            weight_decay: 0.01,
            power_iters: 1,
        }
    }
}

impl DionConfig {
    pub fn eta_local(&self) -> f64 {
        self.eta_local.unwrap_or(self.eta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("dion.eta", "must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::config("dion.mu", "must lie in [0, 1)"));
        }
        if !(self.rank_fraction > 0.0 && self.rank_fraction <= 1.0) {
            return Err(Error::config("dion.rank_fraction", "must lie in (0, 1]"));
        }
        let el = self.eta_local();
        if !(el > 0.0 && el.is_finite()) {
            return Err(Error::config("dion.eta_local", "must be a positive finite number"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("dion.weight_decay", "must be nonnegative"));
        }
        if self.power_iters == 0 {
            return Err(Error::config("dion.power_iters", "must be at least 1"));
        }
        Ok(())
    }

    /// `r = max(1, round(rank_fraction * min(m, n)))`, capped at `min(m, n)`.
    pub fn rank_for(&self, m: usize, n: usize) -> usize {
        let k = m.min(n);
        let r = (self.rank_fraction * k as f64).round() as usize;
        r.clamp(1, k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub x: Matrix,
    pub m: Matrix,
    pub q: Matrix,
    pub prev_norm: f64,
}

impl LayerState {
    /// Fresh state: zero momentum, `Q` drawn from `random_orthonormal(n, r, seed)`.
    pub fn new(x: Matrix, rank: usize, seed: u64) -> Result<Self> {
        let (rows, cols) = x.shape();
        let q = random_orthonormal(cols, rank, seed)?;
        Ok(LayerState {
            m: Matrix::zeros(rows, cols),
            x,
            q,
            prev_norm: 0.0,
        })
    }

    pub fn rank(&self) -> usize {
        self.q.cols()
    }
}

pub fn accumulate_buffer(m: &Matrix, g: &Matrix) -> Result<Matrix, MatrixError> {
    m.add(g)
}

/// One warm-started power iteration: `P = orth(B Q)`, `R = Bᵀ P`.
pub fn power_iterate(b: &Matrix, q_prev: &Matrix) -> Result<(Matrix, Matrix), MatrixError> {
    let p = orthonormalize_columns(&matmul(b, q_prev)?)?;
    let r = matmul_tn(b, &p)?;
    Ok((p, r))
}

/// `B − (1−μ) P Rᵀ`.
pub fn error_feedback(b: &Matrix, p: &Matrix, r: &Matrix, mu: f64) -> Result<Matrix, MatrixError> {
    let prt = matmul_nt(p, r)?;
    b.add_scaled(-(1.0 - mu), &prt)
}

/// `X − η sqrt(m/n) P Qᵀ`.
pub fn apply_sync_update(x: &Matrix, p: &Matrix, q: &Matrix, eta: f64) -> Result<Matrix, MatrixError> {
    let (m, n) = x.shape();
    let pq = matmul_nt(p, q)?;
    x.add_scaled(-eta * (m as f64 / n as f64).sqrt(), &pq)
}

/// Plain gradient step `X − η_local G`.
pub fn apply_local_update(x: &Matrix, g: &Matrix, eta_local: f64) -> Result<Matrix, MatrixError> {
    x.add_scaled(-eta_local, g)
}

/// Decoupled weight decay `(1 − η wd) X`.
pub fn apply_weight_decay(x: &Matrix, eta: f64, weight_decay: f64) -> Matrix {
    if weight_decay == 0.0 {
        return x.clone();
    }
    x.scale(1.0 - eta * weight_decay)
}

/// Power iteration with the single re-draw fallback on rank deficiency.
///
/// `redraw_seed` seeds the replacement `Q` if `B Q` turns out rank deficient.
/// Returns `(P, R)` and the `Q` actually used.
pub fn power_iterate_with_fallback(
    b: &Matrix,
    q_prev: &Matrix,
    redraw_seed: u64,
) -> Result<(Matrix, Matrix, Matrix), MatrixError> {
    match power_iterate(b, q_prev) {
        Ok((p, r)) => Ok((p, r, q_prev.clone())),
        Err(MatrixError::RankDeficient { .. }) => {
            let q = random_orthonormal(q_prev.rows(), q_prev.cols(), redraw_seed)?;
            let (p, r) = power_iterate(b, &q)?;
            Ok((p, r, q))
        }
        Err(e) => Err(e),
    }
}

/// Centralized Dion step on one layer.
///
/// `redraw_seed` is only consumed when the fallback fires. An identically
/// zero buffer has no direction to follow: the step then leaves `M`, `Q`
/// and the undecayed part of `X` untouched.
pub fn dion_sync_step(
    state: &LayerState,
    g: &Matrix,
    cfg: &DionConfig,
    redraw_seed: u64,
) -> Result<LayerState> {
    let b = accumulate_buffer(&state.m, g)?;
    if is_zero(&b) {
        return Ok(LayerState {
            x: apply_weight_decay(&state.x, cfg.eta, cfg.weight_decay),
            m: Matrix::zeros(b.rows(), b.cols()),
            q: state.q.clone(),
            prev_norm: state.prev_norm,
        });
    }
    let mut q = state.q.clone();
    let mut pr = None;
    for it in 0..cfg.power_iters {
        let (p, r, _) = power_iterate_with_fallback(&b, &q, redraw_seed.wrapping_add(it as u64))?;
        q = column_normalize(&r)?;
        pr = Some((p, r));
    }
    let (p, r) = pr.expect("power_iters >= 1");
    let m = error_feedback(&b, &p, &r, cfg.mu)?;
    let x = apply_weight_decay(&state.x, cfg.eta, cfg.weight_decay);
    let x = apply_sync_update(&x, &p, &q, cfg.eta)?;
    Ok(LayerState {
        x,
        m,
        q,
        prev_norm: state.prev_norm,
    })
}

pub fn is_zero(a: &Matrix) -> bool {
    a.data().iter().all(|&v| v == 0.0)
}

/// Local step: keep the whole buffer as momentum and take a gradient step.
pub fn local_step(state: &LayerState, g: &Matrix, cfg: &DionConfig) -> Result<LayerState> {
    let m = accumulate_buffer(&state.m, g)?;
    let x = apply_weight_decay(&state.x, cfg.eta, cfg.weight_decay);
    let x = apply_local_update(&x, g, cfg.eta_local())?;
    Ok(LayerState {
        x,
        m,
        q: state.q.clone(),
        prev_norm: state.prev_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{frobenius_norm, norm2, orthonormality_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::gaussian(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn rank_rule() {
        let c = DionConfig::default();
        assert_eq!(c.rank_for(16, 8), 1);
        assert_eq!(c.rank_for(64, 32), 4);
        assert_eq!(c.rank_for(3, 2), 1);
        let full = DionConfig {
            rank_fraction: 1.0,
            ..c
        };
        assert_eq!(full.rank_for(8, 6), 6);
    }

    #[test]
    fn config_validation() {
        assert!(DionConfig::default().validate().is_ok());
        let bad = DionConfig {
            mu: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DionConfig {
            rank_fraction: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn buffer_accumulation() {
        let g = seeded(3, 2, 1);
        let z = Matrix::zeros(3, 2);
        assert_eq!(accumulate_buffer(&z, &g).unwrap(), g);
        assert_eq!(accumulate_buffer(&g, &z).unwrap(), g);
        let m = seeded(3, 2, 2);
        let b = accumulate_buffer(&m, &g).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((b.get(i, j) - (m.get(i, j) + g.get(i, j))).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn power_iterate_rank_one() {
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let e1 = Matrix::column_vector(&[1.0, 0.0]);
        let (p, r) = power_iterate(&b, &e1).unwrap();
        assert_eq!(p, e1);
        assert_eq!(r, e1);
        assert_eq!(matmul_nt(&p, &r).unwrap(), b);
        let (p, r) = power_iterate(&b.scale(2.0), &e1).unwrap();
        assert_eq!(p, e1);
        assert_eq!(r, e1.scale(2.0));
    }

    #[test]
    fn power_iterate_full_rank_reconstructs() {
        let b = seeded(8, 6, 3);
        let q = random_orthonormal(6, 6, 4).unwrap();
        let (p, r) = power_iterate(&b, &q).unwrap();
        assert!(orthonormality_error(&p) <= 1e-10);
        let rec = matmul_nt(&p, &r).unwrap();
        assert!(frobenius_norm(&rec.sub(&b).unwrap()) <= 1e-8 * frobenius_norm(&b));
    }

    #[test]
    fn error_feedback_cases() {
        let b = seeded(4, 3, 5);
        let q = random_orthonormal(3, 3, 6).unwrap();
        let (p, r) = power_iterate(&b, &q).unwrap();
        let m = error_feedback(&b, &p, &r, 0.95).unwrap();
        assert!(m.max_abs_diff(&b.scale(0.95)).unwrap() <= 1e-12);
        // mu = 1 is outside the config range but the kernel is still defined.
        assert_eq!(error_feedback(&b, &p, &r, 1.0).unwrap(), b);

        let q1 = random_orthonormal(3, 1, 7).unwrap();
        let (p, r) = power_iterate(&b, &q1).unwrap();
        let m = error_feedback(&b, &p, &r, 0.95).unwrap();
        let oracle = Matrix::from_fn(4, 3, |i, j| b.get(i, j) - 0.05 * p.get(i, 0) * r.get(j, 0));
        assert!(m.max_abs_diff(&oracle).unwrap() <= 1e-12);
    }

    #[test]
    fn sync_update_scaling() {
        let x = Matrix::zeros(4, 1);
        let p = Matrix::column_vector(&[1.0, 0.0, 0.0, 0.0]);
        let q = Matrix::column_vector(&[1.0]);
        let out = apply_sync_update(&x, &p, &q, 1.0).unwrap();
        assert_eq!(out.data(), &[-2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sync_update_matches_oracle() {
        let x = seeded(6, 3, 9);
        let p = seeded(6, 2, 10);
        let q = seeded(3, 2, 11);
        let eta = 0.37;
        let got = apply_sync_update(&x, &p, &q, eta).unwrap();
        let s = (6.0f64 / 3.0).sqrt();
        let oracle = Matrix::from_fn(6, 3, |i, j| {
            x.get(i, j) - eta * s * (p.get(i, 0) * q.get(j, 0) + p.get(i, 1) * q.get(j, 1))
        });
        assert!(got.max_abs_diff(&oracle).unwrap() <= 1e-12);
        assert_eq!(apply_sync_update(&x, &p, &q, 0.0).unwrap(), x);
    }

    #[test]
    fn local_update_cases() {
        let x = seeded(3, 3, 12);
        let g = seeded(3, 3, 13);
        assert_eq!(apply_local_update(&x, &Matrix::zeros(3, 3), 0.1).unwrap(), x);
        assert_eq!(apply_local_update(&x, &g, 0.0).unwrap(), x);
        let got = apply_local_update(&x, &g, 0.3).unwrap();
        let oracle = Matrix::from_fn(3, 3, |i, j| x.get(i, j) - 0.3 * g.get(i, j));
        assert!(got.max_abs_diff(&oracle).unwrap() <= 1e-15);
    }

    #[test]
    fn full_rank_sync_step_decays_momentum() {
        let cfg = DionConfig {
            rank_fraction: 1.0,
            ..Default::default()
        };
        let x = seeded(2, 2, 14);
        let state = LayerState::new(x.clone(), 2, 15).unwrap();
        // Gradient of 0.5 xᵀ A x with A = diag(1, 3), applied entrywise.
        let g = Matrix::from_fn(2, 2, |i, j| [1.0, 3.0][i] * x.get(i, j));
        let next = dion_sync_step(&state, &g, &cfg, 99).unwrap();
        assert!(next.m.max_abs_diff(&g.scale(cfg.mu)).unwrap() <= 1e-12);
        for j in 0..2 {
            assert!((norm2(&next.q.column(j)) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_dynamics_leave_state() {
        let cfg = DionConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let x = seeded(4, 4, 16);
        let state = LayerState::new(x.clone(), 1, 17).unwrap();
        let next = dion_sync_step(&state, &Matrix::zeros(4, 4), &cfg, 18).unwrap();
        assert_eq!(next.x, x);
        assert_eq!(next.m, Matrix::zeros(4, 4));
        assert_eq!(next.q, state.q);
    }

    #[test]
    fn fallback_redraws_q_once() {
        // B Q is zero for this Q, so the first attempt is rank deficient.
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let q = Matrix::column_vector(&[0.0, 1.0]);
        assert!(power_iterate(&b, &q).is_err());
        let (p, _r, used) = power_iterate_with_fallback(&b, &q, 5).unwrap();
        assert_ne!(used, q);
        assert!(orthonormality_error(&p) <= 1e-10);
    }

    #[test]
    fn sync_step_is_deterministic() {
        let cfg = DionConfig::default();
        let run = || {
            let mut s = LayerState::new(seeded(8, 6, 19), cfg.rank_for(8, 6), 20).unwrap();
            for k in 0..3 {
                let g = seeded(8, 6, 100 + k);
                s = dion_sync_step(&s, &g, &cfg, 7).unwrap();
            }
            s
        };
        let (a, b) = (run(), run());
        assert!(a.x.bitwise_eq(&b.x) && a.m.bitwise_eq(&b.m) && a.q.bitwise_eq(&b.q));
    }

    proptest! {
        #[test]
        fn error_feedback_identity(seed in any::<u64>(), m in 1usize..9, n in 1usize..9, mu in 0.0f64..0.99) {
            let b = seeded(m, n, seed);
            let r = (m.min(n) / 2).max(1);
            let q = random_orthonormal(n, r, seed ^ 1).unwrap();
            let (p, rr) = power_iterate(&b, &q).unwrap();
            let mnew = error_feedback(&b, &p, &rr, mu).unwrap();
            let back = mnew.add_scaled(1.0 - mu, &matmul_nt(&p, &rr).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&b).unwrap() <= 1e-12 * (1.0 + frobenius_norm(&b)));
        }

        #[test]
        fn update_direction_norm_is_sqrt_rank(seed in any::<u64>(), m in 2usize..10, n in 2usize..10) {
            let b = seeded(m, n, seed);
            let r = (m.min(n) / 2).max(1);
            let q = random_orthonormal(n, r, seed ^ 2).unwrap();
            let (p, rr) = power_iterate(&b, &q).unwrap();
            let qn = column_normalize(&rr).unwrap();
            let pq = matmul_nt(&p, &qn).unwrap();
            let fro = frobenius_norm(&pq);
            prop_assert!((fro - (r as f64).sqrt()).abs() <= 1e-10);
            for j in 0..n {
                prop_assert!(norm2(&pq.column(j)) <= (r as f64).sqrt() + 1e-10);
            }
        }

        #[test]
        fn rank_one_update_columns_bounded(seed in any::<u64>(), m in 1usize..10, n in 1usize..10) {
            let b = seeded(m, n, seed);
            let q = random_orthonormal(n, 1, seed ^ 3).unwrap();
            let (p, rr) = power_iterate(&b, &q).unwrap();
            let pq = matmul_nt(&p, &column_normalize(&rr).unwrap()).unwrap();
            for j in 0..n {
                prop_assert!(norm2(&pq.column(j)) <= 1.0 + 1e-10);
            }
        }

        #[test]
        fn doubling_eta_doubles_delta(seed in any::<u64>(), eta in 1e-4f64..1.0) {
            let p = seeded(5, 2, seed ^ 3);
            let q = seeded(3, 2, seed ^ 4);
            let z = Matrix::zeros(5, 3);
            let d1 = apply_sync_update(&z, &p, &q, eta).unwrap();
            let d2 = apply_sync_update(&z, &p, &q, 2.0 * eta).unwrap();
            prop_assert!(d2.max_abs_diff(&d1.scale(2.0)).unwrap() <= 1e-15 * frobenius_norm(&d2));
            let x = seeded(5, 3, seed);
            let e1 = apply_sync_update(&x, &p, &q, eta).unwrap().sub(&x).unwrap();
            let e2 = apply_sync_update(&x, &p, &q, 2.0 * eta).unwrap().sub(&x).unwrap();
            let ulp = 4.0 * f64::EPSILON * (1.0 + frobenius_norm(&x) + frobenius_norm(&e2));
            prop_assert!(e2.max_abs_diff(&e1.scale(2.0)).unwrap() <= ulp);
        }
    }
}
