//! Test problems with known curvature: noisy quadratics, a quadratic whose
//! Hessian toggles between a flat and a sharp matrix at scheduled steps, and a
//! two-layer squared-ReLU regression network with hand-written backprop.
//!
//! Parameters are a list of matrices; quadratics act on their row-major
//! concatenation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::{dot, matvec, orthonormalize_columns, Matrix, MatrixError};

/// What a worker evaluates at one step. Time-varying problems read `step`;
/// stochastic gradients derive their randomness from the whole descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Batch {
    pub step: u64,
    pub worker: usize,
    pub n_workers: usize,
    pub seed: u64,
}

impl Batch {
    pub fn new(step: u64, worker: usize, n_workers: usize, seed: u64) -> Self {
        Batch {
            step,
            worker,
            n_workers,
            seed,
        }
    }

    /// Independent stream keyed by (seed, worker, step).
    pub fn rng(&self) -> ChaCha8Rng {
        keyed_rng(self.seed, 0x0062_6174_6368, self.worker as u64, self.step)
    }
}

/// ChaCha stream keyed by four words; distinct keys give independent streams.
pub fn keyed_rng(a: u64, b: u64, c: u64, d: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, w) in [a, b, c, d].into_iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub trait Problem: Send + Sync {
    fn layer_shapes(&self) -> &[(usize, usize)];

    /// Objective at `params` for the step in `batch`, without gradient noise.
    fn loss(&self, params: &[Matrix], batch: &Batch) -> f64;

    /// One worker's stochastic gradient.
    fn gradient(&self, params: &[Matrix], batch: &Batch) -> Vec<Matrix>;

    /// Noise-free Hessian-vector product on the flattened parameters.
    fn hvp(&self, _params: &[Matrix], _v: &[f64], _batch: &Batch) -> Option<Vec<f64>> {
        None
    }

    /// Upper bound on the largest Hessian eigenvalue, when known.
    fn curvature_bound(&self) -> Option<f64> {
        None
    }

    fn init_params(&self, seed: u64) -> Vec<Matrix>;

    /// Steps at which the landscape changes, for event-window analysis.
    fn switch_steps(&self) -> &[u64] {
        &[]
    }

    fn dim(&self) -> usize {
        self.layer_shapes().iter().map(|(m, n)| m * n).sum()
    }
}

pub fn flatten(params: &[Matrix]) -> Vec<f64> {
    params.iter().flat_map(|p| p.data().iter().copied()).collect()
}

pub fn unflatten(shapes: &[(usize, usize)], v: &[f64]) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for &(m, n) in shapes {
        out.push(Matrix::from_vec(m, n, v[off..off + m * n].to_vec()).expect("length matches"));
        off += m * n;
    }
    out
}

fn gaussian_init(shapes: &[(usize, usize)], scale: f64, seed: u64) -> Vec<Matrix> {
    let mut rng = keyed_rng(seed, 0x696e_6974, 0, 0);
    shapes
        .iter()
        .map(|&(m, n)| Matrix::gaussian(m, n, &mut rng).scale(scale))
        .collect()
}

pub fn check_symmetric(a: &Matrix, what: &str) -> Result<()> {
    let (m, n) = a.shape();
    if m != n {
        return Err(Error::config(what, format!("must be square, got {m}x{n}")));
    }
    for i in 0..n {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > 1e-12 {
                return Err(Error::config(
                    what,
                    format!("not symmetric at ({i}, {j}): {} vs {}", a.get(i, j), a.get(j, i)),
                ));
            }
        }
    }
    Ok(())
}

/// Cholesky succeeds iff the symmetric matrix is positive definite.
pub fn is_positive_definite(a: &Matrix) -> bool {
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    true
}

/// Symmetric matrix stored by its eigendecomposition `V diag(λ) Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSpd {
    pub basis: Matrix,
    pub eigenvalues: Vec<f64>,
}

impl SpectralSpd {
    /// Random orthogonal basis, eigenvalues log-uniform on `[lo, hi]`.
    pub fn random<R: Rng + ?Sized>(d: usize, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config(
                "eigen_range",
                format!("need 0 < lo <= hi, got [{lo}, {hi}]"),
            ));
        }
        let basis = loop {
            match orthonormalize_columns(&Matrix::gaussian(d, d, rng)) {
                Ok(q) => break q,
                Err(MatrixError::RankDeficient { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        };
        let (llo, lhi) = (lo.ln(), hi.ln());
        let eigenvalues = (0..d)
            .map(|_| (llo + (lhi - llo) * rng.random::<f64>()).exp())
            .collect();
        Ok(SpectralSpd { basis, eigenvalues })
    }

    fn with_spectrum(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let v = &self.basis;
        let d = v.rows();
        let scaled = Matrix::from_fn(d, d, |i, k| v.get(i, k) * f(self.eigenvalues[k]));
        let mut out = crate::matrix::matmul_nt(&scaled, v).expect("square");
        symmetrize(&mut out);
        out
    }

    pub fn matrix(&self) -> Matrix {
        self.with_spectrum(|l| l)
    }

    pub fn sqrt_matrix(&self) -> Matrix {
        self.with_spectrum(f64::sqrt)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }
}

fn symmetrize(a: &mut Matrix) {
    let n = a.rows();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, s);
            a.set(j, i, s);
        }
    }
}

/// Largest absolute row sum, an upper bound on the spectral radius.
fn gershgorin_bound(a: &Matrix) -> f64 {
    (0..a.rows())
        .map(|i| (0..a.cols()).map(|j| a.get(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `F(x) = ½ xᵀAx + bᵀx` with additive Gaussian gradient noise per worker.
///
/// Noise is `σ ξ` by default, or `σ S ξ` when a noise factor `S` is set.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    shapes: Vec<(usize, usize)>,
    a: Matrix,
    b: Vec<f64>,
    noise_sigma: f64,
    noise_factor: Option<Matrix>,
    init_scale: f64,
    bound: f64,
}

pub fn quadratic_problem(
    shapes: &[(usize, usize)],
    a: Matrix,
    b: Vec<f64>,
    noise_sigma: f64,
) -> Result<QuadraticProblem> {
    let d: usize = shapes.iter().map(|(m, n)| m * n).sum();
    check_symmetric(&a, "problem.A")?;
    if a.rows() != d || b.len() != d {
        return Err(Error::config(
            "problem.A",
            format!("dimension {} does not match the {d} parameters", a.rows()),
        ));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::config("problem.noise_sigma", "must be nonnegative"));
    }
    let bound = gershgorin_bound(&a);
    Ok(QuadraticProblem {
        shapes: shapes.to_vec(),
        a,
        b,
        noise_sigma,
        noise_factor: None,
        init_scale: 0.5,
        bound,
    })
}

impl QuadraticProblem {
    pub fn with_noise_factor(mut self, s: Matrix) -> Result<Self> {
        if s.shape() != self.a.shape() {
            return Err(Error::config("problem.noise_factor", "shape must match A"));
        }
        self.noise_factor = Some(s);
        Ok(self)
    }

    pub fn with_init_scale(mut self, scale: f64) -> Self {
        self.init_scale = scale;
        self
    }

    pub fn with_curvature_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    pub fn hessian(&self) -> &Matrix {
        &self.a
    }

    pub fn linear_term(&self) -> &[f64] {
        &self.b
    }

    fn flat_gradient(&self, x: &[f64], batch: &Batch) -> Vec<f64> {
        let mut g = matvec(&self.a, x).expect("dimension checked");
        for (gi, bi) in g.iter_mut().zip(&self.b) {
            *gi += bi;
        }
        if self.noise_sigma > 0.0 {
            let mut rng = batch.rng();
            let xi: Vec<f64> = (0..g.len()).map(|_| rng.sample(StandardNormal)).collect();
            let noise = match &self.noise_factor {
                Some(s) => matvec(s, &xi).expect("dimension checked"),
                None => xi,
            };
            for (gi, ni) in g.iter_mut().zip(&noise) {
                *gi += self.noise_sigma * ni;
            }
        }
        g
    }

    fn flat_loss(&self, x: &[f64]) -> f64 {
        let ax = matvec(&self.a, x).expect("dimension checked");
        0.5 * dot(x, &ax) + dot(&self.b, x)
    }
}

impl Problem for QuadraticProblem {
    fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    fn loss(&self, params: &[Matrix], _batch: &Batch) -> f64 {
        self.flat_loss(&flatten(params))
    }

    fn gradient(&self, params: &[Matrix], batch: &Batch) -> Vec<Matrix> {
        unflatten(&self.shapes, &self.flat_gradient(&flatten(params), batch))
    }

    fn hvp(&self, _params: &[Matrix], v: &[f64], _batch: &Batch) -> Option<Vec<f64>> {
        matvec(&self.a, v).ok()
    }

    fn curvature_bound(&self) -> Option<f64> {
        Some(self.bound)
    }

    fn init_params(&self, seed: u64) -> Vec<Matrix> {
        gaussian_init(&self.shapes, self.init_scale, seed)
    }
}

#[derive(Debug, Clone)]
pub struct CurvatureSwitchSpec {
    pub a_flat: Matrix,
    pub a_sharp: Matrix,
    /// Sorted steps at which the active matrix toggles; flat is active first.
    pub switch_steps: Vec<u64>,
}

impl CurvatureSwitchSpec {
    pub fn validate(&self) -> Result<()> {
        check_symmetric(&self.a_flat, "problem.a_flat")?;
        check_symmetric(&self.a_sharp, "problem.a_sharp")?;
        if self.a_flat.shape() != self.a_sharp.shape() {
            return Err(Error::config("problem.a_sharp", "shape must match a_flat"));
        }
        if !is_positive_definite(&self.a_flat) {
            return Err(Error::config("problem.a_flat", "must be positive definite"));
        }
        if !is_positive_definite(&self.a_sharp) {
            return Err(Error::config("problem.a_sharp", "must be positive definite"));
        }
        if self.switch_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "problem.switch_steps",
                "must be strictly increasing",
            ));
        }
        Ok(())
    }
}

/// `first, first+length, first+period, first+period+length, ...` up to `steps`.
pub fn periodic_switches(first: u64, length: u64, period: u64, steps: u64) -> Vec<u64> {
    let mut out = Vec::new();
    if length == 0 || period == 0 {
        return out;
    }
    let mut s = first;
    while s + length < steps {
        out.push(s);
        out.push(s + length);
        s += period;
    }
    out
}

#[derive(Debug, Clone)]
pub struct CurvatureSwitchProblem {
    flat: QuadraticProblem,
    sharp: QuadraticProblem,
    switches: Vec<u64>,
}

pub fn curvature_switch_problem(
    shapes: &[(usize, usize)],
    spec: CurvatureSwitchSpec,
    noise_sigma: f64,
) -> Result<CurvatureSwitchProblem> {
    spec.validate()?;
    let d = spec.a_flat.rows();
    let flat = quadratic_problem(shapes, spec.a_flat, vec![0.0; d], noise_sigma)?;
    let sharp = quadratic_problem(shapes, spec.a_sharp, vec![0.0; d], noise_sigma)?;
    Ok(CurvatureSwitchProblem {
        flat,
        sharp,
        switches: spec.switch_steps,
    })
}

impl CurvatureSwitchProblem {
    /// Curvature-scaled noise `σ A^{1/2} ξ` for each phase.
    pub fn with_noise_factors(mut self, s_flat: Matrix, s_sharp: Matrix) -> Result<Self> {
        self.flat = self.flat.with_noise_factor(s_flat)?;
        self.sharp = self.sharp.with_noise_factor(s_sharp)?;
        Ok(self)
    }

    pub fn with_init_scale(mut self, scale: f64) -> Self {
        self.flat = self.flat.with_init_scale(scale);
        self.sharp = self.sharp.with_init_scale(scale);
        self
    }

    pub fn with_curvature_bounds(mut self, flat: f64, sharp: f64) -> Self {
        self.flat = self.flat.with_curvature_bound(flat);
        self.sharp = self.sharp.with_curvature_bound(sharp);
        self
    }

    pub fn is_sharp(&self, step: u64) -> bool {
        self.switches.iter().take_while(|&&s| s <= step).count() % 2 == 1
    }

    pub fn active(&self, step: u64) -> &QuadraticProblem {
        if self.is_sharp(step) {
            &self.sharp
        } else {
            &self.flat
        }
    }
}

impl Problem for CurvatureSwitchProblem {
    fn layer_shapes(&self) -> &[(usize, usize)] {
        self.flat.layer_shapes()
    }

    fn loss(&self, params: &[Matrix], batch: &Batch) -> f64 {
        self.active(batch.step).loss(params, batch)
    }

    fn gradient(&self, params: &[Matrix], batch: &Batch) -> Vec<Matrix> {
        self.active(batch.step).gradient(params, batch)
    }

    fn hvp(&self, params: &[Matrix], v: &[f64], batch: &Batch) -> Option<Vec<f64>> {
        self.active(batch.step).hvp(params, v, batch)
    }

    fn curvature_bound(&self) -> Option<f64> {
        let f = self.flat.curvature_bound()?;
        let s = self.sharp.curvature_bound()?;
        Some(if self.switches.is_empty() { f } else { f.max(s) })
    }

    fn init_params(&self, seed: u64) -> Vec<Matrix> {
        self.flat.init_params(seed)
    }

    fn switch_steps(&self) -> &[u64] {
        &self.switches
    }
}

/// `f(x) = W2 relu(W1 x)^2`, loss `(1/N) Σ ½‖f(x) − y‖²`.
///
/// Layers are `W1: hidden x in` and `W2: out x hidden`. A worker's gradient
/// uses a minibatch drawn with replacement from its shard (indices congruent
/// to the worker id modulo the worker count).
#[derive(Debug, Clone)]
pub struct TinyMlp {
    shapes: Vec<(usize, usize)>,
    inputs: Matrix,
    targets: Matrix,
    batch_size: usize,
    init_scale: f64,
}

pub fn tiny_mlp_problem(
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    samples: usize,
    batch_size: usize,
    dataset_seed: u64,
) -> Result<TinyMlp> {
    if in_dim == 0 || hidden == 0 || out_dim == 0 || samples == 0 {
        return Err(Error::config("problem", "mlp dimensions must be at least 1"));
    }
    let mut rng = keyed_rng(dataset_seed, 0x006d_6c70, 0, 0);
    let inputs = Matrix::gaussian(samples, in_dim, &mut rng);
    let w1 = Matrix::gaussian(hidden, in_dim, &mut rng).scale(1.0 / (in_dim as f64).sqrt());
    let w2 = Matrix::gaussian(out_dim, hidden, &mut rng).scale(1.0 / (hidden as f64).sqrt());
    let mut targets = Matrix::zeros(samples, out_dim);
    for s in 0..samples {
        let (_, _, f) = forward(&w1, &w2, inputs.data_row(s));
        for (k, v) in f.into_iter().enumerate() {
            targets.set(s, k, v);
        }
    }
    TinyMlp::from_data(inputs, targets, hidden, batch_size)
}

trait RowSlice {
    fn data_row(&self, i: usize) -> &[f64];
}

impl RowSlice for Matrix {
    fn data_row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data()[i * n..(i + 1) * n]
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Returns pre-activations, activations and outputs for one sample.
fn forward(w1: &Matrix, w2: &Matrix, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = matvec(w1, x).expect("input width");
    let a: Vec<f64> = h.iter().map(|&v| relu(v) * relu(v)).collect();
    let f = matvec(w2, &a).expect("hidden width");
    (h, a, f)
}

impl TinyMlp {
    pub fn from_data(inputs: Matrix, targets: Matrix, hidden: usize, batch_size: usize) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::config("problem", "inputs and targets need the same row count"));
        }
        if hidden == 0 || inputs.cols() == 0 || targets.cols() == 0 {
            return Err(Error::config("problem", "mlp dimensions must be at least 1"));
        }
        Ok(TinyMlp {
            shapes: vec![(hidden, inputs.cols()), (targets.cols(), hidden)],
            inputs,
            targets,
            batch_size,
            init_scale: 0.5,
        })
    }

    pub fn with_init_scale(mut self, scale: f64) -> Self {
        self.init_scale = scale;
        self
    }

    pub fn samples(&self) -> usize {
        self.inputs.rows()
    }

    pub fn loss_on(&self, params: &[Matrix], idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for &s in idx {
            let (_, _, f) = forward(&params[0], &params[1], self.inputs.data_row(s));
            let y = self.targets.data_row(s);
            total += 0.5 * f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        total / idx.len() as f64
    }

    pub fn gradient_on(&self, params: &[Matrix], idx: &[usize]) -> Vec<Matrix> {
        let (w1, w2) = (&params[0], &params[1]);
        let mut g1 = Matrix::zeros(w1.rows(), w1.cols());
        let mut g2 = Matrix::zeros(w2.rows(), w2.cols());
        if idx.is_empty() {
            return vec![g1, g2];
        }
        let inv = 1.0 / idx.len() as f64;
        for &s in idx {
            let x = self.inputs.data_row(s);
            let (h, a, f) = forward(w1, w2, x);
            let e: Vec<f64> = f
                .iter()
                .zip(self.targets.data_row(s))
                .map(|(fi, yi)| fi - yi)
                .collect();
            for (k, &ek) in e.iter().enumerate() {
                for (j, &aj) in a.iter().enumerate() {
                    g2.set(k, j, g2.get(k, j) + inv * ek * aj);
                }
            }
            for (j, &hj) in h.iter().enumerate() {
                let da: f64 = e.iter().enumerate().map(|(k, &ek)| w2.get(k, j) * ek).sum();
                let dh = da * 2.0 * relu(hj);
                if dh == 0.0 {
                    continue;
                }
                for (i, &xi) in x.iter().enumerate() {
                    g1.set(j, i, g1.get(j, i) + inv * dh * xi);
                }
            }
        }
        vec![g1, g2]
    }

    /// Minibatch indices for one worker step.
    pub fn batch_indices(&self, batch: &Batch) -> Vec<usize> {
        let w = batch.n_workers.max(1);
        let shard: Vec<usize> = (0..self.samples()).filter(|i| i % w == batch.worker % w).collect();
        if self.batch_size == 0 || shard.is_empty() {
            return shard;
        }
        let mut rng = batch.rng();
        (0..self.batch_size)
            .map(|_| shard[rng.random_range(0..shard.len())])
            .collect()
    }
}

impl Problem for TinyMlp {
    fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    fn loss(&self, params: &[Matrix], _batch: &Batch) -> f64 {
        let all: Vec<usize> = (0..self.samples()).collect();
        self.loss_on(params, &all)
    }

    fn gradient(&self, params: &[Matrix], batch: &Batch) -> Vec<Matrix> {
        self.gradient_on(params, &self.batch_indices(batch))
    }

    fn init_params(&self, seed: u64) -> Vec<Matrix> {
        // Scale by fan-in so squared activations start near unit size.
        let mut rng = keyed_rng(seed, 0x696e_6974, 1, 0);
        self.shapes
            .iter()
            .map(|&(m, n)| {
                Matrix::gaussian(m, n, &mut rng).scale(self.init_scale / (n as f64).sqrt())
            })
            .collect()
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn param_count(shapes: &[(usize, usize)]) -> usize {
    shapes.iter().map(|(m, n)| m * n).sum()
}
