//! Dense row-major matrices of `f64` and the handful of kernels Dion needs.
//!
//! Entry `(i, j)` of an `m x n` matrix lives at `data[i * n + j]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Absolute tolerance on the diagonal of the triangular factor below which a
/// column is treated as linearly dependent.
pub const RANK_TOL: f64 = 1e-10;

/// Column norms below this are rejected by [`column_normalize`].
pub const MIN_COLUMN_NORM: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("{op}: shape mismatch between {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("rank deficient: column {column} has residual norm {norm:.3e} below tolerance")]
    RankDeficient { column: usize, norm: f64 },
    #[error("column {column} has norm {norm:.3e}, too small to normalize")]
    ZeroColumn { column: usize, norm: f64 },
    #[error("invalid dimensions: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// First `cols` columns of the `rows x rows` identity.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::Dimension(format!(
                "{rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatrixError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(MatrixError::Dimension("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Entries drawn i.i.d. from the standard normal distribution.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<(), MatrixError> {
        if self.shape() != other.shape() {
            return Err(mismatch(op, self, other));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, MatrixError> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, MatrixError> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, c: f64, other: &Matrix) -> Result<Matrix, MatrixError> {
        self.check_same_shape(other, "add_scaled")?;
        Ok(self.zip_map(other, |a, b| a + c * b))
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, MatrixError> {
        matmul(self, other)
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64, MatrixError> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }

    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn mismatch(op: &'static str, a: &Matrix, b: &Matrix) -> MatrixError {
    MatrixError::ShapeMismatch {
        op,
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b.rows,
        right_cols: b.cols,
    }
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, MatrixError> {
    if a.cols != b.rows {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix, MatrixError> {
    if a.rows != b.rows {
        return Err(mismatch("matmul_tn", a, b));
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix, MatrixError> {
    if a.cols != b.cols {
        return Err(mismatch("matmul_nt", a, b));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `A · v` for a square or rectangular `A` and a plain slice.
pub fn matvec(a: &Matrix, v: &[f64]) -> Result<Vec<f64>, MatrixError> {
    if a.cols != v.len() {
        return Err(MatrixError::ShapeMismatch {
            op: "matvec",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: v.len(),
            right_cols: 1,
        });
    }
    Ok((0..a.rows)
        .map(|i| dot(&a.data[i * a.cols..(i + 1) * a.cols], v))
        .collect())
}

/// Modified Gram-Schmidt with one full reorthogonalization pass.
///
/// Fails with the index of the first column whose residual after projection
/// falls below [`RANK_TOL`].
pub fn orthonormalize_columns(a: &Matrix) -> Result<Matrix, MatrixError> {
    let (m, r) = a.shape();
    if r > m {
        return Err(MatrixError::Dimension(format!(
            "cannot orthonormalize {r} columns in dimension {m}"
        )));
    }
    // Work column-major for contiguous access.
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| a.column(j)).collect();
    for j in 0..r {
        let (done, rest) = cols.split_at_mut(j);
        let v = &mut rest[0];
        for _pass in 0..2 {
            for q in done.iter() {
                let c = dot(q, v);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let nrm = norm2(v);
        if !(nrm > RANK_TOL) {
            return Err(MatrixError::RankDeficient {
                column: j,
                norm: nrm,
            });
        }
        for vi in v.iter_mut() {
            *vi /= nrm;
        }
    }
    Ok(Matrix::from_fn(m, r, |i, j| cols[j][i]))
}

pub fn column_normalize(a: &Matrix) -> Result<Matrix, MatrixError> {
    let (m, n) = a.shape();
    let mut out = a.clone();
    for j in 0..n {
        let nrm = (0..m).map(|i| a.get(i, j).powi(2)).sum::<f64>().sqrt();
        if !(nrm >= MIN_COLUMN_NORM) {
            return Err(MatrixError::ZeroColumn {
                column: j,
                norm: nrm,
            });
        }
        for i in 0..m {
            out.data[i * n + j] /= nrm;
        }
    }
    Ok(out)
}

/// Seeded `m x r` matrix with orthonormal columns (Gaussian draw, then MGS).
pub fn random_orthonormal(m: usize, r: usize, seed: u64) -> Result<Matrix, MatrixError> {
    if r > m || r == 0 {
        return Err(MatrixError::Dimension(format!(
            "random_orthonormal needs 1 <= r <= m, got m={m}, r={r}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A Gaussian draw is rank deficient with probability zero; retry anyway.
    loop {
        let g = Matrix::gaussian(m, r, &mut rng);
        match orthonormalize_columns(&g) {
            Ok(q) => return Ok(q),
            Err(MatrixError::RankDeficient { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// `‖PᵀP − I‖_max`.
pub fn orthonormality_error(p: &Matrix) -> f64 {
    let g = matmul_tn(p, p).expect("PᵀP always composes");
    let i = Matrix::identity(p.cols());
    g.max_abs_diff(&i).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::gaussian(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a.get(i, p) * b.get(p, j);
            }
            s
        })
    }

    #[test]
    fn norm_of_zero_and_identity() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        assert!((frobenius_norm(&Matrix::identity(2)) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn norm_matches_double_loop() {
        let a = seeded(8, 6, 7);
        let mut s = 0.0;
        for i in 0..8 {
            for j in 0..6 {
                s += a.get(i, j) * a.get(i, j);
            }
        }
        assert!((frobenius_norm(&a) - s.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn matmul_identity_and_rank_one() {
        let b = seeded(3, 4, 1);
        assert_eq!(matmul(&Matrix::identity(3), &b).unwrap(), b);
        let e1e1 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let e1 = Matrix::column_vector(&[1.0, 0.0]);
        assert_eq!(matmul(&e1e1, &e1).unwrap(), e1);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = seeded(5, 4, 2);
        let b = seeded(4, 3, 3);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)).unwrap() <= 1e-12);
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        assert!(tn.max_abs_diff(&got).unwrap() <= 1e-12);
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&got).unwrap() <= 1e-12);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn orthonormalize_examples() {
        let eye = Matrix::eye(5, 3);
        assert_eq!(orthonormalize_columns(&eye).unwrap(), eye);
        let v = orthonormalize_columns(&Matrix::column_vector(&[3.0, 4.0])).unwrap();
        assert!((v.get(0, 0) - 0.6).abs() < 1e-15 && (v.get(1, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn orthonormalize_random_16x4() {
        let a = seeded(16, 4, 11);
        let p = orthonormalize_columns(&a).unwrap();
        assert!(orthonormality_error(&p) <= 1e-10);
        let proj = matmul(&p, &matmul_tn(&p, &a).unwrap()).unwrap();
        let resid = frobenius_norm(&proj.sub(&a).unwrap());
        assert!(resid <= 1e-8 * frobenius_norm(&a));
    }

    #[test]
    fn orthonormalize_reports_deficient_column() {
        let a = Matrix::from_rows(&[
            vec![1.0, 2.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        match orthonormalize_columns(&a) {
            Err(MatrixError::RankDeficient { column, .. }) => assert_eq!(column, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn column_normalize_examples() {
        let c = column_normalize(&Matrix::column_vector(&[3.0, 4.0])).unwrap();
        assert_eq!(c.data(), &[0.6, 0.8]);
        let unit = Matrix::eye(4, 2);
        assert!(column_normalize(&unit).unwrap().max_abs_diff(&unit).unwrap() <= 1e-15);
        let r = column_normalize(&seeded(6, 3, 5)).unwrap();
        for j in 0..3 {
            assert!((norm2(&r.column(j)) - 1.0).abs() <= 1e-12);
        }
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            column_normalize(&z),
            Err(MatrixError::ZeroColumn { column: 1, .. })
        ));
    }

    #[test]
    fn random_orthonormal_examples() {
        let one = random_orthonormal(1, 1, 3).unwrap();
        assert_eq!(one.get(0, 0).abs(), 1.0);
        let a = random_orthonormal(8, 3, 42).unwrap();
        let b = random_orthonormal(8, 3, 42).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(orthonormality_error(&a) <= 1e-10);
        assert!(random_orthonormal(2, 3, 0).is_err());
    }

    proptest! {
        #[test]
        fn orthonormalize_is_idempotent(seed in any::<u64>(), m in 2usize..12, r in 1usize..6) {
            let r = r.min(m);
            let a = seeded(m, r, seed);
            let p = orthonormalize_columns(&a).unwrap();
            let pp = orthonormalize_columns(&p).unwrap();
            prop_assert!(pp.max_abs_diff(&p).unwrap() <= 1e-12);
            let proj = matmul(&p, &matmul_tn(&p, &a).unwrap()).unwrap();
            prop_assert!(frobenius_norm(&proj.sub(&a).unwrap()) <= 1e-8 * frobenius_norm(&a));
        }

        #[test]
        fn norm_is_absolutely_homogeneous(seed in any::<u64>(), c in -1e3f64..1e3) {
            let a = seeded(4, 5, seed);
            let lhs = frobenius_norm(&a.scale(c));
            let rhs = c.abs() * frobenius_norm(&a);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
        }
    }
}
