//! Dense row-major `f64` matrices, a one-sided Jacobi SVD and the seeded
//! random stream every other module draws from.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{NsnError, Result};

/// Convergence threshold on the largest normalized column inner product.
pub const SVD_TOLERANCE: f64 = 1e-12;
pub const SVD_MAX_SWEEPS: usize = 60;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(NsnError::Dimension {
                op: "Matrix::new",
                left: format!("{rows}x{cols}"),
                right: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NsnError::NonFinite("matrix data".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(NsnError::Dimension {
                op: "Matrix::from_rows",
                left: format!("row length {cols}"),
                right: format!("row length {}", bad.len()),
            });
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    /// Column vector (n×1).
    pub fn column_vector(values: &[f64]) -> Result<Self> {
        Matrix::new(values.len(), 1, values.to_vec())
    }

    pub fn random_gaussian(rows: usize, cols: usize, scale: f64, rng: &mut RandomStream) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for v in &mut m.data {
            *v = scale * rng.gaussian();
        }
        m
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = *v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// First `r` rows as a new matrix.
    pub fn top_rows(&self, r: usize) -> Matrix {
        assert!(r >= 1 && r <= self.rows);
        Matrix {
            rows: r,
            cols: self.cols,
            data: self.data[..r * self.cols].to_vec(),
        }
    }

    /// First `c` columns as a new matrix.
    pub fn left_cols(&self, c: usize) -> Matrix {
        assert!(c >= 1 && c <= self.cols);
        let mut out = Matrix::zeros(self.rows, c);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[..c]);
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_error("matmul", self, other));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_error("matmul_t", self, other));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_error("t_matmul", self, other));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_error(op, self, other));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Adds `v` to every row.
    pub fn add_row_broadcast(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.cols);
        for i in 0..self.rows {
            for (o, &b) in self.row_mut(i).iter_mut().zip(v) {
                *o += b;
            }
        }
    }

    /// Sum over rows, giving one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Thin SVD. See [`svd`].
    pub fn svd(&self) -> Result<SvdResult> {
        svd(self)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

fn shape_error(op: &'static str, a: &Matrix, b: &Matrix) -> NsnError {
    NsnError::Dimension {
        op,
        left: format!("{}x{}", a.rows, a.cols),
        right: format!("{}x{}", b.rows, b.cols),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Thin singular value decomposition `M = U·diag(s)·Vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m×k, orthonormal columns.
    pub u: Matrix,
    /// Length k = min(m, n), non-increasing.
    pub singular_values: Vec<f64>,
    /// k×n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_rank(self.singular_values.len())
    }

    /// `U_k·diag(s_k)·Vt_k`, the best rank-k approximation.
    pub fn reconstruct_rank(&self, k: usize) -> Matrix {
        let k = k.min(self.singular_values.len());
        if k == 0 {
            return Matrix::zeros(self.u.rows(), self.vt.cols());
        }
        let mut us = self.u.left_cols(k);
        for i in 0..us.rows() {
            for (v, s) in us.row_mut(i).iter_mut().zip(&self.singular_values) {
                *v *= s;
            }
        }
        us.matmul(&self.vt.top_rows(k)).expect("svd factors chain")
    }
}

/// One-sided Jacobi SVD on the taller orientation.
///
/// Columns are rotated pairwise until every normalized inner product is
/// below [`SVD_TOLERANCE`]. Each `U` column is signed so that its
/// largest-magnitude entry is non-negative.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(NsnError::NonFinite("svd input".into()));
    }
    if m.rows < m.cols {
        let t = svd_tall(&m.transpose())?;
        // Mᵀ = U S Vt  =>  M = Vtᵀ S Uᵀ
        let mut res = SvdResult {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        };
        fix_signs(&mut res);
        return Ok(res);
    }
    let mut res = svd_tall(m)?;
    fix_signs(&mut res);
    Ok(res)
}

fn svd_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, n) = m.shape();
    debug_assert!(rows >= n);
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut off = 0.0;
    for _ in 0..SVD_MAX_SWEEPS {
        off = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(rel);
                if rel < SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if off < SVD_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NsnError::SvdNoConvergence {
            sweeps: SVD_MAX_SWEEPS,
            off_diagonal: off,
        });
    }

    let mut order: Vec<(usize, f64)> = g.iter().map(|col| norm(col)).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let negligible = sigma_max * (rows as f64) * f64::EPSILON;

    let mut u = Matrix::zeros(rows, n);
    let mut vt = Matrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (k, &(j, sigma)) in order.iter().enumerate() {
        let col = if sigma > negligible && sigma > 0.0 {
            g[j].iter().map(|x| x / sigma).collect()
        } else {
            complete_basis(&basis, &g[j], rows)
        };
        u.set_column(k, &col);
        basis.push(col);
        vt.row_mut(k).copy_from_slice(&v[j]);
        singular_values.push(sigma);
    }
    Ok(SvdResult { u, singular_values, vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Unit vector orthogonal to `basis`, seeded by `hint` then by standard basis vectors.
fn complete_basis(basis: &[Vec<f64>], hint: &[f64], len: usize) -> Vec<f64> {
    let candidates = std::iter::once(hint.to_vec()).chain((0..len).map(|i| {
        let mut e = vec![0.0; len];
        e[i] = 1.0;
        e
    }));
    for mut cand in candidates {
        let start = norm(&cand);
        if start == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let n = norm(&cand);
        if n > 1e-3 * start {
            return cand.iter().map(|x| x / n).collect();
        }
    }
    unreachable!("basis of dimension < len always admits a completion")
}

fn fix_signs(res: &mut SvdResult) {
    for k in 0..res.singular_values.len() {
        let col = res.u.column(k);
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            let flipped: Vec<f64> = col.iter().map(|x| -x).collect();
            res.u.set_column(k, &flipped);
            for x in res.vt.row_mut(k) {
                *x = -*x;
            }
        }
    }
}

/// Deterministic random source. Identical seeds give identical streams.
#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

pub fn seeded_rng(seed: u64) -> RandomStream {
    RandomStream {
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}

impl RandomStream {
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    /// Independent child stream, derived deterministically.
    pub fn fork(&mut self) -> RandomStream {
        seeded_rng(self.next_u64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    fn assert_orthonormal_cols(u: &Matrix, tol: f64) {
        let gram = u.t_matmul(u).unwrap();
        let err = gram.sub(&Matrix::identity(u.cols())).unwrap().frobenius_norm();
        assert!(err < tol, "U'U deviates from I by {err}");
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = seeded_rng(3);
        let m = Matrix::random_gaussian(3, 4, 1.0, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
        let z = Matrix::zeros(2, 3).matmul(&m).unwrap();
        assert_eq!(z, Matrix::zeros(2, 4));
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let mut rng = seeded_rng(9);
        let a = Matrix::random_gaussian(5, 3, 1.0, &mut rng);
        let b = Matrix::random_gaussian(4, 3, 1.0, &mut rng);
        let c = Matrix::random_gaussian(5, 2, 1.0, &mut rng);
        assert!(rel_err(&a.matmul_t(&b).unwrap(), &a.matmul(&b.transpose()).unwrap()) < 1e-14);
        assert!(rel_err(&a.t_matmul(&c).unwrap(), &a.transpose().matmul(&c).unwrap()) < 1e-14);
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn svd_of_diagonal() {
        let m = Matrix::from_diag(&[3.0, 1.0]);
        let s = svd(&m).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 1.0]);
        for v in s.u.data().iter().chain(s.vt.data()) {
            assert!(v.abs() == 0.0 || (v.abs() - 1.0).abs() < 1e-15);
        }
        // diag(1,3) needs a permutation
        let s = svd(&Matrix::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 1.0]);
        assert!(rel_err(&s.reconstruct(), &Matrix::from_diag(&[1.0, 3.0])) < 1e-15);
    }

    #[test]
    fn svd_of_identity() {
        let s = svd(&Matrix::identity(5)).unwrap();
        assert!(s.singular_values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn svd_of_rank_one() {
        let mut rng = seeded_rng(1);
        let u: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
        let v: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
        let (nu, nv) = (norm(&u), norm(&v));
        let m = Matrix::column_vector(&u.iter().map(|x| x / nu).collect::<Vec<_>>())
            .unwrap()
            .matmul_t(&Matrix::column_vector(&v.iter().map(|x| x / nv).collect::<Vec<_>>()).unwrap())
            .unwrap();
        let s = svd(&m).unwrap();
        assert!((s.singular_values[0] - 1.0).abs() < 1e-12);
        assert!(s.singular_values[1..].iter().all(|&x| x < 1e-12));
        assert_orthonormal_cols(&s.u, 1e-10);
        assert_orthonormal_cols(&s.vt.transpose(), 1e-10);
    }

    #[test]
    fn svd_zero_matrix_keeps_orthonormal_factors() {
        let s = svd(&Matrix::zeros(4, 3)).unwrap();
        assert!(s.singular_values.iter().all(|&x| x == 0.0));
        assert_orthonormal_cols(&s.u, 1e-12);
    }

    #[test]
    fn svd_wide_and_tall_round_trip() {
        let mut rng = seeded_rng(11);
        for &(m, n) in &[(7, 3), (3, 7), (1, 5), (5, 1), (16, 16), (40, 25)] {
            let a = Matrix::random_gaussian(m, n, 1.0, &mut rng);
            let s = svd(&a).unwrap();
            assert_eq!(s.u.shape(), (m, m.min(n)));
            assert_eq!(s.vt.shape(), (m.min(n), n));
            assert!(rel_err(&s.reconstruct(), &a) < 1e-12);
            assert_orthonormal_cols(&s.u, 1e-10);
            assert_orthonormal_cols(&s.vt.transpose(), 1e-10);
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = seeded_rng(5);
        let a = Matrix::random_gaussian(6, 4, 1.0, &mut rng);
        let s = svd(&a).unwrap();
        for k in 0..4 {
            let col = s.u.column(k);
            let max = col.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            assert!(max >= 0.0);
        }
        let neg = svd(&a.scale(-1.0)).unwrap();
        assert_eq!(neg.u, s.u);
    }

    #[test]
    fn rng_determinism_and_distinctness() {
        let mut a = seeded_rng(0);
        let mut b = seeded_rng(0);
        let mut c = seeded_rng(1);
        let da: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let db: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        let dc: Vec<u64> = (0..100).map(|_| c.next_u64()).collect();
        assert_eq!(da, db);
        assert_ne!(da, dc);
    }

    #[test]
    fn gaussian_sample_mean() {
        for seed in [0, 7, 42] {
            let mut r = seeded_rng(seed);
            let n = 100_000;
            let mean = (0..n).map(|_| r.gaussian()).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
        }
    }
}
