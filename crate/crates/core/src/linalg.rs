//! Small dense linear algebra on row-major `f64` matrices.
//!
//! Sizes in this crate stay below a few hundred, so everything here is a
//! straightforward O(n³) routine with no blocking.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// A column vector.
    pub fn column_vector(v: &[f64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul: inner dimensions differ");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul: row counts differ");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec: dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · v`.
    pub fn t_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "t_mul_vec: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// `(A + Aᵀ)/2`.
    pub fn symmetrized(&self) -> Mat {
        assert!(self.is_square());
        Mat::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }

    /// `‖AᵀA − I‖_max`, the orthonormality defect of the columns.
    pub fn orthonormality_defect(&self) -> f64 {
        self.t_matmul(self).max_abs_diff(&Mat::identity(self.cols))
    }

    pub fn hstack(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows);
        Mat::from_fn(self.rows, self.cols + other.cols, |i, j| {
            if j < self.cols {
                self[(i, j)]
            } else {
                other[(i, j - self.cols)]
            }
        })
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &Mat {
    type Output = Mat;

    fn add(self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Mat {
    type Output = Mat;

    fn sub(self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul for &Mat {
    type Output = Mat;

    fn mul(self, rhs: &Mat) -> Mat {
        self.matmul(rhs)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct EigenDecomp {
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns, matching `values`.
    pub vectors: Mat,
}

impl EigenDecomp {
    /// `Q · diag(f(λ)) · Qᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.values.len();
        let q = &self.vectors;
        let mut out = Mat::zeros(q.rows(), q.rows());
        for k in 0..n {
            let w = f(self.values[k]);
            if w == 0.0 {
                continue;
            }
            for i in 0..q.rows() {
                let qi = q[(i, k)] * w;
                if qi == 0.0 {
                    continue;
                }
                for j in 0..q.rows() {
                    out[(i, j)] += qi * q[(j, k)];
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Mat {
        self.reconstruct_with(|x| x)
    }
}

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-10;

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn symmetric_eigen(a: &Mat) -> Result<EigenDecomp> {
    if !a.is_square() {
        return Err(Error::Precondition(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(Error::Precondition(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Mat::identity(n);
    let scale = m.frobenius_norm();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= JACOBI_TOL * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |i, k| v[(i, order[k])]);
    Ok(EigenDecomp { values, vectors })
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues in
/// `[-neg_tol, 0)` are clamped to zero; anything more negative is an error.
pub fn sym_sqrt(a: &Mat, neg_tol: f64) -> Result<Mat> {
    let eig = symmetric_eigen(a)?;
    if let Some(&min) = eig.values.last() {
        if min < -neg_tol {
            return Err(Error::Domain(format!(
                "matrix is indefinite (smallest eigenvalue {min:e})"
            )));
        }
    }
    Ok(eig.reconstruct_with(|x| x.max(0.0).sqrt()))
}

/// Singular values of `a`, descending.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    let gram = if a.rows() >= a.cols() {
        a.t_matmul(a)
    } else {
        a.matmul(&a.transpose())
    };
    // Gram matrices are symmetric by construction.
    let eig = symmetric_eigen(&gram.symmetrized()).expect("gram matrix is symmetric");
    eig.values.iter().map(|x| x.max(0.0).sqrt()).collect()
}

/// Thin QR factorization by Householder reflections.
///
/// Returns `(Q, R)` with `Q` m×n orthonormal and `R` n×n upper triangular
/// with a nonnegative diagonal.
pub fn thin_qr(a: &Mat) -> Result<(Mat, Mat)> {
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        return Err(Error::Precondition(format!(
            "thin QR needs rows >= cols, got {m}x{n}"
        )));
    }
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        let alpha = norm(&v);
        if alpha == 0.0 {
            reflectors.push(vec![0.0; m - k]);
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vn = norm(&v);
        for x in &mut v {
            *x /= vn;
        }
        for j in k..n {
            let proj: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
            for i in k..m {
                r[(i, j)] -= 2.0 * v[i - k] * proj;
            }
        }
        reflectors.push(v);
    }
    let mut q = Mat::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for j in 0..n {
            let proj: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
            if proj == 0.0 {
                continue;
            }
            for i in k..m {
                q[(i, j)] -= 2.0 * v[i - k] * proj;
            }
        }
    }
    let mut r_top = Mat::from_fn(n, n, |i, j| if j >= i { r[(i, j)] } else { 0.0 });
    for i in 0..n {
        if r_top[(i, i)] < 0.0 {
            for j in 0..n {
                r_top[(i, j)] = -r_top[(i, j)];
            }
            for row in 0..m {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }
    Ok((q, r_top))
}

/// Orthonormal polar factor `A (AᵀA)^{-1/2}` of a full-column-rank matrix.
pub fn polar_factor(a: &Mat) -> Result<Mat> {
    let eig = symmetric_eigen(&a.t_matmul(a).symmetrized())?;
    let min = eig.values.last().copied().unwrap_or(0.0);
    if min <= 0.0 {
        return Err(Error::Precondition(
            "polar factor needs full column rank".into(),
        ));
    }
    Ok(a.matmul(&eig.reconstruct_with(|x| 1.0 / x.sqrt())))
}

/// Inverse by Gauss–Jordan elimination with partial pivoting.
pub fn inverse(a: &Mat) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::Precondition("inverse of a non-square matrix".into()));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = Mat::identity(n);
    let scale = a.max_abs();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap_or(col);
        let pivot = m[(pivot_row, col)];
        if pivot.abs() <= 1e-14 * scale || pivot == 0.0 {
            return Err(Error::SingularCovariance(format!(
                "matrix is numerically singular at column {col}"
            )));
        }
        if pivot_row != col {
            for j in 0..n {
                m.as_mut_slice().swap(pivot_row * n + j, col * n + j);
                inv.as_mut_slice().swap(pivot_row * n + j, col * n + j);
            }
        }
        let p = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[(i, col)];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[(i, j)] -= f * m[(col, j)];
                inv[(i, j)] -= f * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}

/// Principal angles (radians, ascending) between the column spans of two
/// matrices with orthonormal columns.
///
/// Small angles come from the sines and large ones from the cosines, which
/// keeps both ends accurate.
pub fn principal_angles(a: &Mat, b: &Mat) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            got: b.rows(),
        });
    }
    let (a, b) = if a.cols() >= b.cols() { (a, b) } else { (b, a) };
    let m = a.t_matmul(b);
    let cosines = singular_values(&m);
    let residual = b - &a.matmul(&m);
    let mut sines = singular_values(&residual);
    sines.reverse();
    let k = b.cols();
    Ok((0..k)
        .map(|i| {
            let c = cosines[i].min(1.0);
            if c * c < 0.5 {
                c.acos()
            } else {
                sines[i].min(1.0).asin()
            }
        })
        .collect())
}

/// Random `d×r` matrix with orthonormal columns: the Q factor of a Gaussian
/// matrix, which is Haar-distributed on the Stiefel manifold.
pub fn random_orthonormal(d: usize, r: usize, rng: &mut crate::rng::SeedStream) -> Mat {
    let g = rng.normal_mat(d, r);
    thin_qr(&g).expect("d >= r").0
}

/// Sum with a fixed pairwise tree, so the result does not depend on how the
/// terms were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        n if n <= 8 => xs.iter().sum(),
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_identity_and_diagonal() {
        let e = symmetric_eigen(&Mat::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);

        let e = symmetric_eigen(&Mat::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors[(1, 0)].abs(), 1.0);
        assert_eq!(e.vectors[(0, 1)].abs(), 1.0);
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(symmetric_eigen(&a), Err(Error::Precondition(_))));
    }

    #[test]
    fn eigen_matches_characteristic_roots_2x2() {
        // [[a, b], [b, c]] has roots (a+c)/2 ± sqrt(((a-c)/2)^2 + b^2).
        let (a, b, c) = (2.5, -0.75, 1.0);
        let m = Mat::from_rows(&[vec![a, b], vec![b, c]]).unwrap();
        let e = symmetric_eigen(&m).unwrap();
        let mid = (a + c) / 2.0;
        let rad = (((a - c) / 2.0).powi(2) + b * b).sqrt();
        assert!((e.values[0] - (mid + rad)).abs() < 1e-10);
        assert!((e.values[1] - (mid - rad)).abs() < 1e-10);
    }

    #[test]
    fn eigen_matches_characteristic_roots_3x3() {
        // Tridiagonal [[2,-1,0],[-1,2,-1],[0,-1,2]] has eigenvalues 2 - 2cos(kπ/4).
        let m = Mat::from_rows(&[
            vec![2.0, -1.0, 0.0],
            vec![-1.0, 2.0, -1.0],
            vec![0.0, -1.0, 2.0],
        ])
        .unwrap();
        let e = symmetric_eigen(&m).unwrap();
        let mut expected: Vec<f64> = (1..=3)
            .map(|k| 2.0 - 2.0 * (k as f64 * std::f64::consts::PI / 4.0).cos())
            .collect();
        expected.reverse();
        for (got, want) in e.values.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn qr_is_orthonormal_with_positive_diagonal() {
        let a = Mat::from_rows(&[
            vec![1.0, 2.0],
            vec![-3.0, 0.5],
            vec![0.25, 4.0],
            vec![2.0, -1.0],
        ])
        .unwrap();
        let (q, r) = thin_qr(&a).unwrap();
        assert!(q.orthonormality_defect() < 1e-14);
        assert!(r[(0, 0)] > 0.0 && r[(1, 1)] > 0.0);
        assert!(q.matmul(&r).max_abs_diff(&a) < 1e-13);
    }

    #[test]
    fn inverse_of_singular_fails() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(inverse(&a), Err(Error::SingularCovariance(_))));
    }

    #[test]
    fn principal_angles_of_axis_planes() {
        let e1 = Mat::column_vector(&[1.0, 0.0, 0.0]);
        let e2 = Mat::column_vector(&[0.0, 1.0, 0.0]);
        let diag = Mat::column_vector(&[1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0]);
        assert!(principal_angles(&e1, &e1).unwrap()[0].abs() < 1e-15);
        let right = principal_angles(&e1, &e2).unwrap()[0];
        assert!((right - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let quarter = principal_angles(&e1, &diag).unwrap()[0];
        assert!((quarter - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn small_principal_angle_resolved() {
        let eps: f64 = 1e-7;
        let a = Mat::column_vector(&[1.0, 0.0]);
        let b = Mat::column_vector(&[eps.cos(), eps.sin()]);
        let ang = principal_angles(&a, &b).unwrap()[0];
        assert!((ang - eps).abs() < 1e-15);
    }
}
