//! Dense row-major matrices and LU factorization with partial pivoting.
//!
//! Determinants are tracked in the log domain: a 512×512 monomial matrix
//! routinely has |det| far outside the f64 range.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::math;
use crate::{Error, Result};

/// A matrix counts as singular when its reciprocal 1-norm condition number
/// falls below `SINGULAR_TOLERANCE * n`.
pub const SINGULAR_TOLERANCE: f64 = f64::EPSILON;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn mul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: rhs.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let orow = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: x.len(),
            });
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(math::abs(*x)))
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut norms = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (n, x) in norms.iter_mut().zip(self.row(r)) {
                *n += x * x;
            }
        }
        norms.iter_mut().for_each(|n| *n = math::sqrt(*n));
        norms
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest |a - b| over entries; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.rows != other.rows || self.cols != other.cols {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max(math::abs(a - b)))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `P A = L U` with unit lower-triangular `L`.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
    zero_pivot: bool,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Lu> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch {
                expected: a.rows(),
                found: a.cols(),
            });
        }
        let n = a.rows();
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let mut zero_pivot = false;
        for k in 0..n {
            let mut p = k;
            let mut best = math::abs(lu[k * n + k]);
            for r in k + 1..n {
                let v = math::abs(lu[r * n + k]);
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                zero_pivot = true;
                continue;
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                if f == 0.0 {
                    continue;
                }
                let (upper, lower) = lu.split_at_mut(r * n);
                let krow = &upper[k * n + k + 1..k * n + n];
                let rrow = &mut lower[k + 1..n];
                for (x, y) in rrow.iter_mut().zip(krow) {
                    *x -= f * y;
                }
            }
        }
        Ok(Lu {
            n,
            lu,
            perm,
            sign,
            zero_pivot,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// True when elimination hit an exactly zero (or non-finite) pivot.
    pub fn has_zero_pivot(&self) -> bool {
        self.zero_pivot
    }

    /// `ln |det A|`, or `-inf` for an exactly singular matrix.
    pub fn ln_abs_det(&self) -> f64 {
        if self.zero_pivot {
            return f64::NEG_INFINITY;
        }
        (0..self.n)
            .map(|k| math::ln(math::abs(self.lu[k * self.n + k])))
            .sum()
    }

    /// Sign of the determinant (0 when singular).
    pub fn det_sign(&self) -> f64 {
        if self.zero_pivot {
            return 0.0;
        }
        (0..self.n).fold(self.sign, |s, k| {
            if self.lu[k * self.n + k] < 0.0 {
                -s
            } else {
                s
            }
        })
    }

    /// Determinant in linear scale; may overflow or underflow for large `n`.
    pub fn det(&self) -> f64 {
        self.det_sign() * math::exp(self.ln_abs_det())
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let mut s = x[r];
            for c in 0..r {
                s -= self.lu[r * n + c] * x[c];
            }
            x[r] = s;
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for c in r + 1..n {
                s -= self.lu[r * n + c] * x[c];
            }
            x[r] = s / self.lu[r * n + r];
        }
        x
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // A^T = U^T L^T P, so solve U^T z = b, L^T w = z, x = P^T w.
        let mut z = b.to_vec();
        for r in 0..n {
            let mut s = z[r];
            for c in 0..r {
                s -= self.lu[c * n + r] * z[c];
            }
            z[r] = s / self.lu[r * n + r];
        }
        for r in (0..n).rev() {
            let mut s = z[r];
            for c in r + 1..n {
                s -= self.lu[c * n + r] * z[c];
            }
            z[r] = s;
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = z[k];
        }
        x
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.n;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e);
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        inv
    }
}

/// `ln |det A| - sum_c ln ||a_c||`, always `<= 0` by Hadamard's inequality.
pub fn ln_hadamard_ratio(a: &Matrix, lu: &Lu) -> f64 {
    let norms: f64 = a.column_norms().iter().map(|n| math::ln(*n)).sum();
    lu.ln_abs_det() - norms
}

fn norm_1(a: &Matrix) -> f64 {
    (0..a.cols())
        .map(|c| (0..a.rows()).map(|r| math::abs(a[(r, c)])).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `1 / (||A||_1 ||A^-1||_1)`, computed from an explicit inverse. Zero for a
/// zero pivot or a non-finite inverse.
pub fn reciprocal_condition(a: &Matrix, lu: &Lu) -> f64 {
    if lu.has_zero_pivot() {
        return 0.0;
    }
    let inv = lu.inverse();
    let prod = norm_1(a) * norm_1(&inv);
    if prod.is_finite() && prod > 0.0 {
        1.0 / prod
    } else {
        0.0
    }
}

/// Scales rows, then columns, so the largest magnitude in each is 1.
/// Zero rows and columns are left alone.
pub fn equilibrate(a: &Matrix) -> Matrix {
    let mut m = a.clone();
    for r in 0..m.rows() {
        let peak = m.row(r).iter().fold(0.0f64, |p, v| p.max(math::abs(*v)));
        if peak > 0.0 {
            m.row_mut(r).iter_mut().for_each(|v| *v /= peak);
        }
    }
    for c in 0..m.cols() {
        let peak = (0..m.rows()).fold(0.0f64, |p, r| p.max(math::abs(m[(r, c)])));
        if peak > 0.0 {
            for r in 0..m.rows() {
                m[(r, c)] /= peak;
            }
        }
    }
    m
}

/// Singular when the reciprocal condition number of the equilibrated matrix
/// is below `SINGULAR_TOLERANCE * n`. Row and column scaling do not change
/// whether a matrix is singular, so they are divided out first.
pub fn is_numerically_singular(a: &Matrix, lu: &Lu) -> bool {
    if lu.has_zero_pivot() {
        return true;
    }
    let e = equilibrate(a);
    let rcond = match Lu::factor(&e) {
        Ok(elu) => reciprocal_condition(&e, &elu),
        Err(_) => 0.0,
    };
    !(rcond >= SINGULAR_TOLERANCE * a.rows() as f64)
}

/// Relative residual `||A x - b||_inf / (||A||_inf ||x||_inf + ||b||_inf)`.
pub fn relative_residual(a: &Matrix, x: &[f64], b: &[f64]) -> f64 {
    let mut res: f64 = 0.0;
    let mut anorm: f64 = 0.0;
    for r in 0..a.rows() {
        let row = a.row(r);
        let ax: f64 = row.iter().zip(x).map(|(p, q)| p * q).sum();
        res = res.max(math::abs(ax - b[r]));
        anorm = anorm.max(row.iter().map(|v| math::abs(*v)).sum());
    }
    let xn = x.iter().fold(0.0f64, |m, v| m.max(math::abs(*v)));
    let bn = b.iter().fold(0.0f64, |m, v| m.max(math::abs(*v)));
    let denom = anorm * xn + bn;
    if denom == 0.0 {
        res
    } else {
        res / denom
    }
}

/// `b - a·x` with a compensated dot product, accurate to about twice
/// working precision.
fn residual_compensated(row: &[f64], x: &[f64], b: f64) -> f64 {
    let (mut sum, mut err) = (b, 0.0);
    for (p, q) in row.iter().zip(x) {
        let prod = -p * q;
        let prod_err = libm::fma(-*p, *q, -prod);
        let t = sum + prod;
        let z = t - sum;
        err += (sum - (t - z)) + (prod - z) + prod_err;
        sum = t;
    }
    sum + err
}

/// Solves `A x = b` from an existing factorization, then applies up to
/// `rounds` steps of iterative refinement with residuals computed in
/// extended precision. Returns the solution and its final relative residual.
pub fn solve_refined(a: &Matrix, lu: &Lu, b: &[f64], rounds: usize) -> (Vec<f64>, f64) {
    let mut x = lu.solve(b);
    for _ in 0..rounds {
        let r: Vec<f64> = (0..a.rows()).map(|i| residual_compensated(a.row(i), &x, b[i])).collect();
        let dx = lu.solve(&r);
        if !dx.iter().all(|v| v.is_finite()) {
            break;
        }
        let xn = x.iter().fold(0.0f64, |m, v| m.max(math::abs(*v)));
        let dn = dx.iter().fold(0.0f64, |m, v| m.max(math::abs(*v)));
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
        if dn <= f64::EPSILON * xn {
            break;
        }
    }
    let residual = relative_residual(a, &x, b);
    (x, residual)
}

/// Inverse of a small square matrix, failing on numerical singularity.
pub fn invert(a: &Matrix) -> Result<Matrix> {
    let lu = Lu::factor(a)?;
    if is_numerically_singular(a, &lu) {
        return Err(Error::Singular);
    }
    Ok(lu.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn det_of_known_matrices() {
        let a = mat(&[&[4.0, 3.0], &[6.0, 3.0]]);
        let lu = Lu::factor(&a).unwrap();
        assert!((lu.det() - (-6.0)).abs() < 1e-12);
        let b = mat(&[&[2.0, 0.0, 0.0], &[0.0, 3.0, 0.0], &[0.0, 0.0, -1.0]]);
        assert!((Lu::factor(&b).unwrap().det() + 6.0).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_detected() {
        let a = mat(&[&[1.0, 2.0], &[2.0, 4.0]]);
        let lu = Lu::factor(&a).unwrap();
        assert!(is_numerically_singular(&a, &lu));
        assert!(invert(&a).is_err());
        let z = Matrix::zeros(3, 3);
        let lz = Lu::factor(&z).unwrap();
        assert!(lz.has_zero_pivot());
        assert_eq!(lz.ln_abs_det(), f64::NEG_INFINITY);
    }

    #[test]
    fn solve_and_transpose_solve() {
        let a = mat(&[&[2.0, 1.0, 0.5], &[0.3, 3.0, 1.0], &[1.0, -1.0, 4.0]]);
        let lu = Lu::factor(&a).unwrap();
        let b = [1.0, 2.0, 3.0];
        let x = lu.solve(&b);
        let ax = a.mul_vec(&x).unwrap();
        for (p, q) in ax.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        let y = lu.solve_transpose(&b);
        let aty = a.transpose().mul_vec(&y).unwrap();
        for (p, q) in aty.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        let (xr, res) = solve_refined(&a, &lu, &b, 3);
        assert!(res < 1e-14);
        assert!(xr.iter().zip(&x).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = mat(&[&[0.5, 1.5], &[1.2, 0.7]]);
        let inv = invert(&a).unwrap();
        let id = a.mul(&inv).unwrap();
        assert!(id.max_abs_diff(&Matrix::identity(2)) < 1e-14);
    }

    #[test]
    fn det_matches_nalgebra_oracle() {
        let data = [
            0.9, 1.7, 0.6, 1.1, //
            1.3, 0.8, 1.9, 0.7, //
            0.55, 1.25, 1.05, 1.6, //
            1.95, 0.65, 0.75, 1.45,
        ];
        let a = Matrix::from_vec(4, 4, data.to_vec()).unwrap();
        let oracle = nalgebra::DMatrix::from_row_slice(4, 4, &data).determinant();
        assert!((Lu::factor(&a).unwrap().det() - oracle).abs() < 1e-12 * oracle.abs().max(1.0));
    }
}
