//! Dense linear algebra and small numeric helpers.
//!
//! Everything here works on [`Matrix`], a row-major `f64` matrix. The
//! decompositions are deliberately simple (cyclic Jacobi for symmetric
//! eigenproblems, singular values through the Gram matrix) because the
//! matrices involved are at most a few dozen rows wide.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Relative off-diagonal tolerance at which Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-12;
/// Sweep budget before Jacobi gives up with [`Error::NoConvergence`].
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Largest asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues in `[-PSD_CLAMP, 0)` are treated as zero by [`psd_sqrt`].
pub const PSD_CLAMP: f64 = 1e-10;

#[derive(Clone, PartialEq)]
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Wrap row-major data. Fails when the length disagrees with the shape.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix data has {} entries, expected {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact would yield nothing useful for zero-width matrices
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Gather the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::InvalidInput(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (l, &a_il) in a.iter().enumerate() {
                if a_il == 0.0 {
                    continue;
                }
                for (o_j, &b_lj) in o.iter_mut().zip(rhs.row(l)) {
                    *o_j += a_il * b_lj;
                }
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidInput(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "axpy")?;
        Ok(self.zip_map(other, |a, b| a + alpha * b))
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// `(A + Aᵀ) / 2`, used to scrub rounding asymmetry from products.
    pub fn symmetrized(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in self.iter_rows() {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

/// `(Σ|vᵢ|^p)^(1/p)`.
///
/// For `p ≥ 1` this is the usual norm, for `0 < p < 1` the quasi-norm, and
/// `p = +∞` gives the max-abs norm. The sum is taken on values scaled by the
/// largest magnitude so neither tiny nor large entries under/overflow.
pub fn lp_norm(v: &[f64], p: f64) -> Result<f64> {
    if p.is_nan() || p <= 0.0 {
        return Err(Error::InvalidParameter(format!("norm order must be > 0, got {p}")));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite entry {bad} in lp_norm")));
    }
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 || p.is_infinite() {
        return Ok(max);
    }
    if p == 2.0 {
        return Ok(max * v.iter().map(|x| (x / max).powi(2)).sum::<f64>().sqrt());
    }
    let sum: f64 = v.iter().map(|x| (x.abs() / max).powf(p)).sum();
    Ok(max * sum.powf(1.0 / p))
}

/// Hölder conjugate `q` with `1/p + 1/q = 1` (so 1 ↔ ∞).
pub fn conjugate_exponent(p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "conjugate exponent needs p >= 1, got {p}"
        )));
    }
    Ok(if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    })
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place(z: &mut [f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if let Some(bad) = z.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i))?;
    }
    Ok(out)
}

/// Column means and the population (1/m) covariance of the rows of `x`.
pub fn mean_and_cov(x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (m, d) = x.shape();
    if m < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 rows, got {m}"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in x.iter_rows() {
        for (mu, &v) in mean.iter_mut().zip(r) {
            *mu += v;
        }
    }
    for mu in &mut mean {
        *mu /= m as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in x.iter_rows() {
        for ((c, &v), &mu) in centered.iter_mut().zip(r).zip(&mean) {
            *c = v - mu;
        }
        for a in 0..d {
            let ca = centered[a];
            for b in a..d {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / m as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok((mean, cov))
}

#[derive(Debug, Clone)]
pub struct SymEigResult {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: Matrix,
}

impl SymEigResult {
    /// `V · diag(f(λ)) · Vᵀ`
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let v = &self.eigenvectors;
        let n = v.rows();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n).map(|k| v[(i, k)] * fl[k] * v[(j, k)]).sum();
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(a: &Matrix) -> Result<SymEigResult> {
    if !a.is_square() {
        return Err(Error::InvalidInput(format!(
            "sym_eig needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput("sym_eig input has non-finite entries".into()));
    }
    let n = a.rows();
    let scale = a.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidInput(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }

    let mut w = a.symmetrized();
    let mut v = Matrix::identity(n);
    let target = JACOBI_TOL * a.frobenius_norm();
    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&w);
        if off <= target {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, off_norm: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = w[(p, p)];
                let aqq = w[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                // signum(0.0) == 1.0, so theta == 0 gives the 45° rotation
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let wkp = w[(k, p)];
                    let wkq = w[(k, q)];
                    w[(k, p)] = c * wkp - s * wkq;
                    w[(k, q)] = s * wkp + c * wkq;
                }
                for k in 0..n {
                    let wpk = w[(p, k)];
                    let wqk = w[(q, k)];
                    w[(p, k)] = c * wpk - s * wqk;
                    w[(q, k)] = s * wpk + c * wqk;
                }
                w[(p, q)] = 0.0;
                w[(q, p)] = 0.0;

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
    order.sort_by(|&i, &j| w[(j, j)].total_cmp(&w[(i, i)]));
    let eigenvalues = order.iter().map(|&i| w[(i, i)]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors,
    })
}

/// Singular values of `a` (descending), as square roots of the eigenvalues
/// of the Gram matrix `AᵀA`.
pub fn svd_singular_values(a: &Matrix) -> Result<Vec<f64>> {
    if !a.is_finite() {
        return Err(Error::InvalidInput("svd input has non-finite entries".into()));
    }
    let gram = a.transpose().matmul(a)?.symmetrized();
    let eig = sym_eig(&gram)?;
    // eigenvalues of AᵀA at rounding level are zero singular values
    let cutoff = eig.eigenvalues.first().copied().unwrap_or(0.0) * f64::EPSILON * gram.rows() as f64;
    Ok(eig
        .eigenvalues
        .iter()
        .map(|&l| if l <= cutoff { 0.0 } else { l.sqrt() })
        .collect())
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn psd_sqrt(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let scale = a.max_abs().max(1.0);
    if let Some(&bad) = eig
        .eigenvalues
        .iter()
        .find(|&&l| l < -PSD_CLAMP * scale)
    {
        return Err(Error::NotPsd(bad));
    }
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt()))
}

/// `Tr((A·B)^{1/2})` for symmetric PSD `A`, `B`, evaluated through the
/// symmetric form `Tr((√A · B · √A)^{1/2})`.
pub fn trace_sqrt_product(a: &Matrix, b: &Matrix) -> Result<f64> {
    let ra = psd_sqrt(a)?;
    let inner = ra.matmul(b)?.matmul(&ra)?.symmetrized();
    let eig = sym_eig(&inner)?;
    let scale = inner.max_abs().max(1.0);
    let mut tr = 0.0;
    for &l in &eig.eigenvalues {
        if l < -PSD_CLAMP * scale {
            return Err(Error::NotPsd(l));
        }
        tr += l.max(0.0).sqrt();
    }
    Ok(tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    #[test]
    fn lp_norm_examples() {
        assert_eq!(lp_norm(&[3.0, 4.0], 2.0).unwrap(), 5.0);
        assert_eq!(lp_norm(&[0.0; 5], 0.3).unwrap(), 0.0);
        // 4^(1/0.3) evaluated in high precision: 101.59366732596479...
        let v = lp_norm(&[1.0; 4], 0.3).unwrap();
        assert!(close(v, 101.593_667_325_964_8, 1e-12), "{v}");
        assert_eq!(lp_norm(&[1.0, -7.0, 2.0], f64::INFINITY).unwrap(), 7.0);
    }

    #[test]
    fn lp_norm_rejects_bad_inputs() {
        assert!(matches!(lp_norm(&[1.0], 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(lp_norm(&[1.0], -1.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(lp_norm(&[f64::NAN], 2.0), Err(Error::InvalidInput(_))));
        assert!(matches!(lp_norm(&[f64::INFINITY], 2.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn conjugates() {
        assert_eq!(conjugate_exponent(1.0).unwrap(), f64::INFINITY);
        assert_eq!(conjugate_exponent(2.0).unwrap(), 2.0);
        assert_eq!(conjugate_exponent(f64::INFINITY).unwrap(), 1.0);
        assert!(conjugate_exponent(0.5).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in s {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!(s.iter().all(|x| x.is_finite()));
        assert!(close(s[0], 1.0, 1e-15) && s[1] < 1e-300);
        let s = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (got, want) in s.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!(close(*got, want, 1e-14));
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn mean_cov_examples() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap();
        let (mu, cov) = mean_and_cov(&x).unwrap();
        assert_eq!(mu, vec![1.0, 1.0]);
        assert_eq!(cov, Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap());

        let x = Matrix::from_rows(&[[1.5, -2.0]; 4]).unwrap();
        let (_, cov) = mean_and_cov(&x).unwrap();
        assert_eq!(cov.max_abs(), 0.0);

        let x = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let (mu, cov) = mean_and_cov(&x).unwrap();
        assert_eq!(mu, vec![2.0]);
        assert_eq!(cov[(0, 0)], 1.0);

        let one = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(mean_and_cov(&one), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn sym_eig_examples() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);

        let e = sym_eig(&Matrix::from_diag(&[2.0, 5.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![5.0, 2.0]);
        assert_eq!(e.eigenvectors.column(0), vec![0.0, 1.0]);
        assert_eq!(e.eigenvectors.column(1), vec![1.0, 0.0]);

        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = sym_eig(&a).unwrap();
        assert!(close(e.eigenvalues[0], 3.0, 1e-14));
        assert!(close(e.eigenvalues[1], 1.0, 1e-14));

        let bad = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn singular_value_examples() {
        assert_eq!(svd_singular_values(&Matrix::identity(4)).unwrap(), vec![1.0; 4]);

        let (m, k, c) = (6, 3, 0.7);
        let a = Matrix::from_fn(m, k, |_, _| c);
        let s = svd_singular_values(&a).unwrap();
        assert!(close(s[0], c * ((m * k) as f64).sqrt(), 1e-12));
        assert!(s[1..].iter().all(|&x| x < 1e-7));

        let z = svd_singular_values(&Matrix::zeros(5, 3)).unwrap();
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn psd_sqrt_examples() {
        assert_eq!(psd_sqrt(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let r = psd_sqrt(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert!(rel_frob(&r, &Matrix::from_diag(&[2.0, 3.0])) < 1e-15);

        // eigenvectors (1,1)/√2 ↦ 3, (1,-1)/√2 ↦ 1
        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let r = psd_sqrt(&a).unwrap();
        let s3 = 3f64.sqrt();
        let want = Matrix::from_rows(&[
            [(s3 + 1.0) / 2.0, (s3 - 1.0) / 2.0],
            [(s3 - 1.0) / 2.0, (s3 + 1.0) / 2.0],
        ])
        .unwrap();
        assert!(rel_frob(&r, &want) < 1e-14);

        let neg = Matrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(psd_sqrt(&neg), Err(Error::NotPsd(_))));
        let tiny_neg = Matrix::from_diag(&[1.0, -1e-12]);
        assert!(psd_sqrt(&tiny_neg).is_ok());
    }

    fn rand_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    fn sym_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..=12).prop_flat_map(|n| rand_matrix(n, n).prop_map(|m| m.symmetrized()))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn holder_inequality(
            (u, v) in (1usize..20).prop_flat_map(|n| (
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(-5.0f64..5.0, n),
            )),
            p in 1.0f64..6.0,
        ) {
            let q = conjugate_exponent(p).unwrap();
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            let bound = lp_norm(&u, p).unwrap() * lp_norm(&v, q).unwrap();
            prop_assert!(dot.abs() <= bound * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn reverse_minkowski_below_one(
            (u, v) in (1usize..20).prop_flat_map(|n| (
                proptest::collection::vec(0.0f64..5.0, n),
                proptest::collection::vec(0.0f64..5.0, n),
            )),
            p in 0.05f64..0.999,
        ) {
            let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
            let lhs = lp_norm(&sum, p).unwrap();
            let rhs = lp_norm(&u, p).unwrap() + lp_norm(&v, p).unwrap();
            prop_assert!(lhs >= rhs * (1.0 - 1e-12));
        }

        #[test]
        fn softmax_sums_to_one_and_permutes(z in proptest::collection::vec(-50.0f64..50.0, 1..12), shift in 0usize..12) {
            let s = softmax(&z).unwrap();
            let total: f64 = s.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let k = shift % z.len();
            let mut zr = z.clone();
            zr.rotate_left(k);
            let mut sr = s.clone();
            sr.rotate_left(k);
            let s2 = softmax(&zr).unwrap();
            for (a, b) in s2.iter().zip(&sr) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn sym_eig_reconstructs(a in sym_strategy()) {
            let e = sym_eig(&a).unwrap();
            let n = a.rows();
            let rec = e.reconstruct_with(|l| l);
            let err = rec.sub(&a).unwrap().frobenius_norm();
            prop_assert!(err <= 1e-8 * a.frobenius_norm().max(1e-300));
            let vtv = e.eigenvectors.transpose().matmul(&e.eigenvectors).unwrap();
            prop_assert!(vtv.sub(&Matrix::identity(n)).unwrap().max_abs() <= 1e-8);
            for w in e.eigenvalues.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn singular_values_match_gram_trace(
            a in (1usize..=12, 1usize..=12).prop_flat_map(|(m, k)| rand_matrix(m, k))
        ) {
            let s = svd_singular_values(&a).unwrap();
            // Σσ² = ‖A‖_F²; largest σ bounds every column norm
            let sq: f64 = s.iter().map(|x| x * x).sum();
            let f2 = a.frobenius_norm().powi(2);
            prop_assert!((sq - f2).abs() <= 1e-8 * f2.max(1.0));
            for j in 0..a.cols() {
                let col = lp_norm(&a.column(j), 2.0).unwrap();
                prop_assert!(col <= s[0] * (1.0 + 1e-8) + 1e-8);
            }
        }

        #[test]
        fn psd_sqrt_squares_back(b in (1usize..=12).prop_flat_map(|n| rand_matrix(n, n))) {
            let a = b.transpose().matmul(&b).unwrap();
            let r = psd_sqrt(&a).unwrap();
            let back = r.matmul(&r).unwrap();
            prop_assert!(back.sub(&a).unwrap().frobenius_norm() <= 1e-7 * a.frobenius_norm().max(1e-300));
        }
    }

    #[test]
    fn trace_sqrt_product_matches_diagonal_case() {
        let a = Matrix::from_diag(&[4.0, 1.0, 9.0]);
        let b = Matrix::from_diag(&[1.0, 16.0, 4.0]);
        // √(4·1) + √(1·16) + √(9·4)
        let t = trace_sqrt_product(&a, &b).unwrap();
        assert!(close(t, 2.0 + 4.0 + 6.0, 1e-12));
    }
}
