//! Small dense linear-algebra kernel.
//!
//! Everything here works on row-major [`Mat`] values and plain `Vec<f64>`
//! vectors. Problem sizes in this crate are tiny (a handful of states, a
//! prediction horizon of tens of steps), so all factorizations are dense
//! and direct.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Pivot magnitude below which LU reports a singular matrix.
pub const LU_PIVOT_TOL: f64 = 1e-12;
/// Diagonal pivot at or below which Cholesky reports a non-PD matrix.
pub const CHOLESKY_PIVOT_TOL: f64 = 1e-14;
/// Jitter callers may add to the diagonal of a PSD matrix before Cholesky.
pub const PSD_JITTER: f64 = 1e-12;
/// Iteration cap for the Schur iteration behind [`spectral_radius`].
pub const SPECTRAL_MAX_ITER: usize = 10_000;
/// Largest row or column count [`kron`] will produce.
pub const KRON_DIM_CAP: usize = 4096;

#[derive(Clone, PartialEq)]
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

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from row-major storage.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Ragged input is rejected.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * m);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {m}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: n,
            cols: m,
            data,
        })
    }

    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn row(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row_slice(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row_slice(i), x)).collect()
    }

    /// `selfᵀ x` without forming the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "tr_matvec dimension mismatch");
        let mut y = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            axpy(*xi, self.row_slice(i), &mut y);
        }
        y
    }

    /// `xᵀ self x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.matvec(x))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row_slice(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// `(self + selfᵀ)/2`.
    pub fn symmetrize(&self) -> Self {
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        let mut b = Self::zeros(rows, cols);
        for i in 0..rows {
            b.data[i * cols..(i + 1) * cols]
                .copy_from_slice(&self.data[(r0 + i) * self.cols + c0..][..cols]);
        }
        b
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Mat) {
        for i in 0..b.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + b.cols].copy_from_slice(b.row_slice(i));
        }
    }

    /// Elementwise maximum absolute difference.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }

    pub fn powi(&self, k: usize) -> Self {
        assert!(self.is_square());
        let mut out = Self::identity(self.rows);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.to_rows()).finish()
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Mat {
    type Output = Mat;

    fn mul(self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul dimension mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, a) in self.row_slice(i).iter().enumerate() {
                if *a != 0.0 {
                    axpy(*a, rhs.row_slice(k), orow);
                }
            }
        }
        out
    }
}

impl Add for &Mat {
    type Output = Mat;

    fn add(self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "add dimension mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

impl Sub for &Mat {
    type Output = Mat;

    fn sub(self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "sub dimension mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl Neg for &Mat {
    type Output = Mat;

    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn vadd(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn vsub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// LU factorization with partial pivoting.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(m: &Mat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "LU of non-square {}x{} matrix",
                m.rows, m.cols
            )));
        }
        let n = m.rows;
        let mut lu = m.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if pmax < LU_PIVOT_TOL {
                return Err(Error::SingularMatrix { pivot: pmax });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let piv = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / piv;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n, "LU solve dimension mismatch");
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s = dot(&self.lu[i * n..i * n + i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s = dot(&self.lu[i * n + i + 1..(i + 1) * n], &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }

    /// Solves `M X = B` column by column.
    pub fn solve_mat(&self, b: &Mat) -> Mat {
        let bt = b.transpose();
        let mut xt = Mat::zeros(b.cols, b.rows);
        for j in 0..b.cols {
            let col = self.solve(bt.row_slice(j));
            xt.data[j * b.rows..(j + 1) * b.rows].copy_from_slice(&col);
        }
        xt.transpose()
    }
}

pub fn solve_linear(m: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != m.rows {
        return Err(Error::DimensionMismatch(format!(
            "rhs of length {} for {}x{} system",
            b.len(),
            m.rows,
            m.cols
        )));
    }
    Ok(Lu::new(m)?.solve(b))
}

pub fn inverse(m: &Mat) -> Result<Mat> {
    let lu = Lu::new(m)?;
    Ok(lu.solve_mat(&Mat::identity(m.rows)))
}

/// Cholesky factor `L` (lower triangular, `L Lᵀ = M`) with solve support.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    pub fn new(m: &Mat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "Cholesky of non-square {}x{} matrix",
                m.rows, m.cols
            )));
        }
        let n = m.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let d = m[(j, j)] - dot(&l.row_slice(j)[..j], &l.row_slice(j)[..j]);
            if d <= CHOLESKY_PIVOT_TOL || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: d });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let s = m[(i, j)] - dot(&l.row_slice(i)[..j], &l.row_slice(j)[..j]);
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &Mat {
        &self.l
    }

    pub fn into_factor(self) -> Mat {
        self.l
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows;
        assert_eq!(b.len(), n, "Cholesky solve dimension mismatch");
        let mut y = b.to_vec();
        for i in 0..n {
            let s = dot(&self.l.row_slice(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.l[(k, i)] * y[k]).sum();
            y[i] = (y[i] - s) / self.l[(i, i)];
        }
        y
    }
}

pub fn cholesky(m: &Mat) -> Result<Mat> {
    Ok(Cholesky::new(m)?.into_factor())
}

/// Largest eigenvalue modulus, via a real Schur decomposition.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    spectral_radius_with(m, SPECTRAL_MAX_ITER)
}

pub fn spectral_radius_with(m: &Mat, max_iter: usize) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "spectral radius of non-square {}x{} matrix",
            m.rows, m.cols
        )));
    }
    if m.rows == 0 {
        return Ok(0.0);
    }
    let schur = m
        .to_nalgebra()
        .try_schur(f64::EPSILON, max_iter)
        .ok_or(Error::NonConvergence {
            what: "spectral radius",
            iterations: max_iter,
        })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .fold(0.0, |r, z| r.max(z.norm())))
}

pub fn kron(a: &Mat, b: &Mat) -> Result<Mat> {
    kron_capped(a, b, KRON_DIM_CAP)
}

pub fn kron_capped(a: &Mat, b: &Mat, cap: usize) -> Result<Mat> {
    let rows = a.rows.checked_mul(b.rows);
    let cols = a.cols.checked_mul(b.cols);
    let (rows, cols) = match (rows, cols) {
        (Some(r), Some(c)) if r <= cap && c <= cap => (r, c),
        _ => {
            return Err(Error::DimensionOverflow {
                rows: a.rows.saturating_mul(b.rows),
                cols: a.cols.saturating_mul(b.cols),
                cap,
            })
        }
    };
    let mut out = Mat::zeros(rows, cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for p in 0..b.rows {
                for q in 0..b.cols {
                    out[(i * b.rows + p, j * b.cols + q)] = s * b[(p, q)];
                }
            }
        }
    }
    Ok(out)
}

pub fn kron_vec(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter()
        .flat_map(|a| y.iter().map(move |b| a * b))
        .collect()
}

/// Numerical rank by Gaussian elimination with full pivoting; pivots below
/// `rel_tol` times the largest pivot count as zero.
pub fn rank(m: &Mat, rel_tol: f64) -> usize {
    let (r, c) = m.shape();
    let mut a = m.clone();
    let mut rank = 0;
    let mut first_pivot = 0.0;
    for k in 0..r.min(c) {
        let mut best = (k, k, 0.0);
        for i in k..r {
            for j in k..c {
                let v = a[(i, j)].abs();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if k == 0 {
            first_pivot = best.2;
        }
        if best.2 == 0.0 || best.2 <= rel_tol * first_pivot {
            break;
        }
        let (pi, pj, _) = best;
        for j in 0..c {
            a.data.swap(k * c + j, pi * c + j);
        }
        for i in 0..r {
            a.data.swap(i * c + k, i * c + pj);
        }
        let piv = a[(k, k)];
        for i in k + 1..r {
            let f = a[(i, k)] / piv;
            for j in k..c {
                let v = a[(k, j)];
                a[(i, j)] -= f * v;
            }
        }
        rank += 1;
    }
    rank
}

/// Eigenvalues (ascending) and orthonormal eigenvectors (as columns) of a
/// symmetric matrix.
pub fn symmetric_eigen(m: &Mat) -> Result<(Vec<f64>, Mat)> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "symmetric eigen of non-square {}x{} matrix",
            m.rows, m.cols
        )));
    }
    let eig = m.symmetrize().to_nalgebra().symmetric_eigen();
    let mut order: Vec<usize> = (0..m.rows).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Mat::zeros(m.rows, m.rows);
    for (c, &i) in order.iter().enumerate() {
        for r in 0..m.rows {
            vecs[(r, c)] = eig.eigenvectors[(r, i)];
        }
    }
    Ok((vals, vecs))
}

pub fn min_eigenvalue(m: &Mat) -> Result<f64> {
    Ok(symmetric_eigen(m)?.0.first().copied().unwrap_or(0.0))
}

/// Symmetric PSD square root. Eigenvalues above `-tol` are clipped at zero;
/// anything more negative is reported as an indefinite matrix.
pub fn psd_sqrt(m: &Mat, tol: f64) -> Result<Mat> {
    let (vals, vecs) = symmetric_eigen(m)?;
    if let Some(&lo) = vals.first() {
        if lo < -tol {
            return Err(Error::NotPositiveDefinite { pivot: lo });
        }
    }
    let d = Mat::diag(&vals.iter().map(|v| v.max(0.0).sqrt()).collect::<Vec<_>>());
    Ok((&(&vecs * &d) * &vecs.transpose()).symmetrize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(rows).unwrap()
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random_mat(n: usize, m: usize, seed: u64) -> Mat {
        let mut r = lcg(seed);
        Mat::from_vec(n, m, (0..n * m).map(|_| r()).collect()).unwrap()
    }

    #[test]
    fn solve_identity_and_diagonal() {
        assert_eq!(
            solve_linear(&Mat::identity(2), &[3.0, 4.0]).unwrap(),
            vec![3.0, 4.0]
        );
        let x = solve_linear(&Mat::diag(&[2.0, 4.0]), &[2.0, 8.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn solve_round_trip_5x5() {
        let m = &random_mat(5, 5, 7) + &Mat::identity(5).scale(4.0);
        let xs = [1.0, -2.0, 0.5, 3.0, -0.25];
        let b = m.matvec(&xs);
        let x = solve_linear(&m, &b).unwrap();
        for (a, e) in x.iter().zip(xs) {
            assert!((a - e).abs() < 1e-9);
        }
        assert!(norm2(&vsub(&m.matvec(&x), &b)) <= 1e-10 * (1.0 + norm2(&b)));
    }

    #[test]
    fn singular_matrix_is_reported() {
        let m = mat(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(
            solve_linear(&m, &[1.0, 1.0]),
            Err(Error::SingularMatrix { .. })
        ));
        assert!(matches!(
            solve_linear(&Mat::identity(2), &[1.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn cholesky_examples() {
        let l = cholesky(&Mat::identity(2).scale(4.0)).unwrap();
        assert_eq!(l, Mat::identity(2).scale(2.0));
        let l = cholesky(&Mat::identity(2).scale(0.2)).unwrap();
        assert!(l.max_abs_diff(&Mat::identity(2).scale(0.2f64.sqrt())) < 1e-15);
        assert!(matches!(
            cholesky(&mat(&[&[1.0, 0.0], &[0.0, 0.0]])),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let g = random_mat(4, 4, 11);
        let m = &(&g * &g.transpose()) + &Mat::identity(4).scale(1e-6);
        let l = cholesky(&m).unwrap();
        assert!((&l * &l.transpose()).max_abs_diff(&m) < 1e-9);
        let b = [1.0, 2.0, 3.0, 4.0];
        let x = Cholesky::new(&m).unwrap().solve(&b);
        assert!(norm2(&vsub(&m.matvec(&x), &b)) < 1e-6);
    }

    #[test]
    fn spectral_radius_examples() {
        assert!((spectral_radius(&Mat::diag(&[0.5, -0.25])).unwrap() - 0.5).abs() < 1e-12);
        let rot = mat(&[&[0.0, 1.0], &[-0.25, 0.0]]);
        assert!((spectral_radius(&rot).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kron_examples() {
        assert_eq!(
            kron(&Mat::identity(2), &Mat::identity(2)).unwrap(),
            Mat::identity(4)
        );
        let k = kron(&Mat::row(&[1.0, 2.0]), &Mat::column(&[3.0, 4.0])).unwrap();
        assert_eq!(k, mat(&[&[3.0, 6.0], &[4.0, 8.0]]));
        assert!(matches!(
            kron_capped(&Mat::identity(10), &Mat::identity(10), 64),
            Err(Error::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn rank_detects_deficiency() {
        assert_eq!(rank(&mat(&[&[1.0, 2.0], &[2.0, 4.0]]), 1e-9), 1);
        assert_eq!(rank(&Mat::identity(3), 1e-9), 3);
        assert_eq!(rank(&Mat::zeros(2, 3), 1e-9), 0);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let q = mat(&[&[0.36, 0.312], &[0.312, 0.2704]]);
        let s = psd_sqrt(&q, 1e-12).unwrap();
        assert!((&s * &s).max_abs_diff(&q) < 1e-12);
    }

    fn arb_mat(n: usize) -> impl Strategy<Value = Mat> {
        proptest::collection::vec(-1.0f64..1.0, n * n)
            .prop_map(move |d| Mat::from_vec(n, n, d).unwrap())
    }

    proptest! {
        #[test]
        fn prop_solve_round_trip(
            m in arb_mat(4),
            x in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let m = &m + &Mat::identity(4).scale(5.0);
            let got = solve_linear(&m, &m.matvec(&x)).unwrap();
            for (a, e) in got.iter().zip(&x) {
                prop_assert!((a - e).abs() <= 1e-9 * (1.0 + e.abs()));
            }
        }

        #[test]
        fn prop_cholesky_reconstructs(g in arb_mat(4)) {
            let m = &(&g * &g.transpose()) + &Mat::identity(4).scale(1e-6);
            let l = cholesky(&m).unwrap();
            prop_assert!((&l * &l.transpose()).max_abs_diff(&m) <= 1e-10);
        }

        #[test]
        fn prop_spectral_radius_homogeneous(m in arb_mat(3), c in -3.0f64..3.0) {
            let r = spectral_radius(&m).unwrap();
            let rc = spectral_radius(&m.scale(c)).unwrap();
            prop_assert!((rc - c.abs() * r).abs() <= 1e-8 * (1.0 + rc));
        }

        #[test]
        fn prop_kron_mixed_product(
            a in arb_mat(2), b in arb_mat(2),
            x in proptest::collection::vec(-1.0f64..1.0, 2),
            y in proptest::collection::vec(-1.0f64..1.0, 2),
        ) {
            let lhs = kron(&a, &b).unwrap().matvec(&kron_vec(&x, &y));
            let rhs = kron_vec(&a.matvec(&x), &b.matvec(&y));
            for (l, r) in lhs.iter().zip(&rhs) {
                prop_assert!((l - r).abs() <= 1e-12);
            }
        }
    }
}
