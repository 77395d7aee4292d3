//! Dense double-precision kernels: products, Gram matrices, a Jacobi
//! eigensolver, Gram-based SVD, and spectrum diagnostics.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{check_len, Error, Result};

const JACOBI_MAX_SWEEPS: usize = 500;
const JACOBI_TOL: f64 = 1e-12;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Dense row-major matrix.
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
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("Matrix::from_vec", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks equal-width rows. An empty slice yields a 0×0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("Matrix::from_rows", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Matrix::from_vec(rows.len(), cols, data)
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(c);
        m
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Matrix, c: f64) -> Result<()> {
        self.check_same_shape("Matrix::add_scaled", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec", self.cols, x.len())?;
        Ok(self.row_iter().map(|r| dot(r, x)).collect())
    }

    /// `selfᵀ x`.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec_t", self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &xi) in self.row_iter().zip(x) {
            if xi != 0.0 {
                axpy(xi, r, &mut out);
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len("matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            (self.rows, self.cols, other.cols),
            1.0,
            (&self.data, self.cols, 1),
            (&other.data, other.cols, 1),
            0.0,
            (&mut out.data, other.cols, 1),
        );
        Ok(out)
    }

    /// `selfᵀ self` (cols × cols).
    pub fn gram(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.cols);
        gemm(
            (self.cols, self.rows, self.cols),
            1.0,
            (&self.data, 1, self.cols),
            (&self.data, self.cols, 1),
            0.0,
            (&mut out.data, self.cols, 1),
        );
        out.symmetrize();
        out
    }

    /// `self selfᵀ` (rows × rows).
    pub fn outer_gram(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.rows);
        gemm(
            (self.rows, self.cols, self.rows),
            1.0,
            (&self.data, self.cols, 1),
            (&self.data, 1, self.cols),
            0.0,
            (&mut out.data, self.rows, 1),
        );
        out.symmetrize();
        out
    }

    /// `self otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        check_len("matmul_t", self.cols, other.cols)?;
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            (self.rows, self.cols, other.rows),
            1.0,
            (&self.data, self.cols, 1),
            (&other.data, 1, other.cols),
            0.0,
            (&mut out.data, other.rows, 1),
        );
        Ok(out)
    }

    fn symmetrize(&mut self) {
        let n = self.rows;
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    fn check_same_shape(&self, context: &'static str, other: &Matrix) -> Result<()> {
        check_len(context, self.rows, other.rows)?;
        check_len(context, self.cols, other.cols)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Strided general matrix multiply, `c = alpha * a b + beta * c`, where `a`
/// is m×k and `b` is k×n. Each operand is `(slice, row_stride, col_stride)`.
pub(crate) fn gemm(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: lhs too short");
    assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: rhs too short");
    assert!(c.0.len() >= span(m, n, c.1, c.2), "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y += a * x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn matvec(a: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    a.matvec(x)
}

/// Singular values sorted in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub singular_values: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.singular_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.singular_values.is_empty()
    }

    pub fn stable_rank(&self) -> Option<f64> {
        let top = *self.singular_values.first()?;
        if top == 0.0 {
            return None;
        }
        let fro: f64 = self.singular_values.iter().map(|s| s * s).sum();
        Some(fro / (top * top))
    }
}

/// Eigen-decomposition of a symmetric matrix. `vectors` holds one unit
/// eigenvector per column, matched to `values` sorted descending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi on a symmetric matrix. Stops once the off-diagonal
/// Frobenius mass falls below `1e-12` of the total.
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    check_len("symmetric_eigen", a.rows, a.cols)?;
    if !a.is_finite() {
        return Err(Error::NonFinite("symmetric_eigen"));
    }
    let n = a.rows;
    let mut s = a.clone();
    let mut v = Matrix::identity(n);
    let total = s.frobenius_sq().sqrt();

    let off_mass = |s: &Matrix| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += s[(i, j)] * s[(i, j)];
            }
        }
        (2.0 * acc).sqrt()
    };

    let mut sweeps = 0;
    loop {
        if off_mass(&s) <= JACOBI_TOL * total {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NonConvergence { iterations: sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = s[(p, p)];
                let aqq = s[(q, q)];
                // skip rotations that cannot change the diagonal in f64
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    s[(p, q)] = 0.0;
                    s[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s[(k, p)];
                    let skq = s[(k, q)];
                    s[(k, p)] = c * skp - sn * skq;
                    s[(k, q)] = sn * skp + c * skq;
                }
                {
                    let (lo, hi) = s.data.split_at_mut(q * n);
                    let rp = &mut lo[p * n..(p + 1) * n];
                    let rq = &mut hi[..n];
                    for (xp, xq) in rp.iter_mut().zip(rq.iter_mut()) {
                        let a_p = *xp;
                        let a_q = *xq;
                        *xp = c * a_p - sn * a_q;
                        *xq = sn * a_p + c * a_q;
                    }
                }
                s[(p, q)] = 0.0;
                s[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[(j, j)].total_cmp(&s[(i, i)]));
    let values = order.iter().map(|&i| s[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Truncated singular value decomposition `A ≈ U diag(σ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub spectrum: Spectrum,
    /// rows × k, left singular vectors as columns.
    pub u: Matrix,
    /// cols × k, right singular vectors as columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.spectrum.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for j in 0..k {
                us[(i, j)] *= self.spectrum.singular_values[j];
            }
        }
        us.matmul_t(&self.v).expect("svd factors share rank")
    }
}

/// Top-`k` singular triplets via the eigendecomposition of the smaller Gram
/// matrix. Triplets whose singular value is numerically zero get zero
/// vectors on the recovered side.
pub fn svd(a: &Matrix, k: usize) -> Result<Svd> {
    let (rows, cols) = a.shape();
    if k > rows.min(cols) {
        return Err(Error::InvalidArgument(format!(
            "svd rank {k} exceeds min dimension of {rows}x{cols}"
        )));
    }
    let tall = rows >= cols;
    let gram = if tall { a.gram() } else { a.outer_gram() };
    let eig = symmetric_eigen(&gram)?;
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let floor = top * 1e-28;

    let sigmas: Vec<f64> = eig.values[..k].iter().map(|&l| l.max(0.0).sqrt()).collect();
    let small_dim = gram.rows();
    let mut known = Matrix::zeros(small_dim, k);
    for i in 0..small_dim {
        for j in 0..k {
            known[(i, j)] = eig.vectors[(i, j)];
        }
    }
    // recovered = A·known / σ (tall) or Aᵀ·known / σ (wide)
    let big_dim = if tall { rows } else { cols };
    let mut recovered = Matrix::zeros(big_dim, k);
    for j in 0..k {
        let sigma = sigmas[j];
        if sigma * sigma <= floor || sigma == 0.0 {
            continue;
        }
        let col: Vec<f64> = (0..small_dim).map(|i| known[(i, j)]).collect();
        let img = if tall { a.matvec(&col)? } else { a.matvec_t(&col)? };
        for (i, x) in img.into_iter().enumerate() {
            recovered[(i, j)] = x / sigma;
        }
    }
    let (u, v) = if tall { (recovered, known) } else { (known, recovered) };
    Ok(Svd {
        spectrum: Spectrum {
            singular_values: sigmas,
        },
        u,
        v,
    })
}

/// Largest singular value by power iteration on `AᵀA` from the normalized
/// all-ones vector.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    let cols = a.cols();
    if cols == 0 || a.rows() == 0 {
        return Ok(0.0);
    }
    let start = vec![1.0 / (cols as f64).sqrt(); cols];
    let est = power_iterate(a, start)?;
    if est > 0.0 || a.frobenius_sq() == 0.0 {
        return Ok(est);
    }
    // all-ones landed in the null space; retry from a fixed irregular vector
    let mut alt: Vec<f64> = (0..cols).map(|j| 1.0 + ((j * 7919) % 101) as f64 / 101.0).collect();
    let nrm = norm_sq(&alt).sqrt();
    alt.iter_mut().for_each(|x| *x /= nrm);
    power_iterate(a, alt)
}

fn power_iterate(a: &Matrix, mut v: Vec<f64>) -> Result<f64> {
    let mut prev = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let av = a.matvec(&v)?;
        let rayleigh = norm_sq(&av);
        let w = a.matvec_t(&av)?;
        let nrm = norm_sq(&w).sqrt();
        if nrm == 0.0 {
            return Ok(0.0);
        }
        v = w.into_iter().map(|x| x / nrm).collect();
        if (rayleigh - prev).abs() <= POWER_TOL * rayleigh {
            return Ok(rayleigh.sqrt());
        }
        prev = rayleigh;
    }
    // the Rayleigh quotient is monotone and already a tight lower bound
    Ok(prev.sqrt())
}

/// `‖A‖_F² / ‖A‖₂²`.
pub fn stable_rank(a: &Matrix) -> Result<f64> {
    let fro = a.frobenius_sq();
    if fro == 0.0 {
        return Err(Error::ZeroMatrix("stable rank"));
    }
    let top = spectral_norm(a)?;
    Ok(fro / (top * top))
}

/// `‖approx − target‖_F² / ‖target‖_F²`.
pub fn frobenius_rel_error(approx: &Matrix, target: &Matrix) -> Result<f64> {
    let denom = target.frobenius_sq();
    if denom == 0.0 {
        return Err(Error::ZeroMatrix("relative Frobenius error"));
    }
    Ok(approx.sub(target)?.frobenius_sq() / denom)
}
