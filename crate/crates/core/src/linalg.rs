//! Small dense kernels used by the low-rank accumulator.
//!
//! Everything here works on matrices whose smaller dimension is the working
//! rank `q` (typically below 16), so the routines favour simplicity and
//! determinism over blocking or vectorisation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, ShapeBuilder};
use thiserror::Error;

/// Residuals below this fraction of the input norm are treated as zero.
pub const TOL_MGS: f64 = 1e-10;
/// Distance from `e1` below which the Householder reflector degenerates.
pub const TOL_HOUSEHOLDER: f64 = 1e-10;
/// Largest matrix accepted by [`svd_small`].
pub const SVD_SMALL_MAX: usize = 64;

const JACOBI_MAX_SWEEPS: usize = 30;
const JACOBI_OFF_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix of size {0} exceeds the small-SVD limit of {SVD_SMALL_MAX}")]
    TooLarge(usize),
    #[error("vector norm {0} is not 1")]
    NotUnit(f64),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
    it.all(|x| x.is_finite())
}

/// An `n x q` matrix whose columns are orthonormal or exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis {
    // Column-major, so each basis vector is contiguous.
    columns: Array2<f64>,
}

impl OrthoBasis {
    pub fn zeros(n: usize, q: usize) -> Self {
        Self {
            columns: Array2::zeros((n, q).f()),
        }
    }

    /// Wraps `columns` without checking orthogonality.
    pub fn from_columns(columns: Array2<f64>) -> Self {
        let mut stored = Array2::zeros(columns.raw_dim().f());
        stored.assign(&columns);
        Self { columns: stored }
    }

    pub fn n(&self) -> usize {
        self.columns.nrows()
    }

    pub fn q(&self) -> usize {
        self.columns.ncols()
    }

    pub fn columns(&self) -> &Array2<f64> {
        &self.columns
    }

    pub fn columns_mut(&mut self) -> &mut Array2<f64> {
        &mut self.columns
    }

    pub fn into_columns(self) -> Array2<f64> {
        self.columns
    }

    /// `max |QᵀQ − D|` where `D` has 1 on non-zero columns and 0 on zero
    /// columns.
    pub fn orthogonality_error(&self) -> f64 {
        let gram = self.columns.t().dot(&self.columns);
        let q = self.q();
        let mut worst: f64 = 0.0;
        for i in 0..q {
            for j in 0..q {
                let target = if i == j && gram[[i, i]] > 0.5 { 1.0 } else { 0.0 };
                worst = worst.max((gram[[i, j]] - target).abs());
            }
        }
        worst
    }
}

/// Result of projecting a vector onto an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct MgsInsert {
    pub coeffs: Array1<f64>,
    pub residual_norm: f64,
    /// Unit residual direction, or all zeros when the vector lies in the span.
    pub new_column: Array1<f64>,
}

/// One modified Gram-Schmidt step of `v` against the columns of `basis`.
///
/// Coefficients are taken against the progressively deflated vector. When the
/// first pass cancels more than half of the norm a second pass is run and its
/// coefficients are folded in, which keeps long-running bases orthogonal.
/// Zero columns of `basis` contribute zero coefficients.
pub fn mgs_insert(basis: ArrayView2<f64>, v: ArrayView1<f64>) -> Result<MgsInsert> {
    let (n, k) = basis.dim();
    if n != v.len() {
        return Err(LinalgError::DimensionMismatch { expected: n, got: v.len() });
    }
    // Column-major basis storage makes `basis.t()` a contiguous slice.
    let owned;
    let flat: &[f64] = match basis.t().to_slice() {
        Some(f) => f,
        None => {
            owned = basis.t().as_standard_layout().into_owned();
            owned.as_slice().expect("standard layout")
        }
    };
    let mut w: Vec<f64> = v.iter().copied().collect();
    if !all_finite(w.iter()) {
        return Err(LinalgError::NonFinite);
    }
    debug_assert!(all_finite(flat.iter()), "basis must be finite");
    let sq_norm = |x: &[f64]| dot_slices(x, x).sqrt();
    let input_norm = sq_norm(&w);
    let mut coeffs = Array1::zeros(k);
    let mut prev_norm = input_norm;
    for _pass in 0..2 {
        for j in 0..k {
            let col = &flat[j * n..(j + 1) * n];
            let c = dot_slices(col, &w);
            if c != 0.0 {
                for (x, &y) in w.iter_mut().zip(col) {
                    *x -= c * y;
                }
                coeffs[j] += c;
            }
        }
        let r = sq_norm(&w);
        if r >= 0.5 * prev_norm {
            break;
        }
        prev_norm = r;
    }
    let residual_norm = sq_norm(&w);
    if input_norm == 0.0 || residual_norm <= TOL_MGS * input_norm {
        return Ok(MgsInsert {
            coeffs,
            residual_norm: 0.0,
            new_column: Array1::zeros(n),
        });
    }
    w.iter_mut().for_each(|x| *x /= residual_norm);
    Ok(MgsInsert {
        coeffs,
        residual_norm,
        new_column: Array1::from(w),
    })
}

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Singular value decomposition `C = U diag(sigma) Vᵀ` of a small square
/// matrix, with `sigma` sorted in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallSvd {
    pub u: Array2<f64>,
    pub sigma: Array1<f64>,
    pub v: Array2<f64>,
}

impl SmallSvd {
    pub fn reconstruct(&self) -> Array2<f64> {
        let mut us = self.u.clone();
        for (mut col, &s) in us.axis_iter_mut(Axis(1)).zip(self.sigma.iter()) {
            col *= s;
        }
        us.dot(&self.v.t())
    }
}

/// Thin SVD of a tall matrix: `U` is `m x n` with orthonormal columns for
/// non-zero singular values (zero columns otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    pub u: Array2<f64>,
    pub sigma: Array1<f64>,
    pub v: Array2<f64>,
}

/// One-sided cyclic Jacobi. Returns the rotated copy of `a` (columns are
/// `U_j * sigma_j`) and the accumulated right rotations.
fn one_sided_jacobi(a: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = a.dim();
    // Flat column-major buffers: column j is `[j * m .. (j + 1) * m]`.
    let mut work = vec![0.0; m * n];
    for ((i, j), &x) in a.indexed_iter() {
        work[j * m + i] = x;
    }
    let mut vbuf = vec![0.0; n * n];
    for j in 0..n {
        vbuf[j * n + j] = 1.0;
    }
    let total: f64 = work.iter().map(|x| x * x).sum();
    let scale = total * JACOBI_OFF_TOL;

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        let mut rotated = false;
        // Squared column norms, refreshed each sweep and updated in closed
        // form after every rotation.
        let mut sq: Vec<f64> = (0..n).map(|j| col_dot(&work, m, j, j)).collect();
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = sq[p];
                let beta = sq[q];
                let gamma = col_dot(&work, m, p, q);
                off += gamma * gamma;
                if gamma == 0.0 || gamma.abs() <= 1e-16 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, m, p, q, c, s);
                rotate(&mut vbuf, n, p, q, c, s);
                sq[p] = alpha - t * gamma;
                sq[q] = beta + t * gamma;
            }
        }
        if !rotated || off.sqrt() < scale {
            break;
        }
    }
    (work, vbuf)
}

fn col_dot(buf: &[f64], len: usize, p: usize, q: usize) -> f64 {
    dot_slices(&buf[p * len..(p + 1) * len], &buf[q * len..(q + 1) * len])
}

fn rotate(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = buf.split_at_mut(q * len);
    let cp = &mut left[p * len..(p + 1) * len];
    let cq = &mut right[..len];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Sorts singular triplets descending and splits `U sigma` into `U`, `sigma`.
/// Buffers are column-major; `m x n` for `U`, `n x n` for `V`.
fn finish_jacobi(work: &[f64], vbuf: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let norms: Vec<f64> = (0..n).map(|j| col_dot(work, m, j, j).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in column order, which keeps results reproducible.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let top = norms.iter().cloned().fold(0.0, f64::max);
    let mut u = vec![0.0; m * n];
    let mut sigma = vec![0.0; n];
    let mut v = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        // Anything at rounding level relative to the top value is a zero.
        if s > top * 1e-15 * (n as f64) && s > 0.0 {
            sigma[dst] = s;
            for (o, &x) in u[dst * m..(dst + 1) * m].iter_mut().zip(&work[src * m..(src + 1) * m]) {
                *o = x / s;
            }
        }
        v[dst * n..(dst + 1) * n].copy_from_slice(&vbuf[src * n..(src + 1) * n]);
    }
    (u, sigma, v)
}

/// Fills zero columns of a square column-major `u` with unit vectors
/// orthogonal to the rest.
fn complete_basis(u: &mut [f64], n: usize) {
    let filled: Vec<bool> = (0..n).map(|j| col_dot(u, n, j, j) > 0.25).collect();
    let mut candidate = 0;
    let mut e = vec![0.0; n];
    for j in 0..n {
        if filled[j] {
            continue;
        }
        while candidate < n {
            e.fill(0.0);
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for k in 0..n {
                    let col = &u[k * n..(k + 1) * n];
                    let c: f64 = col.iter().zip(&e).map(|(a, b)| a * b).sum();
                    if c != 0.0 {
                        for (x, &y) in e.iter_mut().zip(col) {
                            *x -= c * y;
                        }
                    }
                }
            }
            let r = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if r > 1e-6 {
                for (o, &x) in u[j * n..(j + 1) * n].iter_mut().zip(&e) {
                    *o = x / r;
                }
                break;
            }
        }
    }
}

fn col_major(rows: usize, cols: usize, data: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols).f(), data).expect("buffer matches shape")
}

/// Full SVD of a square matrix of size at most [`SVD_SMALL_MAX`].
///
/// Signs are normalised so the first non-zero entry of every `U` column is
/// non-negative (the matching `V` column is flipped with it).
pub fn svd_small(c: ArrayView2<f64>) -> Result<SmallSvd> {
    let (rows, cols) = c.dim();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    if rows > SVD_SMALL_MAX {
        return Err(LinalgError::TooLarge(rows));
    }
    if !all_finite(c.iter()) {
        return Err(LinalgError::NonFinite);
    }
    let n = cols;
    let (work, vbuf) = one_sided_jacobi(c);
    let (mut u, sigma, mut v) = finish_jacobi(&work, &vbuf, n, n);
    complete_basis(&mut u, n);
    for j in 0..n {
        let lead = u[j * n..(j + 1) * n].iter().copied().find(|x| x.abs() > 1e-300);
        if matches!(lead, Some(x) if x < 0.0) {
            u[j * n..(j + 1) * n].iter_mut().for_each(|x| *x = -*x);
            v[j * n..(j + 1) * n].iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(SmallSvd {
        u: col_major(n, n, u),
        sigma: Array1::from(sigma),
        v: col_major(n, n, v),
    })
}

/// Thin SVD of an `m x n` matrix with `m >= n`, via the same one-sided
/// Jacobi iteration. Used for the regression testbed's input batches.
pub fn svd_thin(a: ArrayView2<f64>) -> Result<ThinSvd> {
    let (m, n) = a.dim();
    if m < n {
        return Err(LinalgError::DimensionMismatch { expected: n, got: m });
    }
    if !all_finite(a.iter()) {
        return Err(LinalgError::NonFinite);
    }
    let (work, vbuf) = one_sided_jacobi(a);
    let (u, sigma, v) = finish_jacobi(&work, &vbuf, m, n);
    Ok(ThinSvd {
        u: col_major(m, n, u),
        sigma: Array1::from(sigma),
        v: col_major(n, n, v),
    })
}

/// Orthonormal basis `X` of the complement of unit vector `x0`, taken from
/// the Householder reflector mapping `e1` to `x0`.
///
/// Returns a `(k+1) x k` matrix with `XᵀX = I` and `Xᵀx0 = 0`.
pub fn householder_basis(x0: ArrayView1<f64>) -> Result<Array2<f64>> {
    if !all_finite(x0.iter()) {
        return Err(LinalgError::NonFinite);
    }
    let n = x0.len();
    let nrm = norm(x0);
    if (nrm - 1.0).abs() > 1e-8 {
        return Err(LinalgError::NotUnit(nrm));
    }
    let mut v = x0.to_owned();
    v[0] -= 1.0;
    let vnorm2 = v.dot(&v);
    let mut out = Array2::zeros((n, n.saturating_sub(1)));
    if vnorm2.sqrt() < TOL_HOUSEHOLDER {
        for j in 1..n {
            out[[j, j - 1]] = 1.0;
        }
        return Ok(out);
    }
    let f = 2.0 / vnorm2;
    for j in 1..n {
        let vj = v[j];
        for i in 0..n {
            let id = if i == j { 1.0 } else { 0.0 };
            out[[i, j - 1]] = id - f * v[i] * vj;
        }
    }
    Ok(out)
}

/// Diagonal-ratio estimate `|C[0,0]| / |C[q-1,q-1]|` of the condition number.
/// Returns `+inf` when the last diagonal entry is zero.
pub fn condition_estimate(c: ArrayView2<f64>) -> Result<f64> {
    let (rows, cols) = c.dim();
    if rows != cols || rows == 0 {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let first = c[[0, 0]].abs();
    let last = c[[rows - 1, rows - 1]].abs();
    if !first.is_finite() || !last.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if last == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(first / last)
}

/// Block-diagonal embedding `diag(I_lead, block)`.
pub(crate) fn block_diag_identity(lead: usize, block: ArrayView2<f64>) -> Array2<f64> {
    let (br, bc) = block.dim();
    let mut out = Array2::zeros((lead + br, lead + bc));
    for i in 0..lead {
        out[[i, i]] = 1.0;
    }
    out.slice_mut(s![lead.., lead..]).assign(&block);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mgs_orthogonal_decomposition() {
        let basis = array![[1.0], [0.0], [0.0]];
        let out = mgs_insert(basis.view(), array![1.0, 1.0, 0.0].view()).unwrap();
        assert_eq!(out.coeffs, array![1.0]);
        assert!((out.residual_norm - 1.0).abs() < 1e-15);
        assert_eq!(out.new_column, array![0.0, 1.0, 0.0]);
    }

    #[test]
    fn mgs_vector_in_span_gives_zero_column() {
        let basis = array![[1.0], [0.0], [0.0]];
        let out = mgs_insert(basis.view(), array![1.0, 0.0, 0.0].view()).unwrap();
        assert_eq!(out.coeffs, array![1.0]);
        assert_eq!(out.residual_norm, 0.0);
        assert_eq!(out.new_column, Array1::<f64>::zeros(3));
    }

    #[test]
    fn mgs_rejects_non_finite() {
        let basis = array![[1.0], [0.0]];
        let err = mgs_insert(basis.view(), array![f64::NAN, 0.0].view()).unwrap_err();
        assert_eq!(err, LinalgError::NonFinite);
    }

    #[test]
    fn mgs_zero_columns_are_ignored() {
        let basis = array![[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let out = mgs_insert(basis.view(), array![2.0, 3.0, 0.0].view()).unwrap();
        assert_eq!(out.coeffs, array![2.0, 0.0]);
        assert_eq!(out.residual_norm, 3.0);
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let id = Array2::<f64>::eye(3);
        let svd = svd_small(id.view()).unwrap();
        assert_eq!(svd.sigma, array![1.0, 1.0, 1.0]);
        let uvt = svd.u.dot(&svd.v.t());
        assert!((&uvt - &id).iter().all(|x| x.abs() < 1e-15));

        let d = array![[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]];
        let svd = svd_small(d.view()).unwrap();
        assert_eq!(svd.sigma, array![3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_zero_matrix_has_orthogonal_factors() {
        let z = Array2::<f64>::zeros((4, 4));
        let svd = svd_small(z.view()).unwrap();
        assert!(svd.sigma.iter().all(|&s| s == 0.0));
        let utu = svd.u.t().dot(&svd.u);
        assert!((&utu - &Array2::<f64>::eye(4)).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn svd_rank_one_completes_u() {
        let c = array![[0.0, 0.0], [0.0, 5.0]];
        let svd = svd_small(c.view()).unwrap();
        assert_eq!(svd.sigma, array![5.0, 0.0]);
        let utu = svd.u.t().dot(&svd.u);
        assert!((&utu - &Array2::<f64>::eye(2)).iter().all(|x| x.abs() < 1e-12));
        assert!((&svd.reconstruct() - &c).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn svd_rejects_bad_input() {
        let nonsq = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            svd_small(nonsq.view()),
            Err(LinalgError::NotSquare { .. })
        ));
        let nan = array![[f64::INFINITY]];
        assert_eq!(svd_small(nan.view()).unwrap_err(), LinalgError::NonFinite);
        let big = Array2::<f64>::zeros((65, 65));
        assert_eq!(svd_small(big.view()).unwrap_err(), LinalgError::TooLarge(65));
    }

    #[test]
    fn householder_degenerate_reflector() {
        let x = householder_basis(array![1.0, 0.0, 0.0].view()).unwrap();
        assert_eq!(x, array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn householder_rejects_non_unit() {
        assert!(matches!(
            householder_basis(array![2.0, 0.0].view()),
            Err(LinalgError::NotUnit(_))
        ));
    }

    #[test]
    fn condition_estimate_cases() {
        let c = array![[100.0, 0.0], [0.0, 0.5]];
        assert_eq!(condition_estimate(c.view()).unwrap(), 200.0);
        assert_eq!(condition_estimate(Array2::<f64>::eye(4).view()).unwrap(), 1.0);
        let z = array![[3.0, 1.0], [1.0, 0.0]];
        assert_eq!(condition_estimate(z.view()).unwrap(), f64::INFINITY);
    }
}
