//! Dense row-major matrices and a one-sided Jacobi SVD.
//!
//! Every constructor and every operation that produces a [`Matrix`] checks
//! that the entries are finite, so a NaN never travels silently from one
//! layer of the stack to the next.

use std::fmt;

use thiserror::Error;

/// Maximum number of Jacobi sweeps before [`svd`] gives up.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal threshold below which a column pair counts as orthogonal.
pub const SVD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: expected a square matrix, got {shape:?}")]
    NotSquare {
        op: &'static str,
        shape: (usize, usize),
    },
    #[error("matrix shape {rows}x{cols} does not match data length {len}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("{op}: non-finite entry at ({row}, {col})")]
    NonFinite {
        op: &'static str,
        row: usize,
        col: usize,
    },
    #[error("svd did not converge after {sweeps} sweeps (residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

fn check_finite(op: &'static str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(idx) => Err(LinalgError::NonFinite {
            op,
            row: idx / cols,
            col: idx % cols,
        }),
    }
    .map(|_| debug_assert_eq!(rows * cols, data.len()))
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        check_finite("new", rows, cols, &data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged or empty input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "from_rows: no rows");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "from_rows: ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data).expect("from_rows: invalid literal")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zeros: empty shape");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square matrix with `diag` on the diagonal.
    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        if n == 0 {
            return Err(LinalgError::EmptyShape { rows: 0, cols: 0 });
        }
        let mut data = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            data[i * n + i] = d;
        }
        Self::new(n, n, data)
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Result<Self> {
        let mut data = Vec::with_capacity(a.len() * b.len());
        for &x in a {
            data.extend(b.iter().map(|&y| x * y));
        }
        Self::new(a.len(), b.len(), data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row vector times matrix: `vᵀ M`.
    pub fn left_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "left_mul_vec",
                left: (1, v.len()),
                right: self.shape(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &x) in v.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += x * w;
            }
        }
        check_finite("left_mul_vec", 1, self.cols, &out)?;
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|v| v * c).collect();
        check_finite("scale", self.rows, self.cols, &data)?;
        Ok(Self { data, ..*self })
    }

    /// In-place `self += c * other`.
    pub fn add_scaled_assign(&mut self, other: &Matrix, c: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "add_scaled_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        check_finite("add_scaled_assign", self.rows, self.cols, &self.data)
    }

    /// Frobenius inner product `tr(Aᵀ B)`.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "inner",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let dst = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (d, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
    check_finite("matmul", a.rows, b.cols, &out)?;
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data: out,
    })
}

pub fn transpose(a: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(a.data.len());
    for c in 0..a.cols {
        data.extend((0..a.rows).map(|r| a.get(r, c)));
    }
    Matrix {
        rows: a.cols,
        cols: a.rows,
        data,
    }
}

/// `a + c * b`.
pub fn add_scaled(a: &Matrix, b: &Matrix, c: f64) -> Result<Matrix> {
    let mut out = a.clone();
    out.add_scaled_assign(b, c).map_err(|e| match e {
        LinalgError::DimensionMismatch { left, right, .. } => LinalgError::DimensionMismatch {
            op: "add_scaled",
            left,
            right,
        },
        other => other,
    })?;
    Ok(out)
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn trace(a: &Matrix) -> Result<f64> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare {
            op: "trace",
            shape: a.shape(),
        });
    }
    Ok((0..a.rows).map(|i| a.get(i, i)).sum())
}

pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Thin singular value decomposition `A = U diag(sigma) Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// m x r, orthonormal columns.
    pub u: Matrix,
    /// Length r, non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// r x n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    /// `U diag(sigma + shift) Vᵀ`.
    pub fn reconstruct_shifted(&self, shift: f64) -> Result<Matrix> {
        let (m, r) = self.u.shape();
        let n = self.vt.cols();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for k in 0..r {
                let w = self.u.get(i, k) * (self.sigma[k] + shift);
                if w == 0.0 {
                    continue;
                }
                for (d, &v) in dst.iter_mut().zip(self.vt.row(k)) {
                    *d += w * v;
                }
            }
        }
        Matrix::new(m, n, out)
    }

    pub fn reconstruct(&self) -> Result<Matrix> {
        self.reconstruct_shifted(0.0)
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Works on the columns of `A` when `m >= n` and on the columns of `Aᵀ`
/// otherwise, so the rotated set always has `r = min(m, n)` columns.
/// Singular values are sorted descending and each left singular vector is
/// signed so that its first non-negligible entry is positive.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        check_finite("svd", a.rows, a.cols, &a.data)?;
    }
    let transposed = a.rows < a.cols;
    let work = if transposed { transpose(a) } else { a.clone() };
    let (m, n) = work.shape();

    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| work.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let mut converged = n == 1;
    let mut sweeps = 0;
    let mut residual = 0.0;
    while !converged && sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        residual = 0.0_f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = column_moments(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= SVD_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::SvdNoConvergence { sweeps, residual });
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| vec_norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let scale = sigma.iter().fold(0.0_f64, |acc, s| acc.max(*s));
    let negligible = scale * (m.max(n) as f64) * f64::EPSILON;

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sorted_sigma = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for &k in &order {
        let s = sigma[k];
        if s > negligible && s > 0.0 {
            left.push(cols[k].iter().map(|x| x / s).collect());
            sorted_sigma.push(s);
        } else {
            left.push(vec![0.0; m]);
            sorted_sigma.push(0.0);
            deficient.push(left.len() - 1);
        }
        right.push(v[k].clone());
    }
    sigma = sorted_sigma;
    complete_orthonormal(&mut left, &deficient);

    for (l, r) in left.iter_mut().zip(right.iter_mut()) {
        if let Some(first) = l.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                l.iter_mut().for_each(|x| *x = -*x);
                r.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    // left: n vectors of length m (U of `work`), right: n vectors of length n (V of `work`).
    let col_matrix = |vecs: &[Vec<f64>], len: usize| -> Result<Matrix> {
        let k = vecs.len();
        let mut data = vec![0.0; len * k];
        for (j, vec) in vecs.iter().enumerate() {
            for (i, &x) in vec.iter().enumerate() {
                data[i * k + j] = x;
            }
        }
        Matrix::new(len, k, data)
    };
    let row_matrix = |vecs: &[Vec<f64>]| -> Result<Matrix> {
        let len = vecs[0].len();
        Matrix::new(vecs.len(), len, vecs.iter().flatten().copied().collect())
    };

    if transposed {
        // Aᵀ = U' Σ V'ᵀ  =>  A = V' Σ U'ᵀ. Re-canonicalise signs on the new U.
        for (l, r) in left.iter_mut().zip(right.iter_mut()) {
            if let Some(first) = r.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    l.iter_mut().for_each(|x| *x = -*x);
                    r.iter_mut().for_each(|x| *x = -*x);
                }
            }
        }
        Ok(SvdResult {
            u: col_matrix(&right, n)?,
            sigma,
            vt: row_matrix(&left)?,
        })
    } else {
        Ok(SvdResult {
            u: col_matrix(&left, m)?,
            sigma,
            vt: row_matrix(&right)?,
        })
    }
}

fn column_moments(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (&x, &y) in p.iter().zip(q) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the zero vectors at `slots` with unit vectors orthogonal to every other entry.
fn complete_orthonormal(vecs: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let m = vecs[0].len();
    let mut candidate = 0;
    for &slot in slots {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes for stability.
            for _ in 0..2 {
                for (j, other) in vecs.iter().enumerate() {
                    if j == slot {
                        continue;
                    }
                    let dot: f64 = e.iter().zip(other).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(other).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = vec_norm(&e);
            if norm > 1e-8 {
                vecs[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i * b.cols() + j] += a.get(i, k) * b.get(k, j);
                }
            }
        }
        out
    }

    fn assert_orthonormal_columns(u: &Matrix, tol: f64) {
        let gram = matmul(&transpose(u), u).unwrap();
        let id = Matrix::identity(u.cols());
        let err = frobenius_norm(&add_scaled(&gram, &id, -1.0).unwrap());
        assert!(err <= tol, "orthonormality error {err}");
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let r = matmul(
            &Matrix::from_rows(&[&[1.0, 2.0]]),
            &Matrix::from_rows(&[&[3.0], &[4.0]]),
        )
        .unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 5, 4);
        let b = random(&mut rng, 4, 3);
        let fast = matmul(&a, &b).unwrap();
        for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            LinalgError::DimensionMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { col: 1, .. })
        ));
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0]),
            Err(LinalgError::BadLength { .. })
        ));
        assert!(matches!(
            Matrix::new(0, 2, vec![]),
            Err(LinalgError::EmptyShape { .. })
        ));
        let big = Matrix::from_rows(&[&[1e300]]);
        assert!(big.scale(1e300).is_err());
    }

    #[test]
    fn small_helpers() {
        assert!((frobenius_norm(&Matrix::identity(2)) - 2f64.sqrt()).abs() < 1e-15);
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(trace(&a).unwrap(), 5.0);
        assert!(matches!(
            trace(&Matrix::zeros(2, 3)),
            Err(LinalgError::NotSquare { .. })
        ));
        let b = Matrix::from_rows(&[&[9.0, 9.0], &[9.0, 9.0]]);
        assert_eq!(add_scaled(&a, &b, 0.0).unwrap(), a);
        assert_eq!(transpose(&transpose(&a)), a);
    }

    #[test]
    fn svd_hand_cases() {
        let id = svd(&Matrix::identity(2)).unwrap();
        assert_eq!(id.sigma, vec![1.0, 1.0]);

        let diag = svd(&Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert!((diag.sigma[0] - 3.0).abs() < 1e-15 && diag.sigma[1] == 0.0);
        assert_orthonormal_columns(&diag.u, 1e-12);

        // AᵀA = diag(1, 4): characteristic roots 4 and 1.
        let perm = svd(&Matrix::from_rows(&[&[0.0, 2.0], &[1.0, 0.0]])).unwrap();
        assert!((perm.sigma[0] - 2.0).abs() < 1e-14);
        assert!((perm.sigma[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_random_shapes_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = rng.random_range(1..=8);
            let n = rng.random_range(1..=8);
            let a = random(&mut rng, m, n);
            let res = svd(&a).unwrap();
            let r = m.min(n);
            assert_eq!(res.u.shape(), (m, r));
            assert_eq!(res.vt.shape(), (r, n));
            let err = frobenius_norm(&add_scaled(&res.reconstruct().unwrap(), &a, -1.0).unwrap());
            assert!(err <= 1e-9 * frobenius_norm(&a), "reconstruction error {err}");
            assert_orthonormal_columns(&res.u, 1e-9);
            assert_orthonormal_columns(&transpose(&res.vt), 1e-9);
            assert!(res.sigma.windows(2).all(|w| w[0] >= w[1]));
            assert!(res.sigma.iter().all(|s| *s >= 0.0));
            assert!(res.sigma[0] <= frobenius_norm(&a) + 1e-12);
        }
    }

    #[test]
    fn svd_rank_deficient_completes_basis() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[0.0, 0.0, 0.0]]);
        let res = svd(&a).unwrap();
        assert!(res.sigma[1].abs() < 1e-12 && res.sigma[2].abs() < 1e-12);
        assert_orthonormal_columns(&res.u, 1e-9);
        assert_orthonormal_columns(&transpose(&res.vt), 1e-9);
        let err = frobenius_norm(&add_scaled(&res.reconstruct().unwrap(), &a, -1.0).unwrap());
        assert!(err < 1e-12);
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random(&mut rng, 4, 3);
            let res = svd(&a).unwrap();
            for c in 0..res.u.cols() {
                let col = res.u.column(c);
                let first = col.iter().find(|x| x.abs() > 1e-12).unwrap();
                assert!(*first > 0.0);
            }
        }
    }
}
