//! Dense row-major `f64` matrices and the handful of kernels the rest of the
//! crate is built on: products, row softmax, Frobenius norms and a cyclic
//! Jacobi eigensolver for symmetric matrices.

use crate::error::{Error, Result};

/// Floor applied to the reference norm in [`rel_l2`].
pub const REL_L2_EPS: f64 = 1e-12;

/// Off-diagonal Frobenius threshold for the Jacobi solver, relative to `max(1, ‖M‖_F)`.
pub const JACOBI_TOL: f64 = 1e-10;

/// Maximum number of cyclic Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Mat {
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// The leading `n` columns.
    pub fn leading_cols(&self, n: usize) -> Mat {
        Mat::from_fn(self.rows, n, |i, j| self.get(i, j))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape {
                    op: "vstack",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn scale(&self, k: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }
}

/// Dense product `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, p) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let out_row = &mut out[i * p..(i + 1) * p];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (l, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[l * p..(l + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Mat {
        rows: n,
        cols: p,
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// `aᵀ · a`, the Gram matrix of the columns of `a`.
pub fn gram(a: &Mat) -> Mat {
    let m = a.cols;
    let mut g = Mat::zeros(m, m);
    for r in 0..a.rows {
        let row = a.row(r);
        for i in 0..m {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            let g_row = &mut g.data[i * m..(i + 1) * m];
            for (gv, &rj) in g_row.iter_mut().zip(row) {
                *gv += ri * rj;
            }
        }
    }
    g
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    softmax_rows_in_place(&mut out);
    out
}

pub(crate) fn softmax_rows_in_place(m: &mut Mat) {
    let cols = m.cols;
    for row in m.data.chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Relative Frobenius distance `‖a − b‖_F / max(‖b‖_F, ε)`.
pub fn rel_l2(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "rel_l2",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut diff = 0.0;
    let mut base = 0.0;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        diff += (x - y) * (x - y);
        base += y * y;
    }
    Ok(diff.sqrt() / base.sqrt().max(REL_L2_EPS))
}

#[derive(Clone, Debug)]
pub struct EigResult {
    /// Sorted in nonincreasing order.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: Mat,
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(M + Mᵀ)/2` first. Eigenvector columns are
/// sign-normalized so that their largest-magnitude entry is positive.
pub fn sym_eig(m: &Mat) -> Result<EigResult> {
    if m.rows != m.cols {
        return Err(Error::NotSquare {
            op: "sym_eig",
            rows: m.rows,
            cols: m.cols,
        });
    }
    let n = m.rows;
    let mut a = Mat::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let mut v = Mat::identity(n);
    let tol = JACOBI_TOL * a.frobenius().max(1.0);

    let off_norm = |a: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off <= tol {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off,
            });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps ties in index order, so repeated eigenvalues stay deterministic
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));

    let eigenvalues = order.iter().map(|&i| a.get(i, i)).collect();
    let mut eigenvectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0.0f64;
        for k in 0..n {
            let x = v.get(k, src);
            if x.abs() > pivot.abs() {
                pivot = x;
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            eigenvectors.set(k, dst, sign * v.get(k, src));
        }
    }
    Ok(EigResult {
        eigenvalues,
        eigenvectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_examples() {
        let x = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Mat::identity(2), &x).unwrap(), x);
        assert_eq!(matmul(&x, &Mat::zeros(2, 2)).unwrap(), Mat::zeros(2, 2));
        let col = Mat::from_rows(&[[5.0], [6.0]]);
        assert_eq!(
            matmul(&x, &col).unwrap(),
            Mat::from_rows(&[[17.0], [39.0]])
        );
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let err = matmul(&Mat::zeros(2, 3), &Mat::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn matmul_nt_matches_transpose() {
        let a = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.3 - 1.0);
        let b = Mat::from_fn(5, 4, |i, j| ((i + 2 * j) % 7) as f64 - 2.5);
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &b.transpose()).unwrap());
        assert_eq!(gram(&a), matmul(&a.transpose(), &a).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_rows(&Mat::zeros(1, 3));
        for &v in u.data() {
            assert_close(v, 1.0 / 3.0, 1e-15);
        }
        let single = softmax_rows(&Mat::from_rows(&[[3.0], [-7.0]]));
        assert_eq!(single.data(), &[1.0, 1.0]);
        let logs = Mat::from_rows(&[[1f64.ln(), 2f64.ln(), 3f64.ln()]]);
        let s = softmax_rows(&logs);
        for (v, e) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert_close(*v, e, 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax_rows(&Mat::from_rows(&[[1000.0, 1000.0, -1000.0]]));
        assert!(s.is_finite());
        assert_close(s.get(0, 0), 0.5, 1e-15);
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let r = sym_eig(&Mat::identity(2)).unwrap();
        assert_eq!(r.eigenvalues, vec![1.0, 1.0]);
        assert_eq!(r.eigenvectors, Mat::identity(2));

        let r = sym_eig(&Mat::from_rows(&[[4.0, 0.0], [0.0, 1.0]])).unwrap();
        assert_eq!(r.eigenvalues, vec![4.0, 1.0]);
        assert_eq!(r.eigenvectors, Mat::identity(2));

        let r = sym_eig(&Mat::from_rows(&[[1.0, 0.0], [0.0, 4.0]])).unwrap();
        assert_eq!(r.eigenvalues, vec![4.0, 1.0]);
        assert_eq!(r.eigenvectors, Mat::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
    }

    #[test]
    fn eig_two_by_two() {
        let r = sym_eig(&Mat::from_rows(&[[2.0, 1.0], [1.0, 2.0]])).unwrap();
        assert_close(r.eigenvalues[0], 3.0, 1e-12);
        assert_close(r.eigenvalues[1], 1.0, 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v = &r.eigenvectors;
        assert_close(v.get(0, 0).abs(), h, 1e-12);
        assert_close(v.get(1, 0), v.get(0, 0), 1e-12);
        assert_close(v.get(1, 1), -v.get(0, 1), 1e-12);
    }

    #[test]
    fn eig_rejects_rectangular() {
        assert!(matches!(
            sym_eig(&Mat::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn eig_zero_matrix() {
        let r = sym_eig(&Mat::zeros(3, 3)).unwrap();
        assert_eq!(r.eigenvalues, vec![0.0; 3]);
        assert_eq!(r.eigenvectors, Mat::identity(3));
    }

    #[test]
    fn rel_l2_examples() {
        let x = Mat::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        assert_eq!(rel_l2(&x, &x).unwrap(), 0.0);
        assert_close(rel_l2(&x.scale(2.0), &x).unwrap(), 1.0, 1e-15);
        // E = [[3, 0], [0, 4]] so ‖E‖ = 5; ‖X‖² = 1 + 4 + 0.25 + 9 = 14.25
        let e = Mat::from_rows(&[[3.0, 0.0], [0.0, 4.0]]);
        let got = rel_l2(&x.add(&e).unwrap(), &x).unwrap();
        assert_close(got, 5.0 / 14.25f64.sqrt(), 1e-15);
        assert!(rel_l2(&x, &Mat::zeros(1, 2)).is_err());
    }

    #[test]
    fn rel_l2_zero_reference_uses_floor() {
        let z = Mat::zeros(1, 2);
        let a = Mat::from_rows(&[[3e-13, 4e-13]]);
        assert_close(rel_l2(&a, &z).unwrap(), 0.5, 1e-12);
    }
}
