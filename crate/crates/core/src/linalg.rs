//! Dense row-major matrices and the handful of factorizations the regression
//! and error-bound code needs.
//!
//! Everything here is single-threaded and deterministic: block sizes are
//! fixed and the matrix products go through [`Real::gemm`], which does not
//! spawn threads.

use crate::real::Real;

const BLOCK: usize = 96;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Wraps a row-major buffer. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length does not match shape");
        Mat { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Mat::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
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
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Mat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Mat::zeros(self.rows, other.cols);
        if self.rows == 0 || other.cols == 0 || self.cols == 0 {
            return out;
        }
        // SAFETY: shapes checked above; `out` is a fresh allocation.
        unsafe {
            T::gemm(
                self.rows,
                self.cols,
                other.cols,
                T::one(),
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                T::zero(),
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        out
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, other.rows, "inner dimensions differ");
        let mut out = Mat::zeros(self.cols, other.cols);
        if self.rows == 0 || other.cols == 0 || self.cols == 0 {
            return out;
        }
        // SAFETY: shapes checked above; `self` is read through swapped strides.
        unsafe {
            T::gemm(
                self.cols,
                self.rows,
                other.cols,
                T::one(),
                self.data.as_ptr(),
                1,
                self.cols as isize,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                T::zero(),
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len());
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

impl<T> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Lower Cholesky factor `L` with `A = L L^T`.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    l: Mat<T>,
}

/// The matrix was not numerically positive definite; carries the failing pivot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NotPositiveDefinite {
    pub pivot: usize,
}

impl<T: Real> Cholesky<T> {
    /// Blocked right-looking factorization. Only the lower triangle of `a`
    /// is read.
    pub fn factor(mut a: Mat<T>) -> Result<Self, NotPositiveDefinite> {
        assert_eq!(a.rows, a.cols, "Cholesky needs a square matrix");
        let n = a.rows;
        let mut k0 = 0;
        while k0 < n {
            let k1 = (k0 + BLOCK).min(n);
            // Diagonal block.
            for i in k0..k1 {
                for j in k0..=i {
                    let (ri, rj) = (i * n, j * n);
                    let mut s = a.data[ri + j];
                    for t in k0..j {
                        s -= a.data[ri + t] * a.data[rj + t];
                    }
                    if i == j {
                        if !(s > T::zero()) || !s.is_finite() {
                            return Err(NotPositiveDefinite { pivot: i });
                        }
                        a.data[ri + i] = s.sqrt();
                    } else {
                        a.data[ri + j] = s / a.data[rj + j];
                    }
                }
            }
            // Panel below the diagonal block: X L_kk^T = A_panel.
            for i in k1..n {
                let ri = i * n;
                for j in k0..k1 {
                    let rj = j * n;
                    let mut s = a.data[ri + j];
                    for t in k0..j {
                        s -= a.data[ri + t] * a.data[rj + t];
                    }
                    a.data[ri + j] = s / a.data[rj + j];
                }
            }
            // Trailing lower update, one block row at a time.
            let kb = k1 - k0;
            let base = a.data.as_mut_ptr();
            let mut i0 = k1;
            while i0 < n {
                let i1 = (i0 + BLOCK).min(n);
                // SAFETY: the destination (rows i0..i1, cols k1..i1) is disjoint
                // from both sources (cols k0..k1), and all views are in bounds.
                unsafe {
                    T::gemm(
                        i1 - i0,
                        kb,
                        i1 - k1,
                        -T::one(),
                        base.add(i0 * n + k0),
                        n as isize,
                        1,
                        base.add(k1 * n + k0),
                        1,
                        n as isize,
                        T::one(),
                        base.add(i0 * n + k1),
                        n as isize,
                        1,
                    );
                }
                i0 = i1;
            }
            k0 = k1;
        }
        for i in 0..n {
            for j in i + 1..n {
                a.data[i * n + j] = T::zero();
            }
        }
        Ok(Cholesky { l: a })
    }

    pub fn l(&self) -> &Mat<T> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// In-place `L X = B` for a row-major right-hand side with `dim()` rows.
    pub fn forward_in_place(&self, b: &mut Mat<T>) {
        let n = self.dim();
        assert_eq!(b.rows, n);
        let s = b.cols;
        if s == 0 {
            return;
        }
        let l = &self.l.data;
        let mut i0 = 0;
        while i0 < n {
            let i1 = (i0 + BLOCK).min(n);
            if i0 > 0 {
                let base = b.data.as_mut_ptr();
                // SAFETY: reads rows 0..i0 of `b`, writes rows i0..i1.
                unsafe {
                    T::gemm(
                        i1 - i0,
                        i0,
                        s,
                        -T::one(),
                        l.as_ptr().add(i0 * n),
                        n as isize,
                        1,
                        base,
                        s as isize,
                        1,
                        T::one(),
                        base.add(i0 * s),
                        s as isize,
                        1,
                    );
                }
            }
            for i in i0..i1 {
                let (done, rest) = b.data.split_at_mut(i * s);
                let row = &mut rest[..s];
                for t in i0..i {
                    let lit = l[i * n + t];
                    if lit != T::zero() {
                        axpy(-lit, &done[t * s..(t + 1) * s], row);
                    }
                }
                let inv = T::one() / l[i * n + i];
                row.iter_mut().for_each(|x| *x *= inv);
            }
            i0 = i1;
        }
    }

    /// In-place `L^T X = B`.
    pub fn backward_in_place(&self, b: &mut Mat<T>) {
        let n = self.dim();
        assert_eq!(b.rows, n);
        let s = b.cols;
        if s == 0 || n == 0 {
            return;
        }
        let l = &self.l.data;
        let nblocks = n.div_ceil(BLOCK);
        for blk in (0..nblocks).rev() {
            let i0 = blk * BLOCK;
            let i1 = (i0 + BLOCK).min(n);
            if i1 < n {
                let base = b.data.as_mut_ptr();
                // SAFETY: reads rows i1..n of `b`, writes rows i0..i1.
                unsafe {
                    T::gemm(
                        i1 - i0,
                        n - i1,
                        s,
                        -T::one(),
                        l.as_ptr().add(i1 * n + i0),
                        1,
                        n as isize,
                        base.add(i1 * s),
                        s as isize,
                        1,
                        T::one(),
                        base.add(i0 * s),
                        s as isize,
                        1,
                    );
                }
            }
            for i in (i0..i1).rev() {
                let (head, tail) = b.data.split_at_mut((i + 1) * s);
                let row = &mut head[i * s..];
                for t in i + 1..i1 {
                    let lti = l[t * n + i];
                    if lti != T::zero() {
                        axpy(-lti, &tail[(t - i - 1) * s..(t - i) * s], row);
                    }
                }
                let inv = T::one() / l[i * n + i];
                row.iter_mut().for_each(|x| *x *= inv);
            }
        }
    }

    /// Solves `A x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &[T]) -> Vec<T> {
        let mut m = Mat::from_vec(b.len(), 1, b.to_vec());
        self.forward_in_place(&mut m);
        self.backward_in_place(&mut m);
        m.into_vec()
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &Mat<T>) -> Mat<T> {
        let mut x = b.clone();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        x
    }
}

/// Eigenvalues of a symmetric matrix (lower triangle read), ascending.
///
/// Householder reduction to tridiagonal form followed by implicit QL.
pub fn symmetric_eigenvalues<T: Real>(a: &Mat<T>) -> Option<Vec<T>> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    if n == 0 {
        return Some(Vec::new());
    }
    let (mut d, mut e) = tridiagonalize(a);
    tridiagonal_ql(&mut d, &mut e)?;
    d.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    Some(d)
}

/// Returns the diagonal and sub-diagonal (last entry zero).
fn tridiagonalize<T: Real>(a: &Mat<T>) -> (Vec<T>, Vec<T>) {
    let n = a.rows;
    // Packed lower triangle: row i holds columns 0..=i.
    let mut rows: Vec<Vec<T>> = (0..n).map(|i| a.row(i)[..=i].to_vec()).collect();
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    let two = T::lit(2.0);
    for k in 0..n.saturating_sub(1) {
        d[k] = rows[k][k];
        let m = n - k - 1;
        let x: Vec<T> = (k + 1..n).map(|i| rows[i][k]).collect();
        let tail_norm2: T = x[1..].iter().map(|&v| v * v).sum();
        if tail_norm2 == T::zero() {
            e[k] = x[0];
            continue;
        }
        let norm = (x[0] * x[0] + tail_norm2).sqrt();
        let alpha = if x[0] > T::zero() { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vtv = v[0] * v[0] + tail_norm2;
        let beta = two / vtv;
        e[k] = alpha;

        // p = beta * A22 v from the packed lower triangle.
        let mut p = vec![T::zero(); m];
        for i in 0..m {
            let row = &rows[k + 1 + i][k + 1..];
            let vi = v[i];
            p[i] += dot(&row[..i], &v[..i]) + row[i] * vi;
            axpy(vi, &row[..i], &mut p[..i]);
        }
        p.iter_mut().for_each(|x| *x *= beta);
        let kcoef = beta / two * dot(&p, &v);
        let w: Vec<T> = p.iter().zip(&v).map(|(&pi, &vi)| pi - kcoef * vi).collect();
        for i in 0..m {
            let row = &mut rows[k + 1 + i][k + 1..];
            let (vi, wi) = (v[i], w[i]);
            for j in 0..=i {
                row[j] -= vi * w[j] + wi * v[j];
            }
        }
    }
    d[n - 1] = rows[n - 1][n - 1];
    e[n - 1] = T::zero();
    (d, e)
}

/// Implicit QL on a symmetric tridiagonal matrix; eigenvalues land in `d`.
fn tridiagonal_ql<T: Real>(d: &mut [T], e: &mut [T]) -> Option<()> {
    let n = d.len();
    let eps = T::epsilon();
    // absolute floor: without it a cluster of zero eigenvalues never deflates
    let anorm = d.iter().zip(e.iter()).fold(T::zero(), |m, (&a, &b)| m.max(a.abs() + b.abs()));
    let floor = eps * anorm;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= eps * dd || e[m].abs() <= floor {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return None;
            }
            let mut g = (d[l + 1] - d[l]) / (T::lit(2.0) * e[l]);
            let mut r = g.hypot(T::one());
            g = d[m] - d[l] + e[l] / (g + if g >= T::zero() { r.abs() } else { -r.abs() });
            let (mut s, mut c, mut p) = (T::one(), T::one(), T::zero());
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == T::zero() {
                    d[i + 1] -= p;
                    e[m] = T::zero();
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + T::lit(2.0) * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = T::zero();
        }
    }
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        let g = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut a = g.matmul(&g.transpose());
        for i in 0..n {
            a[(i, i)] += 0.5;
        }
        a
    }

    #[test]
    fn cholesky_reconstructs_across_block_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &n in &[1, 5, 97, 200] {
            let a = random_spd(n, &mut rng);
            let ch = Cholesky::factor(a.clone()).unwrap();
            let back = ch.l().matmul(&ch.l().transpose());
            for i in 0..n {
                for j in 0..n {
                    assert!((back[(i, j)] - a[(i, j)]).abs() < 1e-9, "n={n} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn solve_matches_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 230;
        let a = random_spd(n, &mut rng);
        let x = Mat::from_fn(n, 7, |_, _| rng.random_range(-2.0..2.0));
        let b = a.matmul(&x);
        let ch = Cholesky::factor(a).unwrap();
        let got = ch.solve(&b);
        for i in 0..n {
            for j in 0..7 {
                assert!((got[(i, j)] - x[(i, j)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert_eq!(Cholesky::factor(a).unwrap_err().pivot, 1);
    }

    #[test]
    fn eigenvalues_match_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &n in &[1, 2, 3, 17, 120] {
            let g = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let a = Mat::from_fn(n, n, |i, j| g[(i, j)] + g[(j, i)]);
            let ours = symmetric_eigenvalues(&a).unwrap();
            let na = nalgebra::DMatrix::from_fn(n, n, |i, j| a[(i, j)]);
            let mut theirs: Vec<f64> = na.symmetric_eigenvalues().iter().copied().collect();
            theirs.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (x, y) in ours.iter().zip(&theirs) {
                assert!((x - y).abs() < 1e-9, "n={n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn eigenvalues_of_low_rank_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(n, rank) in &[(40, 1), (90, 3), (200, 7)] {
            let v = Mat::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
            let a = v.matmul(&v.transpose());
            let ours = symmetric_eigenvalues(&a).unwrap();
            let na = nalgebra::DMatrix::from_fn(n, n, |i, j| a[(i, j)]);
            let mut theirs: Vec<f64> = na.symmetric_eigenvalues().iter().copied().collect();
            theirs.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (x, y) in ours.iter().zip(&theirs) {
                assert!((x - y).abs() < 1e-9, "n={n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn f32_cholesky_works() {
        let a: Mat<f32> = Mat::from_vec(2, 2, vec![4.0, 2.0, 2.0, 3.0]);
        let ch = Cholesky::factor(a).unwrap();
        let x = ch.solve_vec(&[2.0, 1.0]);
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-5);
    }
}
