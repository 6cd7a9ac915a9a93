//! Numerical rank of tall matrices.
//!
//! [`RankAccumulator`] streams rows and keeps an orthonormal basis of the
//! orthogonal complement of the rows seen so far. A row raises the rank when
//! its component in the complement exceeds `rel_tol` times the largest row
//! norm seen. Accepted directions are removed from the basis with blocked
//! Householder reflections, so each block costs a few matrix products whose
//! size shrinks as the rank grows.

use nalgebra::DMatrix;

/// Rank as the number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(data: &[f64], rows: usize, cols: usize, rel_tol: f64) -> usize {
    assert_eq!(data.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return 0;
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Row-major `c = a * b^T` with `a: m x k`, `b: n x k`, `c: m x n`.
fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major `c = alpha * a * b + beta * c` with `a: m x k`, `b: k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], lda: usize, b: &[f64], beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            lda as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Streaming numerical-rank estimator with an optional early-exit cap.
#[derive(Clone, Debug)]
pub struct RankAccumulator {
    dim: usize,
    /// Complement basis, `k x dim` row-major; only the first `k` rows are live.
    basis: Vec<f64>,
    k: usize,
    rank: usize,
    rows_seen: usize,
    rel_tol: f64,
    max_norm: f64,
    cap: usize,
    coeffs: Vec<f64>,
}

impl RankAccumulator {
    pub fn new(dim: usize, rel_tol: f64) -> Self {
        let mut basis = vec![0.0; dim * dim];
        for i in 0..dim {
            basis[i * dim + i] = 1.0;
        }
        Self { dim, basis, k: dim, rank: 0, rows_seen: 0, rel_tol, max_norm: 0.0, cap: dim, coeffs: Vec::new() }
    }

    /// Stop accepting rows once the rank reaches `cap`.
    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap.min(self.dim);
        self
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn rows_seen(&self) -> usize {
        self.rows_seen
    }

    pub fn saturated(&self) -> bool {
        self.rank >= self.cap
    }

    /// Adds `nrows` rows stored row-major in `rows`.
    pub fn push_rows(&mut self, rows: &[f64], nrows: usize) {
        assert_eq!(rows.len(), nrows * self.dim);
        if nrows == 0 {
            return;
        }
        if self.saturated() {
            self.rows_seen += nrows;
            return;
        }
        let dim = self.dim;
        let k0 = self.k;
        let mut coeffs = std::mem::take(&mut self.coeffs);
        coeffs.clear();
        coeffs.resize(nrows * k0, 0.0);
        gemm_abt(nrows, dim, k0, rows, &self.basis[..k0 * dim], &mut coeffs);

        // Householder vectors padded to k0, stored as columns of V (k0 x s).
        let mut vs: Vec<Vec<f64>> = Vec::new();
        let mut taus: Vec<f64> = Vec::new();
        for r in 0..nrows {
            self.rows_seen += 1;
            let g = &rows[r * dim..(r + 1) * dim];
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            self.max_norm = self.max_norm.max(gn);
            let k = k0 - vs.len();
            let c = &coeffs[r * k0..r * k0 + k];
            let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if cn <= self.rel_tol * self.max_norm || cn == 0.0 {
                continue;
            }
            // Reflect c onto the last live coordinate, which is then dropped.
            let mut v = c.to_vec();
            let alpha = if v[k - 1] >= 0.0 { -cn } else { cn };
            v[k - 1] -= alpha;
            let vv = v.iter().map(|x| x * x).sum::<f64>();
            let tau = 2.0 / vv;
            for rr in r + 1..nrows {
                let cj = &mut coeffs[rr * k0..rr * k0 + k];
                let dot = cj.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
                let f = tau * dot;
                for (a, b) in cj.iter_mut().zip(&v) {
                    *a -= f * b;
                }
            }
            v.resize(k0, 0.0);
            vs.push(v);
            taus.push(tau);
            self.rank += 1;
            if self.saturated() {
                self.rows_seen += nrows - r - 1;
                break;
            }
        }
        self.coeffs = coeffs;
        let s = vs.len();
        if s == 0 {
            return;
        }
        self.apply_reflectors(&vs, &taus);
        self.k = k0 - s;
    }

    /// `basis <- (P_{s-1} ... P_0 basis)[..k0-s]` via the compact WY form.
    fn apply_reflectors(&mut self, vs: &[Vec<f64>], taus: &[f64]) {
        let dim = self.dim;
        let k0 = self.k;
        let s = vs.len();
        // V as k0 x s row-major.
        let mut v = vec![0.0; k0 * s];
        for (j, col) in vs.iter().enumerate() {
            for i in 0..k0 {
                v[i * s + j] = col[i];
            }
        }
        // T upper triangular with P_0 ... P_{s-1} = I - V T V^T.
        let mut t = vec![0.0; s * s];
        for j in 0..s {
            t[j * s + j] = taus[j];
            if j == 0 {
                continue;
            }
            let w: Vec<f64> = (0..j).map(|i| (0..k0).map(|r| vs[i][r] * vs[j][r]).sum::<f64>()).collect();
            for i in 0..j {
                let mut acc = 0.0;
                for p in i..j {
                    acc += t[i * s + p] * w[p];
                }
                t[i * s + j] = -taus[j] * acc;
            }
        }
        // W = V^T B (s x dim), then W2 = T^T W, then B -= V W2 on live rows.
        let mut vt = vec![0.0; s * k0];
        for i in 0..k0 {
            for j in 0..s {
                vt[j * k0 + i] = v[i * s + j];
            }
        }
        let mut w = vec![0.0; s * dim];
        gemm(s, k0, dim, 1.0, &vt, k0, &self.basis[..k0 * dim], 0.0, &mut w);
        let mut tt = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                tt[i * s + j] = t[j * s + i];
            }
        }
        let mut w2 = vec![0.0; s * dim];
        gemm(s, s, dim, 1.0, &tt, s, &w, 0.0, &mut w2);
        let keep = k0 - s;
        gemm(keep, s, dim, -1.0, &v[..keep * s], s, &w2, 1.0, &mut self.basis[..keep * dim]);
    }
}

/// Convenience wrapper: streaming rank of a whole matrix.
pub fn streaming_rank(data: &[f64], rows: usize, cols: usize, rel_tol: f64, block: usize) -> usize {
    let mut acc = RankAccumulator::new(cols, rel_tol);
    for start in (0..rows).step_by(block.max(1)) {
        let n = block.min(rows - start);
        acc.push_rows(&data[start * cols..(start + n) * cols], n);
    }
    acc.rank()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn low_rank(rows: usize, cols: usize, r: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..rows * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..r * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                c[i * cols + j] = (0..r).map(|p| a[i * r + p] * b[p * cols + j]).sum();
            }
        }
        c
    }

    #[test]
    fn svd_rank_of_known_matrices() {
        assert_eq!(numerical_rank(&[1.0, 0.0, 0.0, 1.0], 2, 2, 1e-6), 2);
        assert_eq!(numerical_rank(&[1.0, 2.0, 2.0, 4.0], 2, 2, 1e-6), 1);
        assert_eq!(numerical_rank(&[0.0; 6], 2, 3, 1e-6), 0);
    }

    #[test]
    fn streaming_matches_svd_on_low_rank() {
        for (rows, cols, r) in [(200, 40, 13), (300, 60, 60), (50, 80, 50), (500, 30, 1)] {
            let m = low_rank(rows, cols, r, rows as u64);
            for block in [1, 7, 64] {
                assert_eq!(streaming_rank(&m, rows, cols, 1e-9, block), r, "{rows}x{cols} r={r} b={block}");
            }
            assert_eq!(numerical_rank(&m, rows, cols, 1e-9), r);
        }
    }

    #[test]
    fn cap_stops_early() {
        let m = low_rank(100, 20, 20, 3);
        let mut acc = RankAccumulator::new(20, 1e-9).with_cap(5);
        acc.push_rows(&m, 100);
        assert_eq!(acc.rank(), 5);
        assert!(acc.saturated());
        assert_eq!(acc.rows_seen(), 100);
    }

    #[test]
    fn basis_stays_orthonormal() {
        let m = low_rank(120, 25, 17, 9);
        let mut acc = RankAccumulator::new(25, 1e-9);
        for ch in m.chunks(25 * 10) {
            acc.push_rows(ch, ch.len() / 25);
        }
        let k = acc.k;
        assert_eq!(k, 25 - 17);
        for i in 0..k {
            for j in 0..k {
                let d: f64 = (0..25).map(|p| acc.basis[i * 25 + p] * acc.basis[j * 25 + p]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
            // orthogonal to every row
            for r in 0..120 {
                let d: f64 = (0..25).map(|p| acc.basis[i * 25 + p] * m[r * 25 + p]).sum();
                assert!(d.abs() < 1e-10);
            }
        }
    }
}
