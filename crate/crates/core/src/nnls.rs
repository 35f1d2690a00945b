//! Non-negative least squares by the Lawson-Hanson active-set method.
//!
//! The passive-set least-squares problems are solved from a QR factorization
//! that is updated in place as columns enter (Householder) or leave (Givens),
//! so each iteration costs `O(m^2)` instead of a fresh factorization. A warm
//! start from a previous passive set is supported for slowly varying targets.

use nalgebra::DVector;

use crate::linalg::RMat;

#[derive(Debug, Clone, Copy)]
pub struct NnlsOptions {
    /// Iteration cap; 0 means `3 * columns`.
    pub max_iter: usize,
    /// Optimality tolerance on the gradient, relative to `max|a_j| * |b|`.
    pub tol: f64,
}

impl Default for NnlsOptions {
    fn default() -> Self {
        Self { max_iter: 0, tol: 1e-13 }
    }
}

#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Columns with positive weight, in factorization order.
    pub passive: Vec<usize>,
    pub converged: bool,
}

struct UpdatedQr {
    m: usize,
    qt: RMat,
    r: RMat,
    qtb: DVector<f64>,
    cols: Vec<usize>,
}

impl UpdatedQr {
    fn new(b: &DVector<f64>) -> Self {
        let m = b.len();
        Self { m, qt: RMat::identity(m, m), r: RMat::zeros(m, m), qtb: b.clone(), cols: Vec::new() }
    }

    /// Appends column `j`; returns false (leaving the factorization unchanged)
    /// if it is numerically dependent on the current columns.
    fn add(&mut self, a: &RMat, j: usize) -> bool {
        let k = self.cols.len();
        if k == self.m {
            return false;
        }
        let col = a.column(j);
        let v = &self.qt * col;
        let tail: f64 = v.rows(k, self.m - k).norm();
        if tail <= 1e-12 * col.norm() {
            return false;
        }
        let alpha = if v[k] > 0.0 { -tail } else { tail };
        let mut u = v.rows(k, self.m - k).clone_owned();
        u[0] -= alpha;
        let beta = u.norm_squared();
        if beta > 0.0 {
            let scale = 2.0 / beta;
            for c in 0..self.m {
                let mut s = 0.0;
                for i in 0..u.len() {
                    s += u[i] * self.qt[(k + i, c)];
                }
                s *= scale;
                for i in 0..u.len() {
                    self.qt[(k + i, c)] -= s * u[i];
                }
            }
            let mut s = 0.0;
            for i in 0..u.len() {
                s += u[i] * self.qtb[k + i];
            }
            s *= scale;
            for i in 0..u.len() {
                self.qtb[k + i] -= s * u[i];
            }
        }
        for i in 0..k {
            self.r[(i, k)] = v[i];
        }
        self.r[(k, k)] = alpha;
        for i in (k + 1)..self.m {
            self.r[(i, k)] = 0.0;
        }
        self.cols.push(j);
        true
    }

    /// Removes the column at position `pos` and restores triangularity.
    fn remove(&mut self, pos: usize) {
        let k = self.cols.len();
        for c in pos..k - 1 {
            for i in 0..=c + 1 {
                self.r[(i, c)] = self.r[(i, c + 1)];
            }
        }
        for i in 0..self.m {
            self.r[(i, k - 1)] = 0.0;
        }
        self.cols.remove(pos);
        for i in pos..k - 1 {
            let (a, b) = (self.r[(i, i)], self.r[(i + 1, i)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in i..k - 1 {
                let (x, y) = (self.r[(i, col)], self.r[(i + 1, col)]);
                self.r[(i, col)] = c * x + s * y;
                self.r[(i + 1, col)] = -s * x + c * y;
            }
            self.r[(i + 1, i)] = 0.0;
            for col in 0..self.m {
                let (x, y) = (self.qt[(i, col)], self.qt[(i + 1, col)]);
                self.qt[(i, col)] = c * x + s * y;
                self.qt[(i + 1, col)] = -s * x + c * y;
            }
            let (x, y) = (self.qtb[i], self.qtb[i + 1]);
            self.qtb[i] = c * x + s * y;
            self.qtb[i + 1] = -s * x + c * y;
        }
    }

    fn solve(&self) -> Vec<f64> {
        let k = self.cols.len();
        let mut z = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = self.qtb[i];
            for j in (i + 1)..k {
                s -= self.r[(i, j)] * z[j];
            }
            z[i] = s / self.r[(i, i)];
        }
        z
    }
}

/// Minimizes `|A x - b|` subject to `x >= 0`.
pub fn nnls(a: &RMat, b: &DVector<f64>, warm: Option<&[usize]>, opts: &NnlsOptions) -> NnlsSolution {
    assert_eq!(a.nrows(), b.len(), "row count mismatch");
    let n = a.ncols();
    let max_iter = if opts.max_iter == 0 { 3 * n.max(1) } else { opts.max_iter };
    let col_scale = (0..n).map(|j| a.column(j).norm()).fold(0.0, f64::max);
    let tol = opts.tol * col_scale * b.norm().max(f64::MIN_POSITIVE);
    let mut x = vec![0.0; n];
    let mut qr = UpdatedQr::new(b);
    let mut in_p = vec![false; n];

    if let Some(ws) = warm {
        for &j in ws {
            if j < n && !in_p[j] && qr.add(a, j) {
                in_p[j] = true;
            }
        }
        loop {
            let z = qr.solve();
            let bad: Vec<usize> = (0..z.len()).filter(|&i| z[i] <= 0.0).collect();
            if bad.is_empty() {
                for (pos, &j) in qr.cols.iter().enumerate() {
                    x[j] = z[pos];
                }
                break;
            }
            for &pos in bad.iter().rev() {
                in_p[qr.cols[pos]] = false;
                qr.remove(pos);
            }
        }
    }

    let mut rejected = vec![false; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut resid = b.clone();
        for &j in &qr.cols {
            resid.axpy(-x[j], &a.column(j), 1.0);
        }
        let w = a.tr_mul(&resid);
        let mut best = None;
        for j in 0..n {
            if !in_p[j] && !rejected[j] && w[j] > tol && best.is_none_or(|(_, v)| w[j] > v) {
                best = Some((j, w[j]));
            }
        }
        let Some((j, _)) = best else {
            converged = true;
            break;
        };
        if !qr.add(a, j) {
            rejected[j] = true;
            continue;
        }
        in_p[j] = true;
        loop {
            let z = qr.solve();
            if z.iter().all(|&v| v > 0.0) {
                for (pos, &c) in qr.cols.iter().enumerate() {
                    x[c] = z[pos];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (pos, &c) in qr.cols.iter().enumerate() {
                if z[pos] <= 0.0 {
                    let t = x[c] / (x[c] - z[pos]);
                    alpha = alpha.min(t);
                }
            }
            for (pos, &c) in qr.cols.iter().enumerate() {
                x[c] += alpha * (z[pos] - x[c]);
            }
            let mut removed = false;
            for pos in (0..qr.cols.len()).rev() {
                let c = qr.cols[pos];
                if x[c] <= 1e-14 * x.iter().fold(0.0, |m: f64, &v| m.max(v)) || z[pos] <= 0.0 && x[c] <= 0.0 {
                    x[c] = 0.0;
                    in_p[c] = false;
                    qr.remove(pos);
                    removed = true;
                }
            }
            if !removed {
                // alpha hit a boundary only up to rounding; drop the smallest entry
                let (pos, _) = qr
                    .cols
                    .iter()
                    .enumerate()
                    .min_by(|a, b| x[*a.1].total_cmp(&x[*b.1]))
                    .expect("passive set is non-empty");
                let c = qr.cols[pos];
                x[c] = 0.0;
                in_p[c] = false;
                qr.remove(pos);
            }
            rejected.iter_mut().for_each(|r| *r = false);
        }
    }

    let xv = DVector::from_vec(x);
    let residual_norm = (a * &xv - b).norm();
    NnlsSolution { x: xv, residual_norm, iterations, passive: qr.cols.clone(), converged }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive oracle: the best least-squares fit over all supports whose
    /// unconstrained solution is non-negative.
    fn brute_force(a: &RMat, b: &DVector<f64>) -> f64 {
        let n = a.ncols();
        let mut best = b.norm();
        for mask in 1u32..(1 << n) {
            let cols: Vec<usize> = (0..n).filter(|j| mask >> j & 1 == 1).collect();
            let sub = RMat::from_fn(a.nrows(), cols.len(), |i, k| a[(i, cols[k])]);
            let Some(sol) = sub.clone().svd(true, true).solve(b, 1e-12).ok() else { continue };
            if sol.iter().all(|&v| v >= -1e-12) {
                best = best.min((&sub * sol - b).norm());
            }
        }
        best
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        }
    }

    #[test]
    fn matches_exhaustive_search() {
        for seed in 0..40 {
            let mut r = lcg(seed);
            let (m, n) = (6 + (seed % 3) as usize, 3 + (seed % 6) as usize);
            let a = RMat::from_fn(m, n, |_, _| r());
            let b = DVector::from_fn(m, |_, _| r());
            let sol = nnls(&a, &b, None, &NnlsOptions::default());
            assert!(sol.converged);
            assert!(sol.x.iter().all(|&v| v >= 0.0));
            let oracle = brute_force(&a, &b);
            assert!((sol.residual_norm - oracle).abs() < 1e-10, "seed {seed}: {} vs {oracle}", sol.residual_norm);
        }
    }

    #[test]
    fn recovers_planted_nonnegative_solution() {
        let mut r = lcg(77);
        let (m, n) = (40, 120);
        let a = RMat::from_fn(m, n, |_, _| r());
        let mut x0 = DVector::zeros(n);
        for j in [3, 17, 40, 41, 99] {
            x0[j] = 0.2 + r().abs();
        }
        let b = &a * &x0;
        let sol = nnls(&a, &b, None, &NnlsOptions::default());
        assert!(sol.residual_norm < 1e-10);
        assert!((&sol.x - &x0).norm() < 1e-8);
    }

    #[test]
    fn warm_start_reaches_same_optimum() {
        let mut r = lcg(5);
        let (m, n) = (30, 60);
        let a = RMat::from_fn(m, n, |_, _| r());
        let b = DVector::from_fn(m, |_, _| r());
        let cold = nnls(&a, &b, None, &NnlsOptions::default());
        let b2 = &b + DVector::from_fn(m, |_, _| 1e-3 * r());
        let warm = nnls(&a, &b2, Some(&cold.passive), &NnlsOptions::default());
        let fresh = nnls(&a, &b2, None, &NnlsOptions::default());
        assert!((warm.residual_norm - fresh.residual_norm).abs() < 1e-10);
        assert!(warm.iterations <= fresh.iterations);
        // a warm set containing garbage is repaired
        let junk: Vec<usize> = (0..n).collect();
        let repaired = nnls(&a, &b2, Some(&junk), &NnlsOptions::default());
        assert!((repaired.residual_norm - fresh.residual_norm).abs() < 1e-10);
    }

    #[test]
    fn zero_target_gives_zero() {
        let a = RMat::from_fn(4, 3, |i, j| (i + j) as f64);
        let sol = nnls(&a, &DVector::zeros(4), None, &NnlsOptions::default());
        assert_eq!(sol.x, DVector::zeros(3));
        assert!(sol.converged);
    }

    proptest! {
        #[test]
        fn kkt_conditions_hold(seed in 0u64..10_000, m in 3usize..12, n in 1usize..15) {
            let mut r = lcg(seed);
            let a = RMat::from_fn(m, n, |_, _| r());
            let b = DVector::from_fn(m, |_, _| r());
            let sol = nnls(&a, &b, None, &NnlsOptions::default());
            prop_assert!(sol.x.iter().all(|&v| v >= 0.0));
            let w = a.tr_mul(&(&b - &a * &sol.x));
            for j in 0..n {
                prop_assert!(w[j] <= 1e-9);
                if sol.x[j] > 0.0 {
                    prop_assert!(w[j].abs() <= 1e-9);
                }
            }
        }
    }
}
