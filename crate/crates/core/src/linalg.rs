//! Dense linear-algebra helpers.
//!
//! Complex products in nalgebra go through a generic kernel that is an order of
//! magnitude slower than the real one, so products whose operands are large or
//! real are routed through split real/imaginary gemms.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;

pub fn split(m: &CMat) -> (RMat, RMat) {
    (m.map(|z| z.re), m.map(|z| z.im))
}

pub fn join(re: &RMat, im: &RMat) -> CMat {
    re.zip_map(im, C64::new)
}

/// `a * b` using four real gemms.
pub fn zmul(a: &CMat, b: &CMat) -> CMat {
    let (ar, ai) = split(a);
    let (br, bi) = split(b);
    let re = &ar * &br - &ai * &bi;
    let im = &ar * &bi + &ai * &br;
    join(&re, &im)
}

/// `k * r * kᵀ` for real `k`.
pub fn real_sandwich(k: &RMat, r: &CMat) -> CMat {
    let (rr, ri) = split(r);
    let re = k * rr * k.transpose();
    let im = k * ri * k.transpose();
    join(&re, &im)
}

/// `kᵀ * a * k` for real `k`.
pub fn real_sandwich_t(k: &RMat, a: &CMat) -> CMat {
    let (ar, ai) = split(a);
    let re = k.tr_mul(&(ar * k));
    let im = k.tr_mul(&(ai * k));
    join(&re, &im)
}

pub fn trace(m: &CMat) -> C64 {
    m.diagonal().iter().sum()
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn hermiticity_residual(m: &CMat) -> f64 {
    frobenius(&(m - m.adjoint()))
}

pub fn hermitize(m: &mut CMat) {
    let h = (&*m + m.adjoint()) * C64::new(0.5, 0.0);
    *m = h;
}

/// Normalizes a Hermitian matrix to unit trace. Returns the trace before scaling.
pub fn normalize_trace(m: &mut CMat) -> f64 {
    let t = trace(m).re;
    if t != 0.0 {
        *m /= C64::new(t, 0.0);
    }
    t
}

/// Length of the real coordinate vector of an `n x n` Hermitian matrix.
pub fn herm_len(n: usize) -> usize {
    n * n
}

/// Isometric real coordinates of a Hermitian matrix: diagonal entries, then
/// `sqrt(2) Re` and `sqrt(2) Im` of each upper-triangular entry, row by row.
/// The Euclidean inner product of two such vectors is `Tr(A B)`.
pub fn herm_to_vec(m: &CMat) -> DVector<f64> {
    let mut out = DVector::zeros(herm_len(m.nrows()));
    herm_to_slice(m, out.as_mut_slice());
    out
}

pub fn herm_to_slice(m: &CMat, out: &mut [f64]) {
    let n = m.nrows();
    debug_assert_eq!(out.len(), n * n);
    let s = std::f64::consts::SQRT_2;
    let mut k = 0;
    for i in 0..n {
        out[k] = m[(i, i)].re;
        k += 1;
        for j in (i + 1)..n {
            // average the two triangles so slightly non-Hermitian input maps to its Hermitian part
            let z = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            out[k] = s * z.re;
            out[k + 1] = s * z.im;
            k += 2;
        }
    }
}

pub fn vec_to_herm(v: &[f64], n: usize) -> CMat {
    assert_eq!(v.len(), n * n, "coordinate length does not match dimension");
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut m = CMat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        m[(i, i)] = C64::new(v[k], 0.0);
        k += 1;
        for j in (i + 1)..n {
            let z = C64::new(v[k] * s, v[k + 1] * s);
            m[(i, j)] = z;
            m[(j, i)] = z.conj();
            k += 2;
        }
    }
    m
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn hermitian_eigen(m: &CMat) -> (DVector<f64>, CMat) {
    let mut h = m.clone();
    hermitize(&mut h);
    let eig = h.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = CMat::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn eigenvalues(m: &CMat) -> Vec<f64> {
    let mut h = m.clone();
    hermitize(&mut h);
    let mut v: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn min_eigenvalue(m: &CMat) -> f64 {
    eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Applies `f` to the eigenvalues of a Hermitian matrix.
pub fn spectral_map(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = hermitian_eigen(m);
    let scaled = CMat::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * f(vals[j]));
    let mut out = zmul(&scaled, &vecs.adjoint());
    hermitize(&mut out);
    out
}

pub fn psd_part(m: &CMat) -> CMat {
    spectral_map(m, |x| x.max(0.0))
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// `u v†`
pub fn outer(u: &CVec, v: &CVec) -> CMat {
    u * v.adjoint()
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, seed: u64) -> CMat {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        CMat::from_fn(n, n, |_, _| C64::new(next(), next()))
    }

    #[test]
    fn zmul_matches_generic_product() {
        let a = sample(7, 1);
        let b = sample(7, 2);
        assert!(frobenius(&(zmul(&a, &b) - &a * &b)) < 1e-12);
    }

    #[test]
    fn herm_coordinates_are_isometric() {
        let a = sample(5, 3);
        let a = &a + a.adjoint();
        let b = sample(5, 4);
        let b = &b + b.adjoint();
        let direct = trace(&(&a * &b)).re;
        let via = herm_to_vec(&a).dot(&herm_to_vec(&b));
        assert!((direct - via).abs() < 1e-12);
        assert!(frobenius(&(vec_to_herm(herm_to_vec(&a).as_slice(), 5) - &a)) < 1e-13);
    }

    #[test]
    fn eigen_reconstructs_and_sorts() {
        let a = sample(6, 5);
        let a = &a + a.adjoint();
        let (vals, vecs) = hermitian_eigen(&a);
        assert!(vals.as_slice().windows(2).all(|w| w[0] <= w[1]));
        let d = CMat::from_diagonal(&vals.map(|x| C64::new(x, 0.0)));
        assert!(frobenius(&(&vecs * d * vecs.adjoint() - &a)) < 1e-11);
        assert!((min_eigenvalue(&a) - vals[0]).abs() < 1e-12);
    }

    #[test]
    fn sandwiches_match_dense_products() {
        let k = sample(4, 6).map(|z| z.re);
        let r = sample(4, 7);
        let kc = k.map(|x| C64::new(x, 0.0));
        assert!(frobenius(&(real_sandwich(&k, &r) - &kc * &r * kc.transpose())) < 1e-12);
        assert!(frobenius(&(real_sandwich_t(&k, &r) - kc.transpose() * &r * &kc)) < 1e-12);
    }
}
