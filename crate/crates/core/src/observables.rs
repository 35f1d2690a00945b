//! Diagnostics: densities, inter-replica correlators, swap-operator purities,
//! Rényi-2 averages, distance measures and bootstrap bands.
//!
//! Subsystem quantities use the qubit tensor structure of the occupation
//! basis (site `s` is bit `s - 1`). For a partition whose `A` block is a
//! leading run of sites this coincides with the fermionic reduced state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param, Error, Result};
use crate::fock::FockSector;
use crate::linalg::{frobenius, hermitian_eigen, psd_part, spectral_map, CMat, CVec, C64};
use crate::replica::ProjectedState;

fn site_signs(sector: &FockSector, site: usize) -> Result<Vec<f64>> {
    if site == 0 || site > sector.sites() {
        return param(format!("site {site} outside 1..={}", sector.sites()));
    }
    Ok((0..sector.dim()).map(|k| if sector.is_occupied(k, site) { -1.0 } else { 1.0 }).collect())
}

fn check_order_two(r2: &ProjectedState, sector: &FockSector) -> Result<()> {
    if r2.order() != 2 || r2.basis().site_dim() != sector.dim() {
        return param("expected an order-two state of this sector");
    }
    Ok(())
}

/// `<n_i>` for a single-copy state, sites in order.
pub fn densities(rho: &CMat, sector: &FockSector) -> Result<Vec<f64>> {
    if rho.nrows() != sector.dim() || !rho.is_square() {
        return param("density matrix does not match the sector");
    }
    Ok((1..=sector.sites())
        .map(|s| (0..sector.dim()).filter(|&k| sector.is_occupied(k, s)).map(|k| rho[(k, k)].re).sum())
        .collect())
}

/// `C_ij = Tr[(O_i^1 - O_i^2)(O_j^1 - O_j^2) ρ^(2)]` with 1-based sites.
pub fn cross_correlator(r2: &ProjectedState, sector: &FockSector, i: usize, j: usize) -> Result<f64> {
    check_order_two(r2, sector)?;
    let (oi, oj) = (site_signs(sector, i)?, site_signs(sector, j)?);
    Ok(correlator_from(r2, &oi, &oj))
}

fn correlator_from(r2: &ProjectedState, oi: &[f64], oj: &[f64]) -> f64 {
    let b = r2.basis();
    let d = b.site_dim();
    let m = r2.matrix();
    (0..b.full_dim())
        .map(|x| {
            let (c, v) = b.row(x);
            let (x1, x2) = (x / d, x % d);
            (oi[x1] - oi[x2]) * (oj[x1] - oj[x2]) * m[(c, c)].re * v * v
        })
        .sum()
}

/// All `C_ij`, row-major `L x L`.
pub fn correlator_matrix(r2: &ProjectedState, sector: &FockSector) -> Result<Vec<Vec<f64>>> {
    check_order_two(r2, sector)?;
    let signs: Vec<Vec<f64>> = (1..=sector.sites()).map(|s| site_signs(sector, s)).collect::<Result<_>>()?;
    Ok(signs.iter().map(|oi| signs.iter().map(|oj| correlator_from(r2, oi, oj)).collect()).collect())
}

/// Per-trajectory contributions to `C_ij`: `2 (<O_i O_j> - <O_i><O_j>)`.
/// Their mean is `C_ij` of the trajectory-averaged order-two state.
pub fn correlator_samples(states: &[CVec], sector: &FockSector, i: usize, j: usize) -> Result<Vec<f64>> {
    let (oi, oj) = (site_signs(sector, i)?, site_signs(sector, j)?);
    states
        .iter()
        .map(|psi| {
            if psi.len() != sector.dim() {
                return param("state does not match the sector");
            }
            let p: Vec<f64> = psi.iter().map(|a| a.norm_sqr()).collect();
            let ex = |o: &[f64]| o.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
            let both: f64 = oi.iter().zip(&oj).zip(&p).map(|((a, b), w)| a * b * w).sum();
            Ok(2.0 * (both - ex(&oi) * ex(&oj)))
        })
        .collect()
}

/// Bipartition of the chain; `A` holds 1-based sites.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    sites: usize,
    a: Vec<usize>,
    b: Vec<usize>,
}

impl Partition {
    pub fn new(sites: usize, a: &[usize]) -> Result<Self> {
        let mut a = a.to_vec();
        a.sort_unstable();
        a.dedup();
        if a.iter().any(|&s| s == 0 || s > sites) {
            return param(format!("partition sites must lie in 1..={sites}"));
        }
        let b = (1..=sites).filter(|s| !a.contains(s)).collect();
        Ok(Self { sites, a, b })
    }

    /// Sites `1..=L/2`.
    pub fn half_chain(sites: usize) -> Result<Self> {
        Self::new(sites, &(1..=sites / 2).collect::<Vec<_>>())
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn a(&self) -> &[usize] {
        &self.a
    }

    pub fn b(&self) -> &[usize] {
        &self.b
    }

    fn mask(&self) -> u64 {
        self.a.iter().fold(0, |m, s| m | 1 << (s - 1))
    }

    fn check(&self, sector: &FockSector) -> Result<()> {
        if self.sites != sector.sites() {
            return param("partition and sector have different chain lengths");
        }
        Ok(())
    }
}

/// `χ_A` on the two-copy qubit space, stored as the permutation of basis
/// indices `x1 * 2^L + x2` it induces.
#[derive(Debug, Clone)]
pub struct SwapOperator {
    sites: usize,
    mask: u64,
    perm: Vec<usize>,
}

impl SwapOperator {
    pub fn new(partition: &Partition) -> Result<Self> {
        if partition.sites > 10 {
            return param("swap operator is limited to 10 sites");
        }
        let l = partition.sites;
        let mask = partition.mask();
        let n = 1usize << l;
        let perm = (0..n * n)
            .map(|x| {
                let (s1, s2) = swap_bits((x / n) as u64, (x % n) as u64, mask);
                s1 as usize * n + s2 as usize
            })
            .collect();
        Ok(Self { sites: l, mask, perm })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Dense `4^L x 4^L` matrix; `(χ)_{χ(x), x} = 1`.
    pub fn dense(&self) -> CMat {
        let n = self.perm.len();
        let mut m = CMat::zeros(n, n);
        for (x, &y) in self.perm.iter().enumerate() {
            m[(y, x)] = C64::new(1.0, 0.0);
        }
        m
    }

    /// `Tr(χ_A ρ)` for a two-copy operator on the sector.
    pub fn expectation(&self, r2: &ProjectedState, sector: &FockSector) -> Result<f64> {
        check_order_two(r2, sector)?;
        if sector.sites() != self.sites {
            return param("swap operator and sector have different chain lengths");
        }
        let full = r2.basis().embed(r2.matrix());
        let d = sector.dim();
        let states = sector.states();
        let mut acc = C64::new(0.0, 0.0);
        for x1 in 0..d {
            for x2 in 0..d {
                let (s1, s2) = swap_bits(states[x1], states[x2], self.mask);
                // copies keep their particle number only when A is exchanged evenly
                if let (Some(y1), Some(y2)) = (sector.index_of(s1), sector.index_of(s2)) {
                    acc += full[(x1 * d + x2, y1 * d + y2)];
                }
            }
        }
        Ok(acc.re)
    }
}

fn swap_bits(x1: u64, x2: u64, mask: u64) -> (u64, u64) {
    ((x1 & !mask) | (x2 & mask), (x2 & !mask) | (x1 & mask))
}

/// `<P(ρ_A)> = Tr(χ_A ρ^(2))`.
pub fn purity_average(r2: &ProjectedState, sector: &FockSector, partition: &Partition) -> Result<f64> {
    partition.check(sector)?;
    SwapOperator::new(partition)?.expectation(r2, sector)
}

/// Reduced state `ρ_A` of a pure sector state, indexed by the bits of `A`
/// in site order.
pub fn reduced_state(psi: &CVec, sector: &FockSector, partition: &Partition) -> Result<CMat> {
    partition.check(sector)?;
    if psi.len() != sector.dim() {
        return param("state does not match the sector");
    }
    let pick = |bits: u64, sites: &[usize]| {
        sites.iter().enumerate().fold(0usize, |acc, (k, s)| acc | (((bits >> (s - 1)) & 1) as usize) << k)
    };
    let (na, nb) = (1usize << partition.a.len(), 1usize << partition.b.len());
    let mut m = CMat::zeros(na, nb);
    for (k, &bits) in sector.states().iter().enumerate() {
        m[(pick(bits, &partition.a), pick(bits, &partition.b))] = psi[k];
    }
    Ok(&m * m.adjoint())
}

/// `Tr(ρ_A²)` of a pure state.
pub fn subsystem_purity(psi: &CVec, sector: &FockSector, partition: &Partition) -> Result<f64> {
    let rho = reduced_state(psi, sector, partition)?;
    Ok(frobenius(&rho).powi(2))
}

/// Per-trajectory purities `Tr(ρ_A^(c)²)`.
pub fn purity_samples(states: &[CVec], sector: &FockSector, partition: &Partition) -> Result<Vec<f64>> {
    states.iter().map(|psi| subsystem_purity(psi, sector, partition)).collect()
}

/// `<S_2> = -(1/N_c) sum_c log Tr(ρ_A^(c)²)`.
pub fn renyi2_trajectory_average(states: &[CVec], sector: &FockSector, partition: &Partition) -> Result<f64> {
    if states.is_empty() {
        return param("no trajectory states");
    }
    let p = purity_samples(states, sector, partition)?;
    Ok(-p.iter().map(|v| v.ln()).sum::<f64>() / p.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistancePanel {
    pub trace_distance: f64,
    pub fidelity: f64,
    pub frobenius: f64,
    /// Largest difference between sorted spectra.
    pub max_eigen_gap: f64,
    /// Set when either input had a negative eigenvalue and the fidelity was
    /// computed on positive parts.
    pub psd_projected: bool,
}

/// Negative eigenvalues below this (relative to the spectral scale) trigger
/// the positive-part fallback for the fidelity.
const PSD_TOLERANCE: f64 = 1e-12;

pub fn distance_panel(rho: &CMat, sigma: &CMat) -> Result<DistancePanel> {
    if rho.shape() != sigma.shape() || !rho.is_square() {
        return param("distance panel needs square matrices of equal shape");
    }
    let (er, _) = hermitian_eigen(rho);
    let (es, _) = hermitian_eigen(sigma);
    let (ed, _) = hermitian_eigen(&(rho - sigma));
    let max_eigen_gap = er.iter().zip(es.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let negative = |e: &nalgebra::DVector<f64>| {
        let scale = e.iter().map(|v| v.abs()).fold(1.0, f64::max);
        e.iter().any(|&v| v < -PSD_TOLERANCE * scale)
    };
    let psd_projected = negative(&er) || negative(&es);
    let (p, q) = if psd_projected { (psd_part(rho), psd_part(sigma)) } else { (rho.clone(), sigma.clone()) };
    let root = spectral_map(&p, |v| v.max(0.0).sqrt());
    let inner = &root * &q * &root;
    let (ei, _) = hermitian_eigen(&inner);
    let fidelity = ei.iter().map(|v| v.max(0.0).sqrt()).sum::<f64>().powi(2);
    Ok(DistancePanel {
        trace_distance: 0.5 * ed.iter().map(|v| v.abs()).sum::<f64>(),
        fidelity,
        frobenius: frobenius(&(rho - sigma)),
        max_eigen_gap,
        psd_projected,
    })
}

/// Bootstrap band of a sample mean: `sigma` is the standard deviation of the
/// resampled means and the band is `mean ± 3 sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub mean: f64,
    pub sigma: f64,
}

impl Band {
    pub fn lower(&self) -> f64 {
        self.mean - 3.0 * self.sigma
    }

    pub fn upper(&self) -> f64 {
        self.mean + 3.0 * self.sigma
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.lower() && value <= self.upper()
    }
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

pub fn bootstrap_band(samples: &[f64], resamples: usize, seed: u64) -> Result<Band> {
    if samples.is_empty() || resamples < 2 {
        return Err(Error::Parameter("bootstrap needs samples and at least two resamples".into()));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let mu = means.iter().sum::<f64>() / resamples as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (resamples - 1) as f64;
    Ok(Band { mean, sigma: var.sqrt() })
}

/// Band of `-log <P>` from purity samples, propagated through the resampled
/// means of `P`.
pub fn log_purity_band(purities: &[f64], resamples: usize, seed: u64) -> Result<Band> {
    if purities.is_empty() || resamples < 2 {
        return param("bootstrap needs samples and at least two resamples");
    }
    let n = purities.len();
    let mean = -(purities.iter().sum::<f64>() / n as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..resamples)
        .map(|_| -((0..n).map(|_| purities[rng.random_range(0..n)]).sum::<f64>() / n as f64).ln())
        .collect();
    let mu = vals.iter().sum::<f64>() / resamples as f64;
    let var = vals.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (resamples - 1) as f64;
    Ok(Band { mean, sigma: var.sqrt() })
}
