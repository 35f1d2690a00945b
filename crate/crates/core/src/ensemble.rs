//! Weighted pure-state ensembles that estimate high-order replica states from
//! a low-order one.
//!
//! Members are Gaussian (Slater-determinant) states or trajectory snapshots.
//! Non-negative weights are fitted so that the ensemble reproduces the leading
//! order-`M` coefficients implied by the target order-2 state; the resulting
//! mixture is positive by construction and is then transposed onto the exact
//! affine set fixed by the partial trace.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::binio;
use crate::error::{param, Error, Result};
use crate::fock::FockSector;
use crate::linalg::{herm_to_slice, min_eigenvalue, outer, spectral_map, CMat, CVec, RMat, C64};
use crate::nnls::{nnls, NnlsOptions};
use crate::replica::ProjectedState;
use crate::transfer::{transpose_exact, LiftedEstimate, TransferMap};

/// Weight of the row enforcing `sum_k w_k = 1` in the augmented fit. The
/// active-set gradient carries rounding noise of order `weight^2 * eps`, so
/// much larger values stall the solver on targets outside the ensemble cone.
pub const SUM_CONSTRAINT_WEIGHT: f64 = 1e3;

/// Haar-random `n x n` unitary: QR of a complex Ginibre matrix with the
/// phases of `R`'s diagonal absorbed into `Q`.
pub fn haar_unitary(n: usize, rng: &mut impl Rng) -> CMat {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let z = CMat::from_fn(n, n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * h, im * h)
    });
    let qr = z.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { C64::new(1.0, 0.0) };
        let mut col = q.column_mut(j);
        col *= phase;
    }
    q
}

/// Slater determinant filling the columns of `orbitals` (`L x n`,
/// orthonormal): the amplitude on occupied sites `S` is `det(orbitals[S, :])`.
pub fn slater_state(sector: &FockSector, orbitals: &CMat) -> Result<CVec> {
    if orbitals.nrows() != sector.sites() || orbitals.ncols() != sector.particles() {
        return param("orbital matrix must be L x n");
    }
    let n = sector.particles();
    let mut psi = CVec::from_iterator(
        sector.dim(),
        sector.states().iter().map(|&bits| {
            if n == 0 {
                return C64::new(1.0, 0.0);
            }
            let occ: Vec<usize> = (0..sector.sites()).filter(|&x| bits >> x & 1 == 1).collect();
            CMat::from_fn(n, n, |i, k| orbitals[(occ[i], k)]).determinant()
        }),
    );
    let norm = psi.norm();
    psi /= C64::new(norm, 0.0);
    Ok(psi)
}

/// A Haar-random Gaussian state: the first `n` columns of a random unitary.
pub fn sample_gaussian_state(sector: &FockSector, rng: &mut impl Rng) -> CVec {
    let u = haar_unitary(sector.sites(), rng);
    let phi = u.columns(0, sector.particles()).clone_owned();
    slater_state(sector, &phi).expect("orbital shape matches the sector")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    Gaussian,
    Snapshot,
}

#[derive(Debug, Clone)]
pub struct PureEnsemble {
    sites: usize,
    particles: usize,
    kind: EnsembleKind,
    seed: u64,
    states: Vec<CVec>,
    /// Leading order-`M` coefficients per member, keyed by `M`; one column per member.
    features: Vec<(usize, RMat)>,
}

impl PureEnsemble {
    pub fn from_states(sector: &FockSector, states: Vec<CVec>, kind: EnsembleKind, seed: u64) -> Result<Self> {
        if states.is_empty() {
            return param("ensemble is empty");
        }
        if states.iter().any(|s| s.len() != sector.dim() || (s.norm() - 1.0).abs() > 1e-10) {
            return param("ensemble members must be normalized sector states");
        }
        Ok(Self { sites: sector.sites(), particles: sector.particles(), kind, seed, states, features: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn states(&self) -> &[CVec] {
        &self.states
    }

    pub fn features(&self, order: usize) -> Option<&RMat> {
        self.features.iter().find(|(o, _)| *o == order).map(|(_, f)| f)
    }

    /// Computes and stores the leading order-`M` coefficients of every member
    /// for `map`, replacing any previous features of that order.
    pub fn attach(&mut self, map: &TransferMap) -> Result<()> {
        self.check_map(map)?;
        let f = member_features(&self.states, map);
        self.features.retain(|(o, _)| *o != map.upper());
        self.features.push((map.upper(), f));
        Ok(())
    }

    fn check_map(&self, map: &TransferMap) -> Result<()> {
        let key = map.key();
        if key.sites != self.sites || key.particles != self.particles {
            return param("transfer map and ensemble belong to different sectors");
        }
        Ok(())
    }

    /// Size in bytes of the stored features.
    pub fn feature_bytes(&self) -> usize {
        self.features.iter().map(|(_, f)| f.len() * 8).sum()
    }

    const MAGIC: [u8; 8] = *b"RCENS001";
    const VERSION: u32 = 1;

    /// Writes the member states; features are recomputed on load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&Self::MAGIC)?;
        binio::put_u32(&mut w, Self::VERSION)?;
        binio::put_u32(&mut w, self.sites as u32)?;
        binio::put_u32(&mut w, self.particles as u32)?;
        binio::put_u32(&mut w, matches!(self.kind, EnsembleKind::Snapshot) as u32)?;
        binio::put_u64(&mut w, self.seed)?;
        binio::put_u64(&mut w, self.states.len() as u64)?;
        let dim = self.states[0].len();
        binio::put_u64(&mut w, dim as u64)?;
        let flat: Vec<f64> = self.states.iter().flat_map(|s| s.iter().flat_map(|z| [z.re, z.im])).collect();
        binio::put_f64s(&mut w, &flat)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, sector: &FockSector) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        binio::expect_magic(&mut r, &Self::MAGIC)?;
        let version = binio::get_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::Format(format!("ensemble version {version}, expected {}", Self::VERSION)));
        }
        let sites = binio::get_u32(&mut r)? as usize;
        let particles = binio::get_u32(&mut r)? as usize;
        if sites != sector.sites() || particles != sector.particles() {
            return Err(Error::Format(format!(
                "ensemble is for L={sites}, n={particles}; requested L={}, n={}",
                sector.sites(),
                sector.particles()
            )));
        }
        let kind = if binio::get_u32(&mut r)? == 1 { EnsembleKind::Snapshot } else { EnsembleKind::Gaussian };
        let seed = binio::get_u64(&mut r)?;
        let count = binio::get_u64(&mut r)? as usize;
        let dim = binio::get_u64(&mut r)? as usize;
        if dim != sector.dim() {
            return Err(Error::Format(format!("ensemble state dimension {dim}, expected {}", sector.dim())));
        }
        let flat = binio::get_f64s(&mut r, count * dim * 2)?;
        let states: Vec<CVec> = flat
            .chunks_exact(dim * 2)
            .map(|c| CVec::from_iterator(dim, c.chunks_exact(2).map(|p| C64::new(p[0], p[1]))))
            .collect();
        Self::from_states(sector, states, kind, seed).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Leading order-`M` coefficients `(C^M)^{-1} C^N (õ^N | u_N u_N†)` for each
/// member, one column per member.
fn member_features(states: &[CVec], map: &TransferMap) -> RMat {
    let basis = map.lower_basis();
    let len = basis.dim().pow(2);
    let mut flat = vec![0.0; len * states.len()];
    flat.par_chunks_mut(len).zip(states.par_iter()).for_each(|(col, psi)| {
        let u = basis.product_coefficients(psi);
        herm_to_slice(&outer(&u, &u), col);
    });
    let stack = RMat::from_vec(len, states.len(), flat);
    let transform = map.lift_matrix() * map.lower_ortho();
    transform * stack
}

pub fn build_ensemble(sector: &FockSector, size: usize, seed: u64, maps: &[&TransferMap]) -> Result<PureEnsemble> {
    if size == 0 {
        return param("ensemble size must be positive");
    }
    let states: Vec<CVec> = (0..size)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            sample_gaussian_state(sector, &mut rng)
        })
        .collect();
    let mut e = PureEnsemble::from_states(sector, states, EnsembleKind::Gaussian, seed)?;
    for m in maps {
        e.attach(m)?;
    }
    Ok(e)
}

#[derive(Debug, Clone)]
pub struct WeightFit {
    pub weights: DVector<f64>,
    /// `|F w - c|` over the leading order-`M` coefficients.
    pub residual: f64,
    pub active: Vec<usize>,
    /// Set when the sum constraint or the solver did not converge cleanly.
    pub flagged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub sum_weight: f64,
    pub nnls: NnlsOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { sum_weight: SUM_CONSTRAINT_WEIGHT, nnls: NnlsOptions::default() }
    }
}

/// Leading order-`M` coefficients implied by the order-`N` target.
pub fn target_coefficients(target: &ProjectedState, map: &TransferMap) -> Result<DVector<f64>> {
    if target.order() != map.lower() || target.basis().dim() != map.lower_basis().dim() {
        return param("target order does not match the transfer map");
    }
    Ok(map.lift_coefficients(&map.lower_coefficients(target.matrix())))
}

pub fn fit_weights(target: &ProjectedState, ensemble: &PureEnsemble, map: &TransferMap) -> Result<WeightFit> {
    fit_weights_with(target, ensemble, map, None, &FitOptions::default())
}

/// Non-negative weights `w`, summing to one, minimizing the mismatch of the
/// leading order-`M` coefficients. `warm` is a previous active set.
pub fn fit_weights_with(
    target: &ProjectedState,
    ensemble: &PureEnsemble,
    map: &TransferMap,
    warm: Option<&[usize]>,
    opts: &FitOptions,
) -> Result<WeightFit> {
    ensemble.check_map(map)?;
    let features = ensemble
        .features(map.upper())
        .ok_or_else(|| Error::Parameter(format!("ensemble has no order-{} features", map.upper())))?;
    let c = target_coefficients(target, map)?;
    let (s, n) = features.shape();
    let mut a = RMat::zeros(s + 1, n);
    a.row_mut(0).fill(opts.sum_weight);
    a.view_mut((1, 0), (s, n)).copy_from(features);
    let mut b = DVector::zeros(s + 1);
    b[0] = opts.sum_weight;
    b.rows_mut(1, s).copy_from(&c);
    let sol = nnls(&a, &b, warm, &opts.nnls);
    let total: f64 = sol.x.sum();
    if !(total > 0.0) {
        return Err(Error::Validation("ensemble fit produced no positive weights".into()));
    }
    let weights = &sol.x / total;
    let residual = (features * &weights - &c).norm();
    let flagged = !sol.converged || (total - 1.0).abs() > 1e-6;
    let active = sol.passive.clone();
    Ok(WeightFit { weights, residual, active, flagged, iterations: sol.iterations })
}

/// `sum_k w_k (V† ψ_k^{⊗M})(V† ψ_k^{⊗M})†` over members with nonzero weight.
pub fn mixture_state(ensemble: &PureEnsemble, weights: &DVector<f64>, map: &TransferMap) -> Result<ProjectedState> {
    let (states, w): (Vec<CVec>, Vec<f64>) = weights
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(k, &x)| (ensemble.states[k].clone(), x))
        .unzip();
    ProjectedState::from_pure_states(map.upper_basis().clone(), &states, &w)
}

#[derive(Debug, Clone)]
pub struct StabilizedEstimate {
    pub estimate: LiftedEstimate,
    pub fit: WeightFit,
    /// Smallest eigenvalue of the mixture before transposition.
    pub min_eig_before: f64,
    pub min_eig_after: f64,
}

/// Ensemble fit followed by exact transposition onto the target's affine set.
pub fn stabilized_estimate(
    target: &ProjectedState,
    ensemble: &PureEnsemble,
    map: &TransferMap,
    warm: Option<&[usize]>,
) -> Result<StabilizedEstimate> {
    let fit = fit_weights_with(target, ensemble, map, warm, &FitOptions::default())?;
    let mixture = mixture_state(ensemble, &fit.weights, map)?;
    let min_eig_before = min_eigenvalue(mixture.matrix());
    let estimate = transpose_exact(&mixture, target, map)?;
    let min_eig_after = estimate.provenance.min_eigenvalue;
    Ok(StabilizedEstimate { estimate, fit, min_eig_before, min_eig_after })
}

#[derive(Debug, Clone, Copy)]
pub struct PsdOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Eigenvalues are lifted to this fraction of the current deficit.
    pub margin: f64,
}

impl Default for PsdOptions {
    fn default() -> Self {
        Self { max_iter: 2000, tol: 1e-8, margin: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct PsdRepair {
    pub estimate: LiftedEstimate,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternating projections between the positive cone and the affine set of
/// operators whose partial trace equals `target`. Only the null-space
/// component of the estimate changes. Negative eigenvalues are raised past
/// zero by `margin` times the current deficit, which terminates in a few
/// iterations when the affine set contains a strictly positive operator.
/// Without one (for example a rank-deficient target) convergence is
/// sublinear and the result is returned unconverged.
pub fn enforce_psd_nullspace(
    estimate: &ProjectedState,
    target: &ProjectedState,
    map: &TransferMap,
    opts: &PsdOptions,
) -> Result<PsdRepair> {
    let mut current = transpose_exact(estimate, target, map)?;
    let mut iterations = 0;
    while current.provenance.min_eigenvalue < -opts.tol && iterations < opts.max_iter {
        let floor = opts.margin * (-current.provenance.min_eigenvalue);
        let clipped = ProjectedState::new(
            map.upper_basis().clone(),
            spectral_map(current.state.matrix(), |x| x.max(floor)),
        )?;
        current = transpose_exact(&clipped, target, map)?;
        iterations += 1;
    }
    let converged = current.provenance.min_eigenvalue >= -opts.tol;
    Ok(PsdRepair { estimate: current, iterations, converged })
}

/// Stacks `states` into an ensemble of trajectory snapshots and attaches features.
pub fn snapshot_ensemble(sector: &FockSector, states: Vec<CVec>, maps: &[&TransferMap]) -> Result<PureEnsemble> {
    let mut e = PureEnsemble::from_states(sector, states, EnsembleKind::Snapshot, 0)?;
    for m in maps {
        e.attach(m)?;
    }
    Ok(e)
}

/// Convenience: projected order-`N` state of an equal-weight set of pure states.
pub fn equal_weight_state(basis: &Arc<crate::replica::SymmetricBasis>, states: &[CVec]) -> Result<ProjectedState> {
    let w = vec![1.0 / states.len() as f64; states.len()];
    ProjectedState::from_pure_states(basis.clone(), states, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{build_hopping_operator, build_number_operator, build_sector};
    use crate::linalg::{frobenius, trace};
    use crate::transfer::lift;

    #[test]
    fn haar_unitary_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = haar_unitary(5, &mut rng);
        assert!(frobenius(&(u.adjoint() * &u - CMat::identity(5, 5))) < 1e-12);
    }

    #[test]
    fn gaussian_states_obey_wick() {
        let s = build_sector(5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = haar_unitary(5, &mut rng);
        let phi = u.columns(0, 2).clone_owned();
        let psi = slater_state(&s, &phi).unwrap();
        assert!((psi.norm() - 1.0).abs() < 1e-12);
        // G_xy = <c†_x c_y> = sum_k conj(Φ_xk) Φ_yk
        let g = |x: usize, y: usize| -> C64 { (0..2).map(|k| phi[(x - 1, k)].conj() * phi[(y - 1, k)]).sum() };
        for x in 1..=5 {
            for y in 1..=5 {
                let op = build_hopping_operator(&s, x, y).unwrap();
                let val = psi.dotc(&(op.matrix() * &psi));
                assert!((val - g(x, y)).norm() < 1e-12, "({x},{y})");
            }
        }
        // <n_x n_y> = G_xx G_yy - |G_xy|^2 for x != y
        for x in 1..=5 {
            for y in (x + 1)..=5 {
                let nn = build_number_operator(&s, x).unwrap().matrix() * build_number_operator(&s, y).unwrap().matrix();
                let val = psi.dotc(&(nn * &psi)).re;
                let wick = (g(x, x) * g(y, y)).re - g(x, y).norm_sqr();
                assert!((val - wick).abs() < 1e-12);
            }
        }
    }

    fn small_setup(size: usize) -> (FockSector, TransferMap, PureEnsemble) {
        let s = build_sector(4, 2).unwrap();
        let map = TransferMap::build(&s, 2, 3).unwrap();
        let e = build_ensemble(&s, size, 11, &[&map]).unwrap();
        (s, map, e)
    }

    #[test]
    fn features_match_direct_projection() {
        let (_, map, e) = small_setup(20);
        let f = e.features(3).unwrap();
        assert_eq!(f.shape(), (441, 20));
        for k in [0, 7, 19] {
            let u = map.upper_basis().product_coefficients(&e.states()[k]);
            let direct = map.upper_coefficients(&outer(&u, &u));
            assert!((f.column(k) - direct).norm() < 1e-10);
        }
        // the identity coordinate is constant across members
        let first = f[(0, 0)];
        assert!(f.row(0).iter().all(|&x| (x - first).abs() < 1e-12));
        assert!((first - 1.0 / (56f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn planted_mixture_is_recovered() {
        let (_, map, e) = small_setup(1500);
        let planted: Vec<usize> = vec![4, 90, 321, 777, 1001, 1400];
        let w = [0.1, 0.25, 0.05, 0.3, 0.2, 0.1];
        let states: Vec<CVec> = planted.iter().map(|&k| e.states()[k].clone()).collect();
        let target = ProjectedState::from_pure_states(map.lower_basis().clone(), &states, &w).unwrap();
        let fit = fit_weights(&target, &e, &map).unwrap();
        assert!(fit.residual <= 1e-10, "residual {}", fit.residual);
        assert!((fit.weights.sum() - 1.0).abs() < 1e-12);
        assert!(fit.weights.iter().all(|&x| x >= 0.0));
        assert!(!fit.flagged);
    }

    #[test]
    fn stabilized_estimate_is_exact_on_lower_order() {
        let (s, map, e) = small_setup(1500);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let others: Vec<CVec> = (0..30).map(|_| sample_gaussian_state(&s, &mut rng)).collect();
        let target = equal_weight_state(map.lower_basis(), &others).unwrap();
        let st = stabilized_estimate(&target, &e, &map, None).unwrap();
        let back = map.reduction().reduce(st.estimate.state.matrix());
        assert!(frobenius(&(back - target.matrix())) < 1e-10);
        assert!((trace(st.estimate.state.matrix()).re - 1.0).abs() < 1e-10);
        assert!(st.min_eig_before >= -1e-12);
    }

    #[test]
    fn psd_repair_fixes_lift_only_estimate() {
        let s = build_sector(4, 2).unwrap();
        let map = TransferMap::build(&s, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // generic (non-Gaussian) states give a target with a strictly positive extension
        let states: Vec<CVec> = (0..30).map(|_| haar_unitary(6, &mut rng).column(0).clone_owned()).collect();
        let target = equal_weight_state(map.lower_basis(), &states).unwrap();
        let lifted = lift(&target, &map).unwrap();
        assert!(lifted.provenance.min_eigenvalue < -1e-3);
        let fixed = enforce_psd_nullspace(&lifted.state, &target, &map, &PsdOptions::default()).unwrap();
        assert!(fixed.converged);
        assert!(fixed.estimate.provenance.min_eigenvalue >= -1e-8);
        let back = map.reduction().reduce(fixed.estimate.state.matrix());
        assert!(frobenius(&(back - target.matrix())) < 1e-10);
        let moved = fixed.estimate.state.matrix() - lifted.state.matrix();
        assert!(frobenius(&(&moved - map.null_part(&moved))) < 1e-10);
    }

    #[test]
    fn ensemble_file_round_trip() {
        let (s, map, e) = small_setup(8);
        let dir = std::env::temp_dir().join(format!("rc-ens-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ens.bin");
        e.save(&path).unwrap();
        let mut back = PureEnsemble::load(&path, &s).unwrap();
        assert_eq!(back.states(), e.states());
        back.attach(&map).unwrap();
        assert!((back.features(3).unwrap() - e.features(3).unwrap()).norm() < 1e-14);
        assert!(matches!(PureEnsemble::load(&path, &build_sector(5, 2).unwrap()), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn seeds_are_reproducible() {
        let s = build_sector(4, 2).unwrap();
        let a = build_ensemble(&s, 5, 3, &[]).unwrap();
        let b = build_ensemble(&s, 5, 3, &[]).unwrap();
        let c = build_ensemble(&s, 5, 4, &[]).unwrap();
        assert_eq!(a.states(), b.states());
        assert_ne!(a.states(), c.states());
    }
}
