//! The two-replica master equation closed at order two.
//!
//! The averaged increment of `ρ_c ⊗ ρ_c` is
//! `L1 + L2 + γ sum_i {O1_i, {O2_i, ρ}} - 2γ sum_i {O1_i + O2_i, X_i} + 4γ Y`
//! with `X_i = Tr_3[O3_i ρ^(3)]` and `Y = sum_i Tr_34[O3_i O4_i ρ^(4)]`. The
//! closures differ only in how `X_i` and `Y` are obtained from `ρ^(2)`:
//!
//! - mean-field: `X_i = <O_i> ρ`, `Y = sum_i <O_i>² ρ`, plus `-4γ C ρ` with
//!   `C = sum_i (<O1_i O2_i> - <O_i>²)` so that the trace is conserved;
//! - ensemble: a fitted pure-state mixture at order four, transposed onto the
//!   exact order-two data, with the order-three state its reduction;
//! - trajectory hybrid: as ensemble, with the current states of a batch of
//!   trajectories integrated alongside as the mixture members.
//!
//! Exact closures commute with the partial trace at the generator level, so a
//! single-replica reduction of the run follows the Lindblad equation.

use std::sync::Arc;

use nalgebra::DVector;

use crate::dynamics::{
    advance_trajectories, lindblad_step, DensityTimeSeries, SeriesMeta, Stepper, TimeGrid, Trajectory,
    TrajectoryState,
};
use crate::ensemble::{mixture_state, snapshot_ensemble, stabilized_estimate, PureEnsemble};
use crate::error::{param, Error, Result};
use crate::fock::{FockSector, SectorOperator};
use crate::linalg::{frobenius, hermitize, min_eigenvalue, normalize_trace, zmul, CMat, CVec, RMat, C64};
use crate::replica::{ProjectedState, ReplicaReduction, SymmetricBasis};
use crate::transfer::{transpose_exact, TransferMap};

/// How the order-three and order-four moments are supplied.
#[derive(Debug, Clone)]
pub enum ClosureMode {
    MeanField,
    /// A fixed pure-state ensemble with features attached for `map` (2 -> 4).
    Ensemble { ensemble: Arc<PureEnsemble>, map: Arc<TransferMap> },
    /// `n_c` trajectories from `psi0`, advanced in lockstep with the master equation.
    TrajectoryHybrid { map: Arc<TransferMap>, psi0: CVec, n_c: usize, seed: u64 },
}

impl ClosureMode {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::MeanField => "meanfield",
            Self::Ensemble { .. } => "ensemble",
            Self::TrajectoryHybrid { .. } => "trajectory-hybrid",
        }
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self, Self::MeanField)
    }
}

/// Closure moments in order-two symmetric coordinates.
#[derive(Debug, Clone)]
pub struct ClosureTerms {
    /// `Tr_3[O3_i ρ^(3)]`, one per site.
    pub x: Vec<CMat>,
    /// `sum_i Tr_34[O3_i O4_i ρ^(4)]`.
    pub y: CMat,
    /// Trace compensation; zero for exact closures.
    pub cbar: f64,
}

/// Single-copy data and precomputed order-two generator pieces.
#[derive(Debug, Clone)]
pub struct ReplicaModel {
    sector: FockSector,
    gamma: f64,
    h: CMat,
    ops: Vec<SectorOperator>,
    diags: Vec<Vec<f64>>,
    basis2: Arc<SymmetricBasis>,
    red21: ReplicaReduction,
    h2: CMat,
    /// Elementwise factor of the closure-independent dissipative terms.
    dissipative: RMat,
    /// `o_i(x1) + o_i(x2)` on the order-two full index.
    sums: Vec<Vec<f64>>,
    /// `o_i(x1) o_i(x2)`.
    products: Vec<Vec<f64>>,
}

impl ReplicaModel {
    pub fn new(sector: &FockSector, h: &CMat, ops: &[SectorOperator], gamma: f64) -> Result<Self> {
        let d = sector.dim();
        if h.nrows() != d || !h.is_square() {
            return param("Hamiltonian does not match the sector");
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return param(format!("measurement rate must be non-negative, got {gamma}"));
        }
        let diags = ops
            .iter()
            .map(|o| {
                o.diagonal()
                    .filter(|g| g.len() == d)
                    .map(|g| g.to_vec())
                    .ok_or_else(|| Error::Parameter("monitored operators must be diagonal in the sector".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let basis1 = Arc::new(SymmetricBasis::new(d, 1)?);
        let basis2 = Arc::new(SymmetricBasis::new(d, 2)?);
        let red21 = ReplicaReduction::new(basis2.clone(), basis1)?;
        let n = d * d;
        let eye = CMat::identity(d, d);
        let h2 = h.kronecker(&eye) + eye.kronecker(h);
        let sums: Vec<Vec<f64>> = diags.iter().map(|o| (0..n).map(|x| o[x / d] + o[x % d]).collect()).collect();
        let products: Vec<Vec<f64>> = diags.iter().map(|o| (0..n).map(|x| o[x / d] * o[x % d]).collect()).collect();
        let mut dissipative = RMat::zeros(n, n);
        for o in &diags {
            let d2 = |x: usize| o[x / d] * o[x / d] + o[x % d] * o[x % d];
            for y in 0..n {
                for x in 0..n {
                    let (a1, b1, a2, b2) = (o[x / d], o[y / d], o[x % d], o[y % d]);
                    // single-replica dissipators plus the double anticommutator
                    dissipative[(x, y)] +=
                        gamma * (a1 * b1 + a2 * b2 - 0.5 * (d2(x) + d2(y)) + (a1 + b1) * (a2 + b2));
                }
            }
        }
        Ok(Self {
            sector: sector.clone(),
            gamma,
            h: h.clone(),
            ops: ops.to_vec(),
            diags,
            basis2,
            red21,
            h2,
            dissipative,
            sums,
            products,
        })
    }

    pub fn sector(&self) -> &FockSector {
        &self.sector
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn hamiltonian(&self) -> &CMat {
        &self.h
    }

    pub fn operators(&self) -> &[SectorOperator] {
        &self.ops
    }

    /// Site eigenvalues `o_i(k)` of the monitored operators.
    pub fn diagonals(&self) -> &[Vec<f64>] {
        &self.diags
    }

    pub fn basis(&self) -> &Arc<SymmetricBasis> {
        &self.basis2
    }

    /// Single-replica state `Tr_2 ρ^(2)`.
    pub fn reduced(&self, r2: &CMat) -> CMat {
        self.red21.reduce(r2)
    }

    /// `<O_i>` of the single-replica reduction.
    pub fn expectations(&self, r2: &CMat) -> Vec<f64> {
        let rho = self.reduced(r2);
        self.diags.iter().map(|o| o.iter().enumerate().map(|(k, v)| v * rho[(k, k)].re).sum()).collect()
    }

    /// `<O1_i O2_i>` in the order-two state.
    pub fn replica_products(&self, r2: &CMat) -> Vec<f64> {
        let b = &self.basis2;
        let diag: Vec<f64> = (0..b.full_dim())
            .map(|x| {
                let (c, v) = b.row(x);
                r2[(c, c)].re * v * v
            })
            .collect();
        self.products.iter().map(|p| p.iter().zip(&diag).map(|(a, b)| a * b).sum()).collect()
    }

    fn check(&self, r2: &CMat) -> Result<()> {
        if r2.nrows() != self.basis2.dim() || !r2.is_square() {
            return param(format!("order-two state must be {0}x{0}", self.basis2.dim()));
        }
        Ok(())
    }
}

/// Weights and reductions for evaluating exact closure moments.
#[derive(Debug, Clone)]
pub struct ClosureKernel {
    red32: ReplicaReduction,
    red43: ReplicaReduction,
    red42: ReplicaReduction,
    site_weights: Vec<Vec<f64>>,
    pair_weights: Vec<f64>,
}

impl ClosureKernel {
    pub fn new(model: &ReplicaModel, basis3: Arc<SymmetricBasis>, basis4: Arc<SymmetricBasis>) -> Result<Self> {
        let d = model.sector.dim();
        if basis3.order() != 3 || basis4.order() != 4 || basis3.site_dim() != d || basis4.site_dim() != d {
            return param("closure kernel needs order-3 and order-4 bases of the model's sector");
        }
        let red32 = ReplicaReduction::new(basis3.clone(), model.basis2.clone())?;
        let red43 = ReplicaReduction::new(basis4.clone(), basis3)?;
        let red42 = ReplicaReduction::new(basis4, model.basis2.clone())?;
        // traced labels b = c d + e run over (replica 3, replica 4)
        let pair_weights =
            (0..d * d).map(|b| model.diags.iter().map(|o| o[b / d] * o[b % d]).sum()).collect();
        Ok(Self { red32, red43, red42, site_weights: model.diags.clone(), pair_weights })
    }

    pub fn from_map(model: &ReplicaModel, map: &TransferMap) -> Result<Self> {
        if map.lower() != 2 || map.upper() != 4 {
            return param("closure needs a 2 -> 4 transfer map");
        }
        let basis3 = Arc::new(SymmetricBasis::new(model.sector.dim(), 3)?);
        Self::new(model, basis3, map.upper_basis().clone())
    }

    /// Order-three state implied by an order-four state.
    pub fn reduce_four(&self, r4: &CMat) -> CMat {
        self.red43.reduce(r4)
    }

    pub fn basis3(&self) -> &Arc<SymmetricBasis> {
        self.red43.to_basis()
    }
}

/// Moments from order-three and order-four states. Fails when `r4` does not
/// reduce to `r3` within `1e-8` (relative).
pub fn closure_terms_exact(r3: &ProjectedState, r4: &ProjectedState, kernel: &ClosureKernel) -> Result<ClosureTerms> {
    if r3.basis().dim() != kernel.red32.from_basis().dim() || r4.basis().dim() != kernel.red43.from_basis().dim() {
        return param("closure states do not match the kernel");
    }
    let mismatch = frobenius(&(kernel.red43.reduce(r4.matrix()) - r3.matrix()));
    if mismatch > 1e-8 * frobenius(r3.matrix()).max(1.0) {
        return Err(Error::Validation(format!("order-four state does not reduce to order three ({mismatch:.3e})")));
    }
    Ok(closure_from_four(r3.matrix(), r4.matrix(), kernel))
}

fn closure_from_four(r3: &CMat, r4: &CMat, kernel: &ClosureKernel) -> ClosureTerms {
    let x = kernel.site_weights.iter().map(|w| kernel.red32.reduce_weighted(r3, w)).collect();
    let y = kernel.red42.reduce_weighted(r4, &kernel.pair_weights);
    ClosureTerms { x, y, cbar: 0.0 }
}

/// Mean-field moments, made trace preserving by the `C` compensation.
pub fn closure_terms_meanfield(r2: &ProjectedState, model: &ReplicaModel) -> Result<ClosureTerms> {
    model.check(r2.matrix())?;
    Ok(meanfield_terms(r2.matrix(), model))
}

fn meanfield_terms(r2: &CMat, model: &ReplicaModel) -> ClosureTerms {
    let mean = model.expectations(r2);
    let pair = model.replica_products(r2);
    let x = mean.iter().map(|&m| r2 * C64::new(m, 0.0)).collect();
    let sq: f64 = mean.iter().map(|m| m * m).sum();
    let cbar = pair.iter().sum::<f64>() - sq;
    ClosureTerms { x, y: r2 * C64::new(sq, 0.0), cbar }
}

/// Time derivative of the order-two state for given closure moments.
pub fn replica_rhs(r2: &ProjectedState, model: &ReplicaModel, terms: &ClosureTerms) -> Result<CMat> {
    model.check(r2.matrix())?;
    if terms.x.len() != model.diags.len() {
        return param("closure terms do not match the monitored operators");
    }
    Ok(rhs(r2.matrix(), model, terms))
}

fn rhs(r2: &CMat, model: &ReplicaModel, terms: &ClosureTerms) -> CMat {
    let b = &model.basis2;
    let g = model.gamma;
    let rho = b.embed(r2);
    let comm = (zmul(&model.h2, &rho) - zmul(&rho, &model.h2)) * C64::new(0.0, -1.0);
    let xs: Vec<CMat> = terms.x.iter().map(|x| b.embed(x)).collect();
    let y = b.embed(&terms.y);
    let n = rho.nrows();
    let out = CMat::from_fn(n, n, |i, j| {
        let mut v = comm[(i, j)] + rho[(i, j)] * (model.dissipative[(i, j)] - 4.0 * g * terms.cbar);
        for (s, x) in model.sums.iter().zip(&xs) {
            v -= x[(i, j)] * (2.0 * g * (s[i] + s[j]));
        }
        v + y[(i, j)] * (4.0 * g)
    });
    b.project(&out)
}

#[derive(Debug, Clone, Copy)]
pub struct EvolveOptions {
    pub grid: TimeGrid,
    pub stepper: Stepper,
    /// Steps between weight refits in ensemble mode; reused weights are
    /// still transposed onto the current state.
    pub refit_stride: usize,
    /// Steps between reduction checks against the Lindblad run.
    pub validate_every: usize,
    pub validation_tol: f64,
    pub abort_on_failure: bool,
}

impl EvolveOptions {
    pub fn new(grid: TimeGrid) -> Self {
        Self {
            grid,
            stepper: Stepper::Euler,
            refit_stride: 1,
            validate_every: 100,
            validation_tol: 1e-6,
            abort_on_failure: false,
        }
    }
}

/// Diagnostics at an output time. Closure-specific fields are NaN in
/// mean-field mode.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub time: f64,
    pub min_eig3: f64,
    pub min_eig4: f64,
    /// Smallest eigenvalue of the order-four mixture before transposition.
    pub min_eig4_before: f64,
    /// `|Tr_2 ρ^(2) - ρ_Lindblad|_F`.
    pub reduction_residual: f64,
    pub fit_residual: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct ReplicaRun {
    /// Order-two states in symmetric coordinates at the output times.
    pub series: DensityTimeSeries,
    pub basis: Arc<SymmetricBasis>,
    /// Lindblad states integrated in lockstep.
    pub lindblad: Vec<CMat>,
    pub records: Vec<StepRecord>,
    /// `(time, residual)` of failed reduction checks.
    pub validation_failures: Vec<(f64, f64)>,
    /// Hybrid mode: the lockstep trajectories at the output times.
    pub trajectories: Option<Vec<Trajectory>>,
}

struct ExactClosure<'a> {
    map: &'a TransferMap,
    kernel: ClosureKernel,
    warm: Option<Vec<usize>>,
    weights: Option<DVector<f64>>,
    since_fit: usize,
    refit_stride: usize,
}

struct Evaluation {
    terms: ClosureTerms,
    min_eig3: f64,
    min_eig4: f64,
    min_eig4_before: f64,
    fit_residual: f64,
    flagged: bool,
}

impl ExactClosure<'_> {
    fn evaluate(&mut self, r2: &ProjectedState, ensemble: &PureEnsemble, fresh: bool, diagnose: bool) -> Result<Evaluation> {
        let (r4, before, fit_residual, flagged) = match (&self.weights, fresh || self.since_fit >= self.refit_stride) {
            (Some(w), false) => {
                self.since_fit += 1;
                let mixture = mixture_state(ensemble, w, self.map)?;
                let before = if diagnose { min_eigenvalue(mixture.matrix()) } else { f64::NAN };
                (transpose_exact(&mixture, r2, self.map)?, before, f64::NAN, false)
            }
            _ => {
                let st = stabilized_estimate(r2, ensemble, self.map, self.warm.as_deref())?;
                self.warm = Some(st.fit.active.clone());
                self.weights = Some(st.fit.weights.clone());
                self.since_fit = 1;
                (st.estimate, st.min_eig_before, st.fit.residual, st.fit.flagged)
            }
        };
        let r4m = r4.state.matrix();
        let r3 = self.kernel.reduce_four(r4m);
        let min_eig3 = if diagnose { min_eigenvalue(&r3) } else { f64::NAN };
        Ok(Evaluation {
            terms: closure_from_four(&r3, r4m, &self.kernel),
            min_eig3,
            min_eig4: r4.provenance.min_eigenvalue,
            min_eig4_before: before,
            fit_residual,
            flagged,
        })
    }
}

/// Integrates the order-two master equation from `r0`.
pub fn evolve_replica(
    r0: &ProjectedState,
    mode: &ClosureMode,
    model: &ReplicaModel,
    opts: &EvolveOptions,
) -> Result<ReplicaRun> {
    model.check(r0.matrix())?;
    if opts.refit_stride == 0 || opts.validate_every == 0 {
        return param("refit stride and validation cadence must be positive");
    }
    let grid = opts.grid;
    let dt = grid.dt;
    let mut closure = match mode {
        ClosureMode::MeanField => None,
        ClosureMode::Ensemble { map, .. } | ClosureMode::TrajectoryHybrid { map, .. } => Some(ExactClosure {
            map,
            kernel: ClosureKernel::from_map(model, map)?,
            warm: None,
            weights: None,
            since_fit: 0,
            refit_stride: opts.refit_stride,
        }),
    };
    let mut batch = match mode {
        ClosureMode::TrajectoryHybrid { psi0, n_c, seed, map } => {
            if *n_c == 0 {
                return param("hybrid mode needs at least one trajectory");
            }
            if psi0.len() != model.sector.dim() || (psi0.norm() - 1.0).abs() > 1e-10 {
                return param("hybrid initial state must be a normalized sector state");
            }
            let product = ProjectedState::from_pure_states(model.basis2.clone(), std::slice::from_ref(psi0), &[1.0])?;
            if frobenius(&(product.matrix() - r0.matrix())) > 1e-10 {
                return param("hybrid mode must start from the product of its trajectory state");
            }
            if map.lower_basis().dim() != model.basis2.dim() {
                return param("transfer map does not match the model sector");
            }
            let states: Vec<TrajectoryState> =
                (0..*n_c).map(|c| TrajectoryState::new(psi0.clone(), *seed, c as u64)).collect();
            Some(states)
        }
        _ => None,
    };
    let mut recorded: Option<Vec<Trajectory>> = batch.as_ref().map(|b| {
        b.iter().map(|s| Trajectory { times: Vec::new(), states: Vec::new() }.with(0.0, &s.psi)).collect()
    });

    let mut r = r0.matrix().clone();
    let mut rho1 = model.reduced(&r);
    let mut times = vec![0.0];
    let mut states = vec![r.clone()];
    let mut lindblad = vec![rho1.clone()];
    let mut records = Vec::new();
    let mut failures = Vec::new();

    for step in 0..grid.steps {
        let diagnose = grid.is_output(step);
        let members = match &batch {
            Some(b) => Some(snapshot_ensemble(
                &model.sector,
                b.iter().map(|s| s.psi.clone()).collect(),
                &[closure.as_ref().expect("hybrid mode has a closure").map],
            )?),
            None => None,
        };
        let ensemble: Option<&PureEnsemble> = match (mode, &members) {
            (ClosureMode::Ensemble { ensemble, .. }, _) => Some(ensemble),
            (_, Some(m)) => Some(m),
            _ => None,
        };
        let fresh = members.is_some();
        let mut first: Option<Evaluation> = None;
        let mut stage = |x: &CMat, is_first: bool| -> Result<CMat> {
            let terms = match (&mut closure, ensemble) {
                (Some(c), Some(e)) => {
                    let state = ProjectedState::new(model.basis2.clone(), x.clone())?;
                    let ev = c.evaluate(&state, e, fresh || !is_first, is_first && diagnose)?;
                    let t = ev.terms.clone();
                    if is_first {
                        first = Some(ev);
                    }
                    t
                }
                _ => meanfield_terms(x, model),
            };
            Ok(rhs(x, model, &terms))
        };
        let c = |v: f64| C64::new(v, 0.0);
        let mut next = match opts.stepper {
            Stepper::Euler => &r + stage(&r, true)? * c(dt),
            Stepper::Rk4 => {
                let k1 = stage(&r, true)?;
                let k2 = stage(&(&r + &k1 * c(dt / 2.0)), false)?;
                let k3 = stage(&(&r + &k2 * c(dt / 2.0)), false)?;
                let k4 = stage(&(&r + &k3 * c(dt)), false)?;
                &r + (k1 + (k2 + k3) * c(2.0) + k4) * c(dt / 6.0)
            }
        };
        if diagnose {
            let residual = frobenius(&(model.reduced(&r) - &rho1));
            let rec = match &first {
                Some(ev) => StepRecord {
                    time: grid.time(step),
                    min_eig3: ev.min_eig3,
                    min_eig4: ev.min_eig4,
                    min_eig4_before: ev.min_eig4_before,
                    reduction_residual: residual,
                    fit_residual: ev.fit_residual,
                    flagged: ev.flagged,
                },
                None => StepRecord {
                    time: grid.time(step),
                    min_eig3: f64::NAN,
                    min_eig4: f64::NAN,
                    min_eig4_before: f64::NAN,
                    reduction_residual: residual,
                    fit_residual: f64::NAN,
                    flagged: false,
                },
            };
            records.push(rec);
        }
        hermitize(&mut next);
        normalize_trace(&mut next);
        r = next;
        rho1 = lindblad_step(&rho1, &model.h, &model.ops, model.gamma, dt, opts.stepper)?;
        if let Some(b) = batch.as_mut() {
            advance_trajectories(b, &model.h, &model.ops, model.gamma, dt)?;
        }
        let k = step + 1;
        if mode.is_exact() && k % opts.validate_every == 0 {
            let residual = frobenius(&(model.reduced(&r) - &rho1));
            if residual > opts.validation_tol {
                failures.push((grid.time(k), residual));
                if opts.abort_on_failure {
                    return Err(Error::Validation(format!(
                        "reduction residual {residual:.3e} at t = {} exceeds {:.1e}",
                        grid.time(k),
                        opts.validation_tol
                    )));
                }
            }
        }
        if grid.is_output(k) {
            times.push(grid.time(k));
            states.push(r.clone());
            lindblad.push(rho1.clone());
            if let (Some(rec), Some(b)) = (recorded.as_mut(), batch.as_ref()) {
                for (t, s) in rec.iter_mut().zip(b) {
                    t.times.push(grid.time(k));
                    t.states.push(s.psi.clone());
                }
            }
        }
    }
    // diagnostics at the final output time use the final state
    if grid.is_output(grid.steps) {
        let final_record = final_diagnostics(&r, &rho1, mode, model, closure.as_mut(), batch.as_deref(), grid.time(grid.steps))?;
        records.push(final_record);
    }
    let seed = match mode {
        ClosureMode::Ensemble { ensemble, .. } => Some(ensemble.seed()),
        ClosureMode::TrajectoryHybrid { seed, .. } => Some(*seed),
        ClosureMode::MeanField => None,
    };
    Ok(ReplicaRun {
        series: DensityTimeSeries {
            times,
            states,
            meta: SeriesMeta {
                mode: format!("replica-{}", mode.tag()),
                gamma: model.gamma,
                interaction: None,
                dt,
                stepper: opts.stepper,
                seed,
            },
        },
        basis: model.basis2.clone(),
        lindblad,
        records,
        validation_failures: failures,
        trajectories: recorded,
    })
}

fn final_diagnostics(
    r: &CMat,
    rho1: &CMat,
    mode: &ClosureMode,
    model: &ReplicaModel,
    closure: Option<&mut ExactClosure<'_>>,
    batch: Option<&[TrajectoryState]>,
    time: f64,
) -> Result<StepRecord> {
    let reduction_residual = frobenius(&(model.reduced(r) - rho1));
    let nan = StepRecord {
        time,
        min_eig3: f64::NAN,
        min_eig4: f64::NAN,
        min_eig4_before: f64::NAN,
        reduction_residual,
        fit_residual: f64::NAN,
        flagged: false,
    };
    let Some(c) = closure else { return Ok(nan) };
    let state = ProjectedState::new(model.basis2.clone(), r.clone())?;
    let ev = match (mode, batch) {
        (ClosureMode::Ensemble { ensemble, .. }, _) => c.evaluate(&state, ensemble, false, true)?,
        (_, Some(b)) => {
            let e = snapshot_ensemble(&model.sector, b.iter().map(|s| s.psi.clone()).collect(), &[c.map])?;
            c.evaluate(&state, &e, true, true)?
        }
        _ => return Ok(nan),
    };
    Ok(StepRecord {
        min_eig3: ev.min_eig3,
        min_eig4: ev.min_eig4,
        min_eig4_before: ev.min_eig4_before,
        fit_residual: ev.fit_residual,
        flagged: ev.flagged,
        ..nan
    })
}

impl Trajectory {
    fn with(mut self, t: f64, psi: &CVec) -> Self {
        self.times.push(t);
        self.states.push(psi.clone());
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{lindblad_rhs, trajectory_replica_average};
    use crate::fock::{build_hamiltonian, build_sector, measurement_operators, Boundary};
    use crate::linalg::{kron, outer, trace};
    use crate::replica::project_state;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(l: usize, n: usize, gamma: f64) -> ReplicaModel {
        let s = build_sector(l, n).unwrap();
        let h = build_hamiltonian(&s, 0.4, Boundary::Open).matrix().clone();
        ReplicaModel::new(&s, &h, &measurement_operators(&s), gamma).unwrap()
    }

    fn random_states(d: usize, count: usize, seed: u64) -> Vec<CVec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| CVec::from_fn(d, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).normalize())
            .collect()
    }

    fn projected(states: &[CVec], order: usize) -> ProjectedState {
        let d = states[0].len();
        let b = Arc::new(SymmetricBasis::new(d, order).unwrap());
        let w = vec![1.0 / states.len() as f64; states.len()];
        ProjectedState::from_pure_states(b, states, &w).unwrap()
    }

    fn kernel(m: &ReplicaModel) -> ClosureKernel {
        let d = m.sector().dim();
        ClosureKernel::new(m, Arc::new(SymmetricBasis::new(d, 3).unwrap()), Arc::new(SymmetricBasis::new(d, 4).unwrap()))
            .unwrap()
    }

    #[test]
    fn product_state_closure_factorizes() {
        let m = model(4, 2, 0.5);
        let psi = random_states(6, 1, 1);
        let k = kernel(&m);
        let t = closure_terms_exact(&projected(&psi, 3), &projected(&psi, 4), &k).unwrap();
        let r2 = projected(&psi, 2);
        let mean = m.expectations(r2.matrix());
        for (x, o) in t.x.iter().zip(&mean) {
            assert!(frobenius(&(x - r2.matrix() * C64::new(*o, 0.0))) < 1e-12);
        }
        let mf = closure_terms_meanfield(&r2, &m).unwrap();
        assert!(mf.cbar.abs() < 1e-12);
        assert!(frobenius(&(mf.y - &t.y)) < 1e-12);
    }

    #[test]
    fn closure_rejects_inconsistent_orders() {
        let m = model(3, 1, 0.5);
        let k = kernel(&m);
        let a = random_states(3, 2, 2);
        let b = random_states(3, 2, 3);
        assert!(matches!(closure_terms_exact(&projected(&a, 3), &projected(&b, 4), &k), Err(Error::Validation(_))));
    }

    #[test]
    fn rhs_is_traceless_for_both_closures() {
        let m = model(4, 2, 0.7);
        let k = kernel(&m);
        let states = random_states(6, 7, 4);
        let (r2, r3, r4) = (projected(&states, 2), projected(&states, 3), projected(&states, 4));
        let exact = replica_rhs(&r2, &m, &closure_terms_exact(&r3, &r4, &k).unwrap()).unwrap();
        let mf = replica_rhs(&r2, &m, &closure_terms_meanfield(&r2, &m).unwrap()).unwrap();
        assert!(trace(&exact).norm() < 1e-12);
        assert!(trace(&mf).norm() < 1e-12);
    }

    #[test]
    fn exact_closure_reduces_to_lindblad() {
        let m = model(4, 2, 0.5);
        let k = kernel(&m);
        let states = random_states(6, 5, 5);
        let (r2, r3, r4) = (projected(&states, 2), projected(&states, 3), projected(&states, 4));
        let d2 = replica_rhs(&r2, &m, &closure_terms_exact(&r3, &r4, &k).unwrap()).unwrap();
        let rho = m.reduced(r2.matrix());
        let want = lindblad_rhs(&rho, m.hamiltonian(), m.operators(), m.gamma()).unwrap();
        assert!(frobenius(&(m.reduced(&d2) - want)) < 1e-10);

        let mf = replica_rhs(&r2, &m, &closure_terms_meanfield(&r2, &m).unwrap()).unwrap();
        let want = lindblad_rhs(&rho, m.hamiltonian(), m.operators(), m.gamma()).unwrap();
        assert!(frobenius(&(m.reduced(&mf) - want)) > 1e-4);
    }

    #[test]
    fn exact_rhs_matches_ito_expansion() {
        // E[d(ρ⊗ρ)]/dt = L(ρ)⊗ρ + ρ⊗L(ρ) + γ sum_i {M_i, ρ}⊗{M_i, ρ}, M_i = O_i - <O_i>
        let m = model(4, 2, 0.6);
        let k = kernel(&m);
        let states = random_states(6, 9, 6);
        let (r2, r3, r4) = (projected(&states, 2), projected(&states, 3), projected(&states, 4));
        let got = m.basis().embed(&replica_rhs(&r2, &m, &closure_terms_exact(&r3, &r4, &k).unwrap()).unwrap());
        let mut want = CMat::zeros(36, 36);
        for psi in &states {
            let rho = outer(psi, psi);
            let l = lindblad_rhs(&rho, m.hamiltonian(), m.operators(), m.gamma()).unwrap();
            want += kron(&l, &rho) + kron(&rho, &l);
            for op in m.operators() {
                let o = op.matrix();
                let mean = trace(&(o * &rho)).re;
                let mm = o - CMat::identity(6, 6) * C64::new(mean, 0.0);
                let b = &mm * &rho + &rho * &mm;
                want += kron(&b, &b) * C64::new(m.gamma(), 0.0);
            }
        }
        want /= C64::new(states.len() as f64, 0.0);
        assert!(frobenius(&(got - want)) < 1e-10);
    }

    #[test]
    fn single_trajectory_meanfield_is_exact() {
        let m = model(4, 2, 0.5);
        let k = kernel(&m);
        let psi = random_states(6, 1, 7);
        let (r2, r3, r4) = (projected(&psi, 2), projected(&psi, 3), projected(&psi, 4));
        let a = replica_rhs(&r2, &m, &closure_terms_exact(&r3, &r4, &k).unwrap()).unwrap();
        let b = replica_rhs(&r2, &m, &closure_terms_meanfield(&r2, &m).unwrap()).unwrap();
        assert!(frobenius(&(a - b)) < 1e-12);
    }

    #[test]
    fn trajectory_oracle_for_x() {
        let m = model(3, 1, 0.5);
        let k = kernel(&m);
        let states = random_states(3, 20, 8);
        let t = closure_terms_exact(&projected(&states, 3), &projected(&states, 4), &k).unwrap();
        let b2 = m.basis().clone();
        for (i, op) in m.operators().iter().enumerate() {
            let w: Vec<f64> = states.iter().map(|s| s.dotc(&(op.matrix() * s)).re / states.len() as f64).collect();
            let direct = ProjectedState::from_pure_states(b2.clone(), &states, &w).unwrap();
            assert!(frobenius(&(direct.matrix() - &t.x[i])) < 1e-12);
        }
        let full = trajectory_replica_average(&states, 2).unwrap();
        assert!(project_state(&full, &b2).is_ok());
    }

    #[test]
    fn unitary_run_keeps_purity() {
        let m = model(3, 1, 0.0);
        let psi = random_states(3, 1, 9);
        let r0 = projected(&psi, 2);
        let mut opts = EvolveOptions::new(TimeGrid::new(1.0, 0.01, 10).unwrap());
        opts.stepper = Stepper::Rk4;
        let run = evolve_replica(&r0, &ClosureMode::MeanField, &m, &opts).unwrap();
        for r in &run.series.states {
            let rho = m.reduced(r);
            let p = trace(&(&rho * &rho)).re;
            assert!((p - 1.0).abs() < 1e-8, "{p}");
        }
    }

    #[test]
    fn ensemble_run_tracks_lindblad() {
        let s = build_sector(3, 1).unwrap();
        let h = build_hamiltonian(&s, 0.4, Boundary::Open).matrix().clone();
        let m = ReplicaModel::new(&s, &h, &measurement_operators(&s), 0.5).unwrap();
        let map = Arc::new(TransferMap::build(&s, 2, 4).unwrap());
        let ens = Arc::new(crate::ensemble::build_ensemble(&s, 200, 3, &[&*map]).unwrap());
        let psi = s.basis_vector(0);
        let r0 = projected(&[psi], 2);
        let mut opts = EvolveOptions::new(TimeGrid::new(1.0, 0.01, 10).unwrap());
        opts.validate_every = 10;
        let run = evolve_replica(&r0, &ClosureMode::Ensemble { ensemble: ens, map }, &m, &opts).unwrap();
        assert_eq!(run.series.states.len(), 11);
        assert_eq!(run.records.len(), 11);
        assert!(run.validation_failures.is_empty());
        assert!(run.records.iter().all(|r| r.reduction_residual < 1e-10));
        for r in &run.series.states {
            assert!((trace(r).re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hybrid_run_is_deterministic() {
        let s = build_sector(3, 1).unwrap();
        let h = build_hamiltonian(&s, 0.0, Boundary::Open).matrix().clone();
        let m = ReplicaModel::new(&s, &h, &measurement_operators(&s), 0.3).unwrap();
        let map = Arc::new(TransferMap::build(&s, 2, 4).unwrap());
        let psi = s.basis_vector(1);
        let r0 = projected(std::slice::from_ref(&psi), 2);
        let mode = ClosureMode::TrajectoryHybrid { map, psi0: psi, n_c: 30, seed: 11 };
        let opts = EvolveOptions::new(TimeGrid::new(0.2, 0.01, 5).unwrap());
        let a = evolve_replica(&r0, &mode, &m, &opts).unwrap();
        let b = evolve_replica(&r0, &mode, &m, &opts).unwrap();
        assert_eq!(a.series.states, b.series.states);
        assert!(a.records.iter().all(|r| r.reduction_residual < 1e-10));
        let tr = a.trajectories.unwrap();
        assert_eq!(tr.len(), 30);
        assert_eq!(tr[0].states.len(), a.series.times.len());
    }

    #[test]
    fn meanfield_run_departs_from_lindblad() {
        let m = model(4, 2, 0.5);
        let s = m.sector().clone();
        let r0 = projected(&[s.basis_vector(s.parse_label("1010").unwrap())], 2);
        let opts = EvolveOptions::new(TimeGrid::new(2.0, 0.01, 50).unwrap());
        let run = evolve_replica(&r0, &ClosureMode::MeanField, &m, &opts).unwrap();
        let worst = run.records.iter().map(|r| r.reduction_residual).fold(0.0, f64::max);
        assert!(worst > 1e-4, "{worst}");
        assert!(run.validation_failures.is_empty());
    }

    #[test]
    fn rejects_non_diagonal_monitors() {
        let s = build_sector(3, 1).unwrap();
        let h = build_hamiltonian(&s, 0.0, Boundary::Open);
        assert!(ReplicaModel::new(&s, h.matrix(), std::slice::from_ref(&h), 0.5).is_err());
    }
}
