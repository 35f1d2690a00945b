//! Single-copy dynamics: the averaged Lindblad evolution and stochastic
//! Schrödinger trajectories of continuously monitored fermions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{param, Error, Result};
use crate::fock::SectorOperator;
use crate::linalg::{frobenius, hermiticity_residual, hermitize, normalize_trace, zmul, CMat, CVec, C64};
use crate::replica::ReplicaState;

const MINUS_I: C64 = C64::new(0.0, -1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stepper {
    Euler,
    #[default]
    Rk4,
}

impl std::str::FromStr for Stepper {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euler" => Ok(Self::Euler),
            "rk4" => Ok(Self::Rk4),
            other => param(format!("unknown stepper {other:?}")),
        }
    }
}

impl std::fmt::Display for Stepper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::Rk4 => "rk4",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMeta {
    pub mode: String,
    pub gamma: f64,
    pub interaction: Option<f64>,
    pub dt: f64,
    pub stepper: Stepper,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct DensityTimeSeries {
    pub times: Vec<f64>,
    pub states: Vec<CMat>,
    pub meta: SeriesMeta,
}

/// Time grid shared by all integrators.
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
    pub stride: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, dt: f64, stride: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return param(format!("dt must be positive, got {dt}"));
        }
        if !(t_final >= dt) || !t_final.is_finite() {
            return param(format!("final time {t_final} must be at least dt = {dt}"));
        }
        if stride == 0 {
            return param("output stride must be positive");
        }
        let steps = (t_final / dt).round() as usize;
        Ok(Self { dt, steps, stride })
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn is_output(&self, step: usize) -> bool {
        step.is_multiple_of(self.stride)
    }

    pub fn output_times(&self) -> Vec<f64> {
        (0..=self.steps).filter(|&k| self.is_output(k)).map(|k| self.time(k)).collect()
    }
}

/// Measurement operators in the form the integrators consume.
#[derive(Debug, Clone)]
pub(crate) enum Monitored {
    Diagonal(Vec<Vec<f64>>),
    Dense(Vec<CMat>),
}

impl Monitored {
    pub(crate) fn new(ops: &[SectorOperator], dim: usize) -> Result<Self> {
        if ops.iter().any(|o| o.dim() != dim) {
            return param("operator dimension does not match the state");
        }
        if ops.iter().all(|o| o.diagonal().is_some()) {
            Ok(Self::Diagonal(ops.iter().map(|o| o.diagonal().unwrap().to_vec()).collect()))
        } else {
            Ok(Self::Dense(ops.iter().map(|o| o.matrix().clone()).collect()))
        }
    }

    /// `sum_i (O_i ρ O_i - {O_i², ρ}/2)`
    fn dissipator(&self, rho: &CMat) -> CMat {
        match self {
            Self::Diagonal(diags) => {
                let n = rho.nrows();
                let mut f = vec![0.0; n * n];
                for o in diags {
                    for j in 0..n {
                        for i in 0..n {
                            f[j * n + i] += o[i] * o[j] - 0.5 * (o[i] * o[i] + o[j] * o[j]);
                        }
                    }
                }
                CMat::from_fn(n, n, |i, j| rho[(i, j)] * f[j * n + i])
            }
            Self::Dense(mats) => {
                let mut out = CMat::zeros(rho.nrows(), rho.ncols());
                for o in mats {
                    let o2 = o * o;
                    out += o * rho * o - (&o2 * rho + rho * &o2) * C64::new(0.5, 0.0);
                }
                out
            }
        }
    }
}

fn lindblad_rhs_inner(rho: &CMat, h: &CMat, mon: &Monitored, gamma: f64) -> CMat {
    let comm = zmul(h, rho) - zmul(rho, h);
    comm * MINUS_I + mon.dissipator(rho) * C64::new(gamma, 0.0)
}

/// `-i[H, ρ] + γ sum_i (O_i ρ O_i - {O_i², ρ}/2)`; with `O_i² = 1` the
/// anticommutator term is `-ρ`.
pub fn lindblad_rhs(rho: &CMat, h: &CMat, ops: &[SectorOperator], gamma: f64) -> Result<CMat> {
    check_density(rho, h)?;
    let mon = Monitored::new(ops, rho.nrows())?;
    Ok(lindblad_rhs_inner(rho, h, &mon, gamma))
}

fn check_density(rho: &CMat, h: &CMat) -> Result<()> {
    if rho.nrows() != h.nrows() || !rho.is_square() {
        return param("density matrix and Hamiltonian dimensions differ");
    }
    let scale = frobenius(rho).max(1.0);
    if hermiticity_residual(rho) > 1e-10 * scale {
        return param("density matrix is not Hermitian");
    }
    Ok(())
}

/// Generic explicit step followed by re-hermitization and trace renormalization.
pub(crate) fn explicit_step(rho: &CMat, dt: f64, stepper: Stepper, f: impl Fn(&CMat) -> CMat) -> CMat {
    let c = |x: f64| C64::new(x, 0.0);
    let mut next = match stepper {
        Stepper::Euler => rho + f(rho) * c(dt),
        Stepper::Rk4 => {
            let k1 = f(rho);
            let k2 = f(&(rho + &k1 * c(dt / 2.0)));
            let k3 = f(&(rho + &k2 * c(dt / 2.0)));
            let k4 = f(&(rho + &k3 * c(dt)));
            rho + (k1 + (k2 + k3) * c(2.0) + k4) * c(dt / 6.0)
        }
    };
    hermitize(&mut next);
    normalize_trace(&mut next);
    next
}

/// One Lindblad step with the given stepper.
pub fn lindblad_step(rho: &CMat, h: &CMat, ops: &[SectorOperator], gamma: f64, dt: f64, stepper: Stepper) -> Result<CMat> {
    check_density(rho, h)?;
    let mon = Monitored::new(ops, rho.nrows())?;
    Ok(explicit_step(rho, dt, stepper, |r| lindblad_rhs_inner(r, h, &mon, gamma)))
}

pub fn lindblad_evolve(
    rho0: &CMat,
    h: &CMat,
    ops: &[SectorOperator],
    gamma: f64,
    grid: TimeGrid,
    stepper: Stepper,
) -> Result<DensityTimeSeries> {
    check_density(rho0, h)?;
    let mon = Monitored::new(ops, rho0.nrows())?;
    let mut rho = rho0.clone();
    let mut times = vec![0.0];
    let mut states = vec![rho.clone()];
    for step in 1..=grid.steps {
        rho = explicit_step(&rho, grid.dt, stepper, |r| lindblad_rhs_inner(r, h, &mon, gamma));
        if grid.is_output(step) {
            times.push(grid.time(step));
            states.push(rho.clone());
        }
    }
    Ok(DensityTimeSeries {
        times,
        states,
        meta: SeriesMeta { mode: "lindblad".into(), gamma, interaction: None, dt: grid.dt, stepper, seed: None },
    })
}

#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub psi: CVec,
    pub time: f64,
    rng: ChaCha8Rng,
}

impl TrajectoryState {
    /// Independent streams of one seed give independent, reproducible noise.
    pub fn new(psi: CVec, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { psi, time: 0.0, rng }
    }
}

/// Euler-Maruyama step of
/// `dψ = -i dt (H - iγ/2 sum_i M_i²) ψ + sum_i dW_i M_i ψ`,
/// `M_i = O_i - <O_i>`, `dW_i ~ N(0, γ dt)`, followed by renormalization.
pub fn sse_step(state: &mut TrajectoryState, h: &CMat, ops: &[SectorOperator], gamma: f64, dt: f64) -> Result<()> {
    let mon = Monitored::new(ops, state.psi.len())?;
    sse_step_inner(state, h, &mon, gamma, dt);
    Ok(())
}

fn sse_step_inner(state: &mut TrajectoryState, h: &CMat, mon: &Monitored, gamma: f64, dt: f64) {
    let psi = &state.psi;
    let sigma = (gamma * dt).sqrt();
    let mut next = psi + (h * psi) * C64::new(0.0, -dt);
    match mon {
        Monitored::Diagonal(diags) => {
            for o in diags {
                let a: f64 = o.iter().zip(psi.iter()).map(|(x, z)| x * z.norm_sqr()).sum();
                let z: f64 = StandardNormal.sample(&mut state.rng);
                let dw = sigma * z;
                for k in 0..psi.len() {
                    let m = o[k] - a;
                    next[k] += psi[k] * (dw * m - 0.5 * gamma * dt * m * m);
                }
            }
        }
        Monitored::Dense(mats) => {
            for o in mats {
                let opsi = o * psi;
                let a = psi.dotc(&opsi).re;
                let mpsi = &opsi - psi * C64::new(a, 0.0);
                let m2psi = o * &mpsi - &mpsi * C64::new(a, 0.0);
                let z: f64 = StandardNormal.sample(&mut state.rng);
                let dw = sigma * z;
                next += mpsi * C64::new(dw, 0.0) - m2psi * C64::new(0.5 * gamma * dt, 0.0);
            }
        }
    }
    let norm = next.norm();
    state.psi = next / C64::new(norm, 0.0);
    state.time += dt;
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<CVec>,
}

/// Advances a batch of trajectories by one step in parallel.
pub fn advance_trajectories(states: &mut [TrajectoryState], h: &CMat, ops: &[SectorOperator], gamma: f64, dt: f64) -> Result<()> {
    let dim = states.first().map(|s| s.psi.len()).unwrap_or(h.nrows());
    let mon = Monitored::new(ops, dim)?;
    states.par_iter_mut().for_each(|s| sse_step_inner(s, h, &mon, gamma, dt));
    Ok(())
}

/// Runs `n_c` independent trajectories from `psi0`; trajectory `c` draws its
/// noise from stream `c` of `seed`, so results do not depend on thread count.
pub fn run_trajectories(
    psi0: &CVec,
    h: &CMat,
    ops: &[SectorOperator],
    gamma: f64,
    grid: TimeGrid,
    n_c: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_c == 0 {
        return param("need at least one trajectory");
    }
    if (psi0.norm() - 1.0).abs() > 1e-10 {
        return param("initial state is not normalized");
    }
    if h.nrows() != psi0.len() {
        return param("initial state and Hamiltonian dimensions differ");
    }
    let mon = Monitored::new(ops, psi0.len())?;
    Ok((0..n_c)
        .into_par_iter()
        .map(|c| {
            let mut st = TrajectoryState::new(psi0.clone(), seed, c as u64);
            let mut tr = Trajectory { times: vec![0.0], states: vec![psi0.clone()] };
            for step in 1..=grid.steps {
                sse_step_inner(&mut st, h, &mon, gamma, grid.dt);
                if grid.is_output(step) {
                    tr.times.push(grid.time(step));
                    tr.states.push(st.psi.clone());
                }
            }
            tr
        })
        .collect())
}

/// `(1/N_c) sum_c (ψ_c ψ_c†)^{⊗n}` on the full replica space.
pub fn trajectory_replica_average(states: &[CVec], order: usize) -> Result<ReplicaState> {
    if states.is_empty() {
        return param("no trajectory states to average");
    }
    let d = states[0].len();
    let full = d.pow(order as u32);
    let mut acc = CMat::zeros(full, full);
    for psi in states {
        let mut v = psi.clone();
        for _ in 1..order {
            v = v.kronecker(psi);
        }
        acc += &v * v.adjoint();
    }
    acc /= C64::new(states.len() as f64, 0.0);
    ReplicaState::new(order, d, acc)
}

/// States of every trajectory at output index `k`.
pub fn snapshot(trajectories: &[Trajectory], k: usize) -> Vec<CVec> {
    trajectories.iter().map(|t| t.states[k].clone()).collect()
}
