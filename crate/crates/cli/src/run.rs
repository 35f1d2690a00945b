//! Mode execution.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use replica_core::dynamics::{lindblad_evolve, run_trajectories, snapshot, TimeGrid};
use replica_core::ensemble::{build_ensemble, haar_unitary, PureEnsemble};
use replica_core::fock::{build_hamiltonian, build_sector, measurement_operators, FockSector};
use replica_core::linalg::{frobenius, outer, CMat, CVec};
use replica_core::master::{evolve_replica, ClosureMode, EvolveOptions, ReplicaModel, ReplicaRun};
use replica_core::nullspace::{
    catalog_null_operators, compute_null_space, embedded_table_errors, printed_table, table_mismatches, verify_catalog,
    ABBasis,
};
use replica_core::observables::{
    bootstrap_band, correlator_matrix, correlator_samples, densities, purity_average, purity_samples, Partition,
    BOOTSTRAP_RESAMPLES,
};
use replica_core::replica::{ProjectedState, ReplicaReduction, SymmetricBasis};
use replica_core::transfer::TransferMap;

use crate::config::{Mode, Observable, RunConfig};
use crate::output::{Manifest, Table};

/// Result of a run: the manifest is already written.
#[derive(Debug)]
pub struct Outcome {
    pub manifest: Manifest,
    /// Human-readable summary printed by the binary.
    pub summary: String,
}

impl Outcome {
    pub fn validation_failed(&self) -> bool {
        self.manifest.validation_failures > 0
    }
}

struct Setup {
    sector: FockSector,
    h: CMat,
    psi0: CVec,
    partition: Partition,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let sector = build_sector(cfg.sites, cfg.particles)?;
    let h = build_hamiltonian(&sector, cfg.interaction, cfg.boundary).matrix().clone();
    let psi0 = sector.basis_vector(sector.parse_label(&cfg.initial)?);
    let partition = Partition::new(cfg.sites, &cfg.partition)?;
    Ok(Setup { sector, h, psi0, partition })
}

fn transfer_map(cfg: &RunConfig, sector: &FockSector) -> Result<Arc<TransferMap>> {
    let map = match &cfg.cache_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(format!("map_L{}_n{}_2to4.bin", cfg.sites, cfg.particles));
            TransferMap::load_or_build(&path, sector, 2, 4)?
        }
        None => TransferMap::build(sector, 2, 4)?,
    };
    Ok(Arc::new(map))
}

fn ensemble(cfg: &RunConfig, sector: &FockSector, map: &TransferMap) -> Result<Arc<PureEnsemble>> {
    let e = match &cfg.ensemble_path {
        Some(p) if p.exists() => {
            let mut e = PureEnsemble::load(p, sector)?;
            e.attach(map)?;
            e
        }
        _ => build_ensemble(sector, cfg.ensemble_size, cfg.seed, &[map])?,
    };
    Ok(Arc::new(e))
}

fn csv_name(cfg: &RunConfig, gamma: f64) -> String {
    if cfg.gamma.len() == 1 {
        format!("{}.csv", cfg.mode)
    } else {
        format!("{}_gamma{gamma:?}.csv", cfg.mode)
    }
}

fn site_columns(cfg: &RunConfig) -> Vec<String> {
    let l = cfg.sites;
    let mut cols = Vec::new();
    if cfg.wants(Observable::Correlators) {
        for i in 1..=l {
            for j in 1..=l {
                cols.push(format!("C_{i}{j}"));
            }
        }
    }
    if cfg.wants(Observable::Densities) {
        cols.extend((1..=l).map(|i| format!("n_{i}")));
    }
    if cfg.wants(Observable::Purity) {
        cols.push("purity".into());
    }
    cols
}

/// Runs `cfg` and writes its outputs to `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = Manifest::new(cfg.resolved());
    let summary = match cfg.mode {
        Mode::NullspaceVerify => nullspace_verify(cfg, out, &mut manifest)?,
        Mode::EnsembleBuild => ensemble_build(cfg, out, &mut manifest)?,
        _ => dynamics(cfg, out, &mut manifest)?,
    };
    manifest.write(out)?;
    Ok(Outcome { manifest, summary })
}

fn dynamics(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<String> {
    let s = setup(cfg)?;
    let grid = TimeGrid::new(cfg.t_final, cfg.dt, cfg.output_stride)?;
    let (map, ens) = match cfg.mode {
        Mode::ReplicaEnsemble => {
            let map = transfer_map(cfg, &s.sector)?;
            let ens = ensemble(cfg, &s.sector, &map)?;
            manifest.seeds.push(("ensemble".into(), ens.seed()));
            (Some(map), Some(ens))
        }
        Mode::ReplicaHybrid => (Some(transfer_map(cfg, &s.sector)?), None),
        _ => (None, None),
    };
    if matches!(cfg.mode, Mode::Trajectories | Mode::ReplicaHybrid) {
        manifest.seeds.push(("trajectories".into(), cfg.seed));
    }
    let hash = manifest.hash();
    let results: Vec<(String, usize, Vec<String>)> = cfg
        .gamma
        .par_iter()
        .map(|&gamma| -> Result<_> {
            let (table, failures, notes) = match cfg.mode {
                Mode::Lindblad => (lindblad_table(cfg, &s, gamma, grid)?, 0, Vec::new()),
                Mode::Trajectories => (trajectory_table(cfg, &s, gamma, grid)?, 0, Vec::new()),
                _ => {
                    let closure = match cfg.mode {
                        Mode::ReplicaMeanField => ClosureMode::MeanField,
                        Mode::ReplicaEnsemble => ClosureMode::Ensemble {
                            ensemble: ens.clone().expect("ensemble mode builds an ensemble"),
                            map: map.clone().expect("ensemble mode builds a map"),
                        },
                        _ => ClosureMode::TrajectoryHybrid {
                            map: map.clone().expect("hybrid mode builds a map"),
                            psi0: s.psi0.clone(),
                            n_c: cfg.n_c,
                            seed: cfg.seed,
                        },
                    };
                    replica_table(cfg, &s, gamma, grid, &closure)?
                }
            };
            let name = csv_name(cfg, gamma);
            table.write(&out.join(&name), &hash)?;
            Ok((name, failures, notes))
        })
        .collect::<Result<_>>()?;
    let mut summary = String::new();
    for (name, failures, notes) in results {
        let _ = writeln!(summary, "wrote {name} ({failures} validation failures)");
        manifest.outputs.push(name);
        manifest.validation_failures += failures;
        manifest.notes.extend(notes);
    }
    Ok(summary)
}

fn lindblad_table(cfg: &RunConfig, s: &Setup, gamma: f64, grid: TimeGrid) -> Result<Table> {
    let ops = measurement_operators(&s.sector);
    let series = lindblad_evolve(&outer(&s.psi0, &s.psi0), &s.h, &ops, gamma, grid, cfg.stepper)?;
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=cfg.sites).map(|i| format!("n_{i}")));
    let mut table = Table::new(cols);
    for (t, rho) in series.times.iter().zip(&series.states) {
        let mut row = vec![*t];
        row.extend(densities(rho, &s.sector)?);
        table.push(row);
    }
    Ok(table)
}

fn trajectory_table(cfg: &RunConfig, s: &Setup, gamma: f64, grid: TimeGrid) -> Result<Table> {
    let ops = measurement_operators(&s.sector);
    let trajs = run_trajectories(&s.psi0, &s.h, &ops, gamma, grid, cfg.n_c, cfg.seed)?;
    let value_cols = site_columns(cfg);
    let with_renyi = cfg.wants(Observable::Purity);
    let mut cols = vec!["t".to_string()];
    cols.extend(value_cols.iter().cloned());
    if with_renyi {
        cols.push("renyi2".into());
    }
    cols.extend(value_cols.iter().map(|c| format!("sigma_{c}")));
    if with_renyi {
        cols.push("sigma_renyi2".into());
    }
    let times = &trajs[0].times;
    let rows: Vec<Vec<f64>> = (0..times.len())
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let states = snapshot(&trajs, k);
            let mut samples: Vec<Vec<f64>> = Vec::new();
            if cfg.wants(Observable::Correlators) {
                for i in 1..=cfg.sites {
                    for j in 1..=cfg.sites {
                        samples.push(correlator_samples(&states, &s.sector, i, j)?);
                    }
                }
            }
            if cfg.wants(Observable::Densities) {
                for i in 1..=cfg.sites {
                    samples.push(
                        states
                            .iter()
                            .map(|psi| (0..s.sector.dim()).filter(|&x| s.sector.is_occupied(x, i)).map(|x| psi[x].norm_sqr()).sum())
                            .collect(),
                    );
                }
            }
            if with_renyi {
                let p = purity_samples(&states, &s.sector, &s.partition)?;
                let neg_log: Vec<f64> = p.iter().map(|v| -v.ln()).collect();
                samples.push(p);
                samples.push(neg_log);
            }
            let bands = samples
                .iter()
                .enumerate()
                .map(|(c, x)| bootstrap_band(x, BOOTSTRAP_RESAMPLES, band_seed(cfg.seed, k, c)))
                .collect::<replica_core::Result<Vec<_>>>()?;
            let mut row = vec![times[k]];
            row.extend(bands.iter().map(|b| b.mean));
            row.extend(bands.iter().map(|b| b.sigma));
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(cols);
    for r in rows {
        table.push(r);
    }
    Ok(table)
}

fn band_seed(seed: u64, k: usize, c: usize) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul((k as u64) << 16 | (c as u64 + 1))
}

fn replica_table(
    cfg: &RunConfig,
    s: &Setup,
    gamma: f64,
    grid: TimeGrid,
    closure: &ClosureMode,
) -> Result<(Table, usize, Vec<String>)> {
    let ops = measurement_operators(&s.sector);
    let model = ReplicaModel::new(&s.sector, &s.h, &ops, gamma)?;
    let basis2 = Arc::new(SymmetricBasis::new(s.sector.dim(), 2)?);
    let r0 = ProjectedState::from_pure_states(basis2, std::slice::from_ref(&s.psi0), &[1.0])?;
    let mut opts = EvolveOptions::new(grid);
    opts.stepper = cfg.stepper;
    opts.refit_stride = cfg.refit_stride;
    opts.validate_every = cfg.validate_every;
    opts.validation_tol = cfg.validation_tol;
    let run = evolve_replica(&r0, closure, &model, &opts)?;
    let table = replica_rows(cfg, s, &run)?;
    let notes = run
        .validation_failures
        .iter()
        .map(|(t, r)| format!("gamma={gamma:?}: reduction residual {r:.3e} at t={t:.4}"))
        .collect();
    Ok((table, run.validation_failures.len(), notes))
}

fn replica_rows(cfg: &RunConfig, s: &Setup, run: &ReplicaRun) -> Result<Table> {
    let mut cols = vec!["t".to_string()];
    cols.extend(site_columns(cfg));
    let diagnostics = cfg.wants(Observable::Diagnostics);
    if diagnostics {
        cols.extend(["minEig3", "minEig4", "reductionResidual"].map(String::from));
    }
    let red21 = ReplicaReduction::new(run.basis.clone(), Arc::new(SymmetricBasis::new(s.sector.dim(), 1)?))?;
    let rows: Vec<Vec<f64>> = (0..run.series.times.len())
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let r2 = ProjectedState::new(run.basis.clone(), run.series.states[k].clone())?;
            let mut row = vec![run.series.times[k]];
            if cfg.wants(Observable::Correlators) {
                row.extend(correlator_matrix(&r2, &s.sector)?.into_iter().flatten());
            }
            if cfg.wants(Observable::Densities) {
                let rho = red21.reduce(r2.matrix());
                row.extend(densities(&rho, &s.sector)?);
            }
            if cfg.wants(Observable::Purity) {
                row.push(purity_average(&r2, &s.sector, &s.partition)?);
            }
            if diagnostics {
                let rec = &run.records[k];
                row.extend([rec.min_eig3, rec.min_eig4, rec.reduction_residual]);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(cols);
    for r in rows {
        table.push(r);
    }
    Ok(table)
}

fn nullspace_verify(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<String> {
    let mut report = String::new();
    let mut failures = 0;
    for (from, to) in [(2, 1), (3, 2), (4, 3), (3, 1)] {
        let ns = compute_null_space(from, to)?;
        let _ = writeln!(
            report,
            "null-space ({from},{to}): dim {} (symmetric {}, antisymmetric {})",
            ns.dim(),
            ns.symmetric,
            ns.antisymmetric
        );
    }
    for (from, to) in [(2, 1), (3, 2), (4, 3), (4, 2), (3, 1)] {
        for c in verify_catalog(from, to)? {
            let status = match (c.annihilated, c.trivial) {
                (true, true) => "PASS (identically zero)",
                (true, false) => "PASS",
                _ => {
                    failures += 1;
                    "FAIL"
                }
            };
            let _ = write!(report, "catalog {} [{from}->{to}]: {status}", c.name);
            if !c.annihilated {
                let _ = write!(report, "; image {}", c.image);
            }
            report.push('\n');
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    manifest.seeds.push(("embedding".into(), cfg.seed));
    let d = replica_core::replica::binomial(cfg.sites, cfg.particles).clamp(2, 8);
    let u = haar_unitary(d, &mut rng);
    let basis = ABBasis::new(u.column(0).into_owned(), u.column(1).into_owned())?;
    for (from, to) in [(2, 1), (3, 2), (4, 3), (4, 2)] {
        let mism = table_mismatches(from, to)?;
        let worst = embedded_table_errors(&printed_table(from, to)?, &basis)?
            .into_iter()
            .flatten()
            .fold(0.0, f64::max);
        let _ = writeln!(
            report,
            "table {from}->{to}: {} mismatched cells, worst embedded error {worst:.3e}",
            mism.len()
        );
        for m in &mism {
            let _ = writeln!(report, "  cell |{},{}><{},{}|: printed {}, computed {}", m.ket_a, from - m.ket_a, m.bra_a, from - m.bra_a, m.printed, m.computed);
        }
        failures += mism.len();
    }
    for (from, to) in [(2, 1), (3, 2), (4, 3), (4, 2), (3, 1)] {
        for e in catalog_null_operators(from, to)? {
            let img = basis.embedded_trace(&e.operator, from - to)?;
            let _ = writeln!(report, "embedded {} [{from}->{to}]: |Tr| = {:.3e}", e.name, frobenius(&img));
        }
    }
    let _ = writeln!(report, "failures: {failures}");
    fs::write(out.join("nullspace.txt"), &report)?;
    manifest.outputs.push("nullspace.txt".into());
    manifest.validation_failures = failures;
    Ok(report)
}

fn ensemble_build(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<String> {
    let sector = build_sector(cfg.sites, cfg.particles)?;
    let map = transfer_map(cfg, &sector)?;
    let ens = build_ensemble(&sector, cfg.ensemble_size, cfg.seed, &[&map])?;
    manifest.seeds.push(("ensemble".into(), cfg.seed));
    let path: PathBuf = cfg.ensemble_path.clone().unwrap_or_else(|| out.join("ensemble.bin"));
    ens.save(&path)?;
    manifest.outputs.push(path.display().to_string());
    Ok(format!("wrote {} members to {}\n", ens.len(), path.display()))
}
