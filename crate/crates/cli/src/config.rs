//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use replica_core::dynamics::Stepper;
use replica_core::fock::Boundary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Lindblad,
    Trajectories,
    ReplicaMeanField,
    ReplicaEnsemble,
    ReplicaHybrid,
    NullspaceVerify,
    EnsembleBuild,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Lindblad,
        Mode::Trajectories,
        Mode::ReplicaMeanField,
        Mode::ReplicaEnsemble,
        Mode::ReplicaHybrid,
        Mode::NullspaceVerify,
        Mode::EnsembleBuild,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Lindblad => "lindblad",
            Mode::Trajectories => "trajectories",
            Mode::ReplicaMeanField => "replica-meanfield",
            Mode::ReplicaEnsemble => "replica-ensemble",
            Mode::ReplicaHybrid => "replica-hybrid",
            Mode::NullspaceVerify => "nullspace-verify",
            Mode::EnsembleBuild => "ensemble-build",
        }
    }

    fn is_dynamic(self) -> bool {
        !matches!(self, Mode::NullspaceVerify | Mode::EnsembleBuild)
    }
}

impl FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| anyhow!("unknown mode {s:?}"))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Column groups written to the CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Observable {
    Correlators,
    Densities,
    Purity,
    Diagnostics,
}

impl Observable {
    const ALL: [Observable; 4] =
        [Observable::Correlators, Observable::Densities, Observable::Purity, Observable::Diagnostics];

    fn name(self) -> &'static str {
        match self {
            Observable::Correlators => "correlators",
            Observable::Densities => "densities",
            Observable::Purity => "purity",
            Observable::Diagnostics => "diagnostics",
        }
    }
}

impl FromStr for Observable {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Observable::ALL.into_iter().find(|o| o.name() == s).ok_or_else(|| anyhow!("unknown observable {s:?}"))
    }
}

const KEYS: [&str; 22] = [
    "mode",
    "L",
    "n_particles",
    "V",
    "gamma",
    "dt",
    "T",
    "N_c",
    "ensemble_size",
    "seed",
    "boundary",
    "initial",
    "stepper",
    "output_stride",
    "refit_stride",
    "validate_every",
    "validation_tol",
    "observables",
    "partition",
    "output_path",
    "cache_dir",
    "ensemble_path",
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub sites: usize,
    pub particles: usize,
    pub interaction: f64,
    /// More than one value runs a sweep.
    pub gamma: Vec<f64>,
    pub dt: f64,
    pub t_final: f64,
    pub n_c: usize,
    pub ensemble_size: usize,
    pub seed: u64,
    pub boundary: Boundary,
    /// Occupation string of the initial Fock state, site 1 first.
    pub initial: String,
    pub stepper: Stepper,
    pub output_stride: usize,
    pub refit_stride: usize,
    pub validate_every: usize,
    pub validation_tol: f64,
    pub observables: Vec<Observable>,
    /// Sites of subsystem A.
    pub partition: Vec<usize>,
    pub output_path: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub ensemble_path: Option<PathBuf>,
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", no + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            bail!("line {}: unknown key {k:?}", no + 1);
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            bail!("line {}: duplicate key {k:?}", no + 1);
        }
    }
    Ok(map)
}

fn get<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    map.get(key)
        .map(|v| v.parse::<T>().map_err(|e| anyhow!("{key} = {v:?}: {e}")))
        .transpose()
}

fn list<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<Vec<T>>>
where
    T::Err: fmt::Display,
{
    map.get(key)
        .map(|v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<T>().map_err(|e| anyhow!("{key}: {s:?}: {e}")))
                .collect()
        })
        .transpose()
}

fn neel(sites: usize, particles: usize) -> String {
    if 2 * particles == sites {
        (0..sites).map(|k| if k % 2 == 0 { '1' } else { '0' }).collect()
    } else {
        (0..sites).map(|k| if k < particles { '1' } else { '0' }).collect()
    }
}

impl RunConfig {
    /// Parses a config for `mode`; a `mode` key in the file must agree.
    pub fn parse(text: &str, mode: Mode) -> Result<Self> {
        let map = parse_pairs(text)?;
        if let Some(m) = get::<Mode>(&map, "mode")? {
            if m != mode {
                bail!("config is for mode {m}, invoked as {mode}");
            }
        }
        let need = |key: &str| -> Result<()> {
            if map.contains_key(key) {
                Ok(())
            } else {
                Err(anyhow!("mode {mode} requires {key}"))
            }
        };
        let (sites, particles) = if mode == Mode::NullspaceVerify {
            (get(&map, "L")?.unwrap_or(4), get(&map, "n_particles")?.unwrap_or(2))
        } else {
            need("L")?;
            need("n_particles")?;
            (get(&map, "L")?.unwrap(), get(&map, "n_particles")?.unwrap())
        };
        if mode.is_dynamic() {
            for k in ["gamma", "dt", "T"] {
                need(k)?;
            }
        }
        if matches!(mode, Mode::Trajectories | Mode::ReplicaHybrid) {
            need("N_c")?;
        }
        let has_ensemble = map.get("ensemble_path").is_some_and(|s| !s.is_empty());
        if mode == Mode::EnsembleBuild || (mode == Mode::ReplicaEnsemble && !has_ensemble) {
            need("ensemble_size")?;
        }
        let cfg = Self {
            mode,
            sites,
            particles,
            interaction: get(&map, "V")?.unwrap_or(0.0),
            gamma: list(&map, "gamma")?.unwrap_or_else(|| vec![0.0]),
            dt: get(&map, "dt")?.unwrap_or(0.01),
            t_final: get(&map, "T")?.unwrap_or(0.0),
            n_c: get(&map, "N_c")?.unwrap_or(0),
            ensemble_size: get(&map, "ensemble_size")?.unwrap_or(0),
            seed: get(&map, "seed")?.unwrap_or(0),
            boundary: get(&map, "boundary")?.unwrap_or_default(),
            initial: map.get("initial").cloned().unwrap_or_else(|| neel(sites, particles)),
            stepper: get(&map, "stepper")?.unwrap_or(Stepper::Euler),
            output_stride: get(&map, "output_stride")?.unwrap_or(10),
            refit_stride: get(&map, "refit_stride")?.unwrap_or(1),
            validate_every: get(&map, "validate_every")?.unwrap_or(100),
            validation_tol: get(&map, "validation_tol")?.unwrap_or(1e-6),
            observables: list(&map, "observables")?.unwrap_or_else(|| Observable::ALL.to_vec()),
            partition: list(&map, "partition")?.unwrap_or_else(|| (1..=sites / 2).collect()),
            output_path: map.get("output_path").filter(|s| !s.is_empty()).map(PathBuf::from),
            cache_dir: map.get("cache_dir").filter(|s| !s.is_empty()).map(PathBuf::from),
            ensemble_path: map.get("ensemble_path").filter(|s| !s.is_empty()).map(PathBuf::from),
        };
        cfg.validate().with_context(|| format!("invalid configuration for {mode}"))?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.sites == 0 || self.particles > self.sites {
            bail!("need 0 < L and n_particles <= L");
        }
        if !(self.interaction.is_finite()) {
            bail!("V must be finite");
        }
        if self.gamma.is_empty() || self.gamma.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            bail!("gamma must be a non-empty list of non-negative values");
        }
        if self.mode.is_dynamic() {
            if !(self.dt > 0.0 && self.dt.is_finite()) {
                bail!("dt must be positive");
            }
            if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
                bail!("T must be non-negative");
            }
        }
        if matches!(self.mode, Mode::Trajectories | Mode::ReplicaHybrid) && self.n_c == 0 {
            bail!("N_c must be positive");
        }
        if self.mode == Mode::EnsembleBuild && self.ensemble_size == 0 {
            bail!("ensemble_size must be positive");
        }
        if [self.output_stride, self.refit_stride, self.validate_every].contains(&0) {
            bail!("strides must be positive");
        }
        if !(self.validation_tol > 0.0) {
            bail!("validation_tol must be positive");
        }
        if self.initial.len() != self.sites || self.initial.chars().filter(|&c| c == '1').count() != self.particles {
            bail!("initial = {} is not an occupation string of the sector", self.initial);
        }
        if self.partition.iter().any(|&s| s == 0 || s > self.sites) {
            bail!("partition sites must lie in 1..={}", self.sites);
        }
        Ok(())
    }

    pub fn wants(&self, o: Observable) -> bool {
        self.observables.contains(&o)
    }

    /// Canonical text of every resolved setting, one `key = value` per line.
    /// The output directory is left out so relocated runs hash identically.
    pub fn resolved(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut obs = self.observables.clone();
        obs.sort();
        let lines = [
            ("mode", self.mode.to_string()),
            ("L", self.sites.to_string()),
            ("n_particles", self.particles.to_string()),
            ("V", format!("{:?}", self.interaction)),
            ("gamma", join(&self.gamma.iter().map(|g| format!("{g:?}")).collect::<Vec<_>>())),
            ("dt", format!("{:?}", self.dt)),
            ("T", format!("{:?}", self.t_final)),
            ("N_c", self.n_c.to_string()),
            ("ensemble_size", self.ensemble_size.to_string()),
            ("seed", self.seed.to_string()),
            ("boundary", self.boundary.to_string()),
            ("initial", self.initial.clone()),
            ("stepper", self.stepper.to_string()),
            ("output_stride", self.output_stride.to_string()),
            ("refit_stride", self.refit_stride.to_string()),
            ("validate_every", self.validate_every.to_string()),
            ("validation_tol", format!("{:?}", self.validation_tol)),
            ("observables", join(&obs.iter().map(|o| o.name().to_string()).collect::<Vec<_>>())),
            ("partition", join(&self.partition.iter().map(|s| s.to_string()).collect::<Vec<_>>())),
            ("cache_dir", path(&self.cache_dir)),
            ("ensemble_path", path(&self.ensemble_path)),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "L = 4\nn_particles = 2\ngamma = 0.5  # rate\ndt = 0.01\nT = 1\n";

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::parse(BASE, Mode::ReplicaMeanField).unwrap();
        assert_eq!(c.initial, "1010");
        assert_eq!(c.partition, vec![1, 2]);
        assert_eq!(c.gamma, vec![0.5]);
        assert_eq!(c.stepper, Stepper::Euler);
        assert!(c.wants(Observable::Purity));
    }

    #[test]
    fn resolved_text_round_trips() {
        let c = RunConfig::parse(&format!("{BASE}N_c = 10\nseed = 4\n"), Mode::Trajectories).unwrap();
        let again = RunConfig::parse(&c.resolved(), Mode::Trajectories).unwrap();
        assert_eq!(c.resolved(), again.resolved());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("L = 4\n", Mode::Lindblad).is_err());
        assert!(RunConfig::parse(&format!("{BASE}bogus = 1\n"), Mode::Lindblad).is_err());
        assert!(RunConfig::parse(&format!("{BASE}L = 5\n"), Mode::Lindblad).is_err());
        assert!(RunConfig::parse(BASE, Mode::Trajectories).is_err());
        assert!(RunConfig::parse(&format!("{BASE}mode = lindblad\n"), Mode::Trajectories).is_err());
        assert!(RunConfig::parse(&format!("{BASE}initial = 1110\n"), Mode::Lindblad).is_err());
        assert!(RunConfig::parse(&BASE.replace("0.01", "-1"), Mode::Lindblad).is_err());
        assert!(RunConfig::parse("", Mode::NullspaceVerify).is_ok());
    }

    #[test]
    fn gamma_list_is_a_sweep() {
        let c = RunConfig::parse(&BASE.replace("0.5", "0.1, 0.2,0.3"), Mode::Lindblad).unwrap();
        assert_eq!(c.gamma, vec![0.1, 0.2, 0.3]);
    }
}
