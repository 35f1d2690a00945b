//! Fixed-particle-number sectors of a spinless fermion chain and the
//! single-copy operators acting on them.
//!
//! Occupations are bitstrings with site 1 in the least significant bit. The
//! basis state for occupied sites `x1 < x2 < ... < xn` is
//! `c†_{x1} c†_{x2} ... c†_{xn} |0>`, so `c_x` picks up `(-1)^k` where `k` is
//! the number of occupied sites below `x`. Sites are 1-based in the public API.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{param, Error, Result};
use crate::linalg::{CMat, CVec, C64};

pub const MAX_SITES: usize = 12;

#[derive(Debug, Clone)]
pub struct FockSector {
    sites: usize,
    particles: usize,
    states: Vec<u64>,
    lookup: HashMap<u64, usize>,
}

impl FockSector {
    pub fn new(sites: usize, particles: usize) -> Result<Self> {
        if sites == 0 || sites > MAX_SITES {
            return param(format!("sites must be in 1..={MAX_SITES}, got {sites}"));
        }
        if particles > sites {
            return param(format!("{particles} particles do not fit on {sites} sites"));
        }
        let states: Vec<u64> = (0u64..(1u64 << sites))
            .filter(|b| b.count_ones() as usize == particles)
            .collect();
        let lookup = states.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        Ok(Self { sites, particles, states, lookup })
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[u64] {
        &self.states
    }

    pub fn index_of(&self, bits: u64) -> Option<usize> {
        self.lookup.get(&bits).copied()
    }

    pub fn is_occupied(&self, index: usize, site: usize) -> bool {
        self.states[index] >> (site - 1) & 1 == 1
    }

    /// Occupation string with site 1 first, e.g. `"1010"`.
    pub fn label(&self, index: usize) -> String {
        (1..=self.sites)
            .map(|s| if self.is_occupied(index, s) { '1' } else { '0' })
            .collect()
    }

    /// Inverse of [`FockSector::label`].
    pub fn parse_label(&self, label: &str) -> Result<usize> {
        let label = label.trim();
        if label.len() != self.sites {
            return param(format!("occupation string {label:?} must have {} characters", self.sites));
        }
        let mut bits = 0u64;
        for (k, ch) in label.chars().enumerate() {
            match ch {
                '1' => bits |= 1 << k,
                '0' => {}
                _ => return param(format!("invalid occupation character {ch:?}")),
            }
        }
        self.index_of(bits).ok_or_else(|| {
            Error::Parameter(format!("{label} is not in the {}-particle sector", self.particles))
        })
    }

    pub fn basis_vector(&self, index: usize) -> CVec {
        let mut v = CVec::zeros(self.dim());
        v[index] = C64::new(1.0, 0.0);
        v
    }

    fn check_site(&self, site: usize) -> Result<()> {
        if site == 0 || site > self.sites {
            return param(format!("site {site} outside 1..={}", self.sites));
        }
        Ok(())
    }
}

pub fn build_sector(sites: usize, particles: usize) -> Result<FockSector> {
    FockSector::new(sites, particles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Open,
    Periodic,
}

impl FromStr for Boundary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "open" | "obc" => Ok(Self::Open),
            "periodic" | "pbc" => Ok(Self::Periodic),
            other => param(format!("unknown boundary {other:?}")),
        }
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Open => "open",
            Self::Periodic => "periodic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorLabel {
    Hamiltonian { interaction: f64, boundary: Boundary },
    Number(usize),
    Measurement(usize),
    Hopping { to: usize, from: usize },
}

#[derive(Debug, Clone)]
pub struct SectorOperator {
    label: OperatorLabel,
    matrix: CMat,
    diagonal: Option<Vec<f64>>,
}

impl SectorOperator {
    fn new(label: OperatorLabel, matrix: CMat) -> Self {
        let n = matrix.nrows();
        let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || matrix[(i, j)] == C64::new(0.0, 0.0)))
            && (0..n).all(|i| matrix[(i, i)].im == 0.0);
        let diagonal = is_diag.then(|| (0..n).map(|i| matrix[(i, i)].re).collect());
        Self { label, matrix, diagonal }
    }

    pub fn label(&self) -> &OperatorLabel {
        &self.label
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    /// The real diagonal when the operator is diagonal in the occupation basis.
    pub fn diagonal(&self) -> Option<&[f64]> {
        self.diagonal.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// `c†_to c_from` applied to a bitstring: the resulting bitstring and sign.
fn hop(bits: u64, to: usize, from: usize) -> Option<(u64, f64)> {
    let (t, f) = (to - 1, from - 1);
    if bits >> f & 1 == 0 {
        return None;
    }
    let below = |b: u64, k: usize| (b & ((1u64 << k) - 1)).count_ones();
    let mut sign = below(bits, f);
    let mid = bits & !(1 << f);
    if mid >> t & 1 == 1 {
        return None;
    }
    sign += below(mid, t);
    let s = if sign % 2 == 0 { 1.0 } else { -1.0 };
    Some((mid | 1 << t, s))
}

pub fn build_hopping_operator(sector: &FockSector, to: usize, from: usize) -> Result<SectorOperator> {
    sector.check_site(to)?;
    sector.check_site(from)?;
    let d = sector.dim();
    let mut m = CMat::zeros(d, d);
    for (j, &b) in sector.states().iter().enumerate() {
        if to == from {
            if b >> (to - 1) & 1 == 1 {
                m[(j, j)] = C64::new(1.0, 0.0);
            }
        } else if let Some((b2, s)) = hop(b, to, from) {
            let i = sector.index_of(b2).expect("hopping conserves particle number");
            m[(i, j)] += C64::new(s, 0.0);
        }
    }
    Ok(SectorOperator::new(OperatorLabel::Hopping { to, from }, m))
}

pub fn build_number_operator(sector: &FockSector, site: usize) -> Result<SectorOperator> {
    sector.check_site(site)?;
    let m = CMat::from_diagonal(&CVec::from_iterator(
        sector.dim(),
        (0..sector.dim()).map(|i| C64::new(sector.is_occupied(i, site) as u8 as f64, 0.0)),
    ));
    Ok(SectorOperator::new(OperatorLabel::Number(site), m))
}

/// `O_x = 1 - 2 n_x`.
pub fn build_measurement_operator(sector: &FockSector, site: usize) -> Result<SectorOperator> {
    sector.check_site(site)?;
    let m = CMat::from_diagonal(&CVec::from_iterator(
        sector.dim(),
        (0..sector.dim()).map(|i| C64::new(if sector.is_occupied(i, site) { -1.0 } else { 1.0 }, 0.0)),
    ));
    Ok(SectorOperator::new(OperatorLabel::Measurement(site), m))
}

/// Measurement operators for every site, in site order.
pub fn measurement_operators(sector: &FockSector) -> Vec<SectorOperator> {
    (1..=sector.sites())
        .map(|s| build_measurement_operator(sector, s).expect("site in range"))
        .collect()
}

/// `H = -sum_x (c†_x c_{x+1} + h.c.) + V sum_{x<L} (n_x - 1/2)(n_{x+1} - 1/2)`.
///
/// The periodic flag adds the `(L, 1)` hopping bond for `L > 2`; the
/// interaction always runs over the open bonds.
pub fn build_hamiltonian(sector: &FockSector, interaction: f64, boundary: Boundary) -> SectorOperator {
    let l = sector.sites();
    let d = sector.dim();
    let mut m = CMat::zeros(d, d);
    let mut bonds: Vec<(usize, usize)> = (1..l).map(|x| (x, x + 1)).collect();
    if boundary == Boundary::Periodic && l > 2 {
        bonds.push((l, 1));
    }
    for (j, &b) in sector.states().iter().enumerate() {
        for &(x, y) in &bonds {
            for (to, from) in [(x, y), (y, x)] {
                if let Some((b2, s)) = hop(b, to, from) {
                    let i = sector.index_of(b2).expect("hopping conserves particle number");
                    m[(i, j)] -= C64::new(s, 0.0);
                }
            }
        }
        let occ = |x: usize| (b >> (x - 1) & 1) as f64 - 0.5;
        let e: f64 = (1..l).map(|x| occ(x) * occ(x + 1)).sum();
        m[(j, j)] += C64::new(interaction * e, 0.0);
    }
    SectorOperator::new(OperatorLabel::Hamiltonian { interaction, boundary }, m)
}
