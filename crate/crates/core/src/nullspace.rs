//! Two-state bosonic bookkeeping for replica partial traces.
//!
//! For orthonormal single-copy vectors `A` and `B`, `|n_a, n_b>` is the
//! unnormalized sum of all distinct slot placements of `n_a` copies of `A` and
//! `n_b` copies of `B`. Tracing one slot acts as `a . a† + b . b†` with
//! `a|n_a, n_b> = |n_a - 1, n_b>` (coefficient one). Tracing `k` slots needs
//! the mixed terms `sum_j C(k, j) a^j b^(k-j) . (a†)^j (b†)^(k-j)`.
//!
//! Coefficients are exact rationals. [`ABBasis`] embeds the formalism into a
//! concrete `d^M` replica space for numerical cross-checks.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_rational::Rational64;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{param, Error, Result};
use crate::linalg::{hermitian_eigen, outer, CMat, CVec, RMat, C64};
use crate::replica::{binomial, ProjectedState, SymmetricBasis, MAX_ORDER};

/// An operator `sum c |n_a, M - n_a><m_a, M - m_a|` at replica order `M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ABOperator {
    order: usize,
    terms: BTreeMap<(usize, usize), Rational64>,
}

impl ABOperator {
    pub fn zero(order: usize) -> Self {
        Self { order, terms: BTreeMap::new() }
    }

    /// `|ket_a, M - ket_a><bra_a, M - bra_a|`
    pub fn outer(order: usize, ket_a: usize, bra_a: usize) -> Self {
        let mut op = Self::zero(order);
        op.add(ket_a, bra_a, Rational64::one());
        op
    }

    /// Parses text such as `3/2|3,0><3,0| - |2,1><1,2| + h.c.`.
    pub fn parse(order: usize, text: &str) -> Result<Self> {
        let bad = |why: &str| Error::Parameter(format!("cannot parse A/B operator {text:?}: {why}"));
        let mut s = text.trim();
        let mut hc = false;
        if let Some(rest) = s.strip_suffix("h.c.") {
            s = rest.trim_end().strip_suffix('+').ok_or_else(|| bad("h.c. must be added"))?.trim_end();
            hc = true;
        }
        let mut op = Self::zero(order);
        if s == "0" {
            return Ok(op);
        }
        let mut rest = s;
        let mut first = true;
        while !rest.is_empty() {
            let mut sign = Rational64::one();
            if let Some(r) = rest.strip_prefix('-') {
                sign = -sign;
                rest = r.trim_start();
            } else if let Some(r) = rest.strip_prefix('+') {
                rest = r.trim_start();
            } else if !first {
                return Err(bad("expected + or -"));
            }
            first = false;
            let bar = rest.find('|').ok_or_else(|| bad("missing ket"))?;
            let coeff_text = rest[..bar].trim();
            let coeff = if coeff_text.is_empty() {
                Rational64::one()
            } else {
                coeff_text.parse::<Rational64>().map_err(|_| bad("bad coefficient"))?
            };
            rest = &rest[bar + 1..];
            let close = rest.find('>').ok_or_else(|| bad("unterminated ket"))?;
            let ket = parse_pair(&rest[..close], order).ok_or_else(|| bad("bad ket"))?;
            rest = rest[close + 1..].strip_prefix('<').ok_or_else(|| bad("missing bra"))?;
            let close = rest.find('|').ok_or_else(|| bad("unterminated bra"))?;
            let bra = parse_pair(&rest[..close], order).ok_or_else(|| bad("bad bra"))?;
            rest = rest[close + 1..].trim_start();
            op.add(ket, bra, sign * coeff);
        }
        if hc {
            let d = op.dagger();
            op = op.plus(&d);
        }
        Ok(op)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add(&mut self, ket_a: usize, bra_a: usize, c: Rational64) {
        assert!(ket_a <= self.order && bra_a <= self.order, "occupation exceeds order");
        let e = self.terms.entry((ket_a, bra_a)).or_insert_with(Rational64::zero);
        *e += c;
        if e.is_zero() {
            self.terms.remove(&(ket_a, bra_a));
        }
    }

    pub fn coefficient(&self, ket_a: usize, bra_a: usize) -> Rational64 {
        self.terms.get(&(ket_a, bra_a)).copied().unwrap_or_else(Rational64::zero)
    }

    /// Nonzero terms as `((ket_a, bra_a), c)`.
    pub fn terms(&self) -> impl Iterator<Item = ((usize, usize), Rational64)> + '_ {
        self.terms.iter().map(|(&k, &c)| (k, c))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn dagger(&self) -> Self {
        Self { order: self.order, terms: self.terms.iter().map(|(&(k, b), &c)| ((b, k), c)).collect() }
    }

    pub fn is_hermitian(&self) -> bool {
        *self == self.dagger()
    }

    pub fn plus(&self, other: &Self) -> Self {
        assert_eq!(self.order, other.order, "order mismatch");
        let mut out = self.clone();
        for ((k, b), c) in other.terms() {
            out.add(k, b, c);
        }
        out
    }

    pub fn scaled(&self, s: Rational64) -> Self {
        let mut out = Self::zero(self.order);
        for ((k, b), c) in self.terms() {
            out.add(k, b, c * s);
        }
        out
    }

    /// Coefficient table with row/column `i` for `n_a = M - i`, the order used
    /// by the printed tables (`|M,0>` first).
    pub fn table(&self) -> RMat {
        let n = self.order + 1;
        let mut t = RMat::zeros(n, n);
        for ((k, b), c) in self.terms() {
            t[(self.order - k, self.order - b)] = c.to_f64().unwrap_or(f64::NAN);
        }
        t
    }

    /// Row-major flattening of [`ABOperator::table`].
    pub fn coordinates(&self) -> Vec<f64> {
        self.table().transpose().as_slice().to_vec()
    }
}

fn parse_pair(s: &str, order: usize) -> Option<usize> {
    let (a, b) = s.split_once(',')?;
    let a: usize = a.trim().parse().ok()?;
    let b: usize = b.trim().parse().ok()?;
    (a + b == order).then_some(a)
}

impl fmt::Display for ABOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let m = self.order;
        // kets with more A first, matching the printed tables
        let mut terms: Vec<_> = self.terms().collect();
        terms.sort_by(|x, y| (y.0 .0, y.0 .1).cmp(&(x.0 .0, x.0 .1)));
        for (i, ((k, b), c)) in terms.into_iter().enumerate() {
            let mag = c.abs();
            match (i, c.is_negative()) {
                (0, true) => write!(f, "-")?,
                (0, false) => {}
                (_, true) => write!(f, " - ")?,
                (_, false) => write!(f, " + ")?,
            }
            if !mag.is_one() {
                write!(f, "{mag}")?;
            }
            write!(f, "|{},{}><{},{}|", k, m - k, b, m - b)?;
        }
        Ok(())
    }
}

/// Traces `k` replica slots of an order-`M` operator.
pub fn ab_partial_trace(op: &ABOperator, k: usize) -> Result<ABOperator> {
    let m = op.order;
    if k == 0 || k >= m {
        return param(format!("cannot trace {k} slots of an order-{m} operator"));
    }
    let mut out = ABOperator::zero(m - k);
    for ((ka, ba), c) in op.terms() {
        let (kb, bb) = (m - ka, m - ba);
        // j copies of A and k - j copies of B removed from both sides
        for j in 0..=k {
            if j <= ka && j <= ba && k - j <= kb && k - j <= bb {
                out.add(ka - j, ba - j, c * Rational64::from_integer(binomial(k, j) as i64));
            }
        }
    }
    Ok(out)
}

/// A printed partial-trace table: `cells[i][j]` is the image of
/// `|M-i, i><M-j, j|`.
#[derive(Debug, Clone)]
pub struct TraceTable {
    pub from: usize,
    pub to: usize,
    pub caption: &'static str,
    pub cells: Vec<Vec<ABOperator>>,
}

const TABLE_2_1: [&str; 9] = [
    "|1,0><1,0|", "|1,0><0,1|", "0",
    "|0,1><1,0|", "|0,1><0,1| + |1,0><1,0|", "|1,0><0,1|",
    "0", "|0,1><1,0|", "|0,1><0,1|",
];

const TABLE_3_2: [&str; 16] = [
    "|2,0><2,0|", "|2,0><1,1|", "|2,0><0,2|", "0",
    "|1,1><2,0|", "|1,1><1,1| + |2,0><2,0|", "|1,1><0,2| + |2,0><1,1|", "|2,0><0,2|",
    "|0,2><2,0|", "|0,2><1,1| + |1,1><2,0|", "|0,2><0,2| + |1,1><1,1|", "|1,1><0,2|",
    "0", "|0,2><2,0|", "|0,2><1,1|", "|0,2><0,2|",
];

const TABLE_4_3: [&str; 25] = [
    "|3,0><3,0|", "|3,0><2,1|", "|3,0><1,2|", "|3,0><0,3|", "0",
    "|2,1><3,0|", "|2,1><2,1| + |3,0><3,0|", "|2,1><1,2| + |3,0><2,1|", "|2,1><0,3| + |3,0><1,2|", "|3,0><0,3|",
    "|1,2><3,0|", "|1,2><2,1| + |2,1><3,0|", "|1,2><1,2| + |2,1><2,1|", "|1,2><0,3| + |2,1><1,2|", "|2,1><0,3|",
    "|0,3><3,0|", "|0,3><2,1| + |1,2><3,0|", "|0,3><1,2| + |1,2><2,1|", "|0,3><0,3| + |1,2><1,2|", "|1,2><0,3|",
    "0", "|0,3><3,0|", "|0,3><2,1|", "|0,3><1,2|", "|0,3><0,3|",
];

const TABLE_4_2: [&str; 25] = [
    "|2,0><2,0|", "|2,0><1,1|", "|2,0><0,2|", "0", "0",
    "|1,1><2,0|", "|1,1><1,1| + 2|2,0><2,0|", "|1,1><0,2| + 2|2,0><1,1|", "2|2,0><0,2|", "0",
    "|0,2><2,0|", "|0,2><1,1| + 2|1,1><2,0|", "|0,2><0,2| + 2|1,1><1,1| + |2,0><2,0|", "2|1,1><0,2| + 2|2,0><1,1|", "|2,0><0,2|",
    "0", "2|0,2><2,0|", "2|0,2><1,1| + 2|1,1><2,0|", "2|0,2><0,2| + |1,1><1,1|", "|1,1><0,2|",
    "0", "0", "|0,2><2,0|", "|0,2><1,1|", "|0,2><0,2|",
];

/// The printed tables, transcribed cell by cell. Supported pairs are
/// (2,1), (3,2), (4,3) and (4,2).
pub fn printed_table(from: usize, to: usize) -> Result<TraceTable> {
    let (cells, caption): (&[&str], _) = match (from, to) {
        (2, 1) => (&TABLE_2_1, "R2 -> R1, single trace"),
        (3, 2) => (&TABLE_3_2, "R3 -> R2, single trace"),
        (4, 3) => (&TABLE_4_3, "R4 -> R3, single trace"),
        (4, 2) => (&TABLE_4_2, "R4 -> R2, double trace"),
        _ => return param(format!("no printed table for {from} -> {to}")),
    };
    let n = from + 1;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let row = (0..n).map(|j| ABOperator::parse(to, cells[i * n + j])).collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(TraceTable { from, to, caption, cells: rows })
}

/// The same table computed with [`ab_partial_trace`].
pub fn computed_table(from: usize, to: usize) -> Result<TraceTable> {
    let printed = printed_table(from, to)?;
    let cells = (0..=from)
        .map(|i| {
            (0..=from)
                .map(|j| ab_partial_trace(&ABOperator::outer(from, from - i, from - j), from - to))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceTable { cells, ..printed })
}

/// A printed cell that differs from the computed trace.
#[derive(Debug, Clone)]
pub struct CellMismatch {
    pub ket_a: usize,
    pub bra_a: usize,
    pub printed: ABOperator,
    pub computed: ABOperator,
}

pub fn table_mismatches(from: usize, to: usize) -> Result<Vec<CellMismatch>> {
    let printed = printed_table(from, to)?;
    let computed = computed_table(from, to)?;
    let mut out = Vec::new();
    for i in 0..=from {
        for j in 0..=from {
            let (p, c) = (&printed.cells[i][j], &computed.cells[i][j]);
            if p != c {
                out.push(CellMismatch { ket_a: from - i, bra_a: from - j, printed: p.clone(), computed: c.clone() });
            }
        }
    }
    Ok(out)
}

/// Explicit null operators, as printed.
#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub name: String,
    pub operator: ABOperator,
}

/// Returns the printed null-operator lists. `(4, 2)` gives the order-4
/// representation of the `3 -> 2` operators, which should vanish under a
/// double trace.
pub fn catalog_null_operators(from: usize, to: usize) -> Result<Vec<CatalogEntry>> {
    let (label, texts): (&str, &[&str]) = match (from, to) {
        (2, 1) => ("N_{2->1}", &[
            "|2,0><2,0| - |1,1><1,1| + |0,2><0,2|",
            "|2,0><1,1| - |1,1><0,2| + h.c.",
            "|2,0><0,2| + h.c.",
        ]),
        (3, 2) => ("N_{3->2}", &[
            "|3,0><3,0| - |2,1><2,1| + |1,2><1,2| - |0,3><0,3|",
            "|3,0><2,1| - |2,1><1,2| + |1,2><0,3| + h.c.",
            "|3,0><1,2| - |1,2><0,3| + h.c.",
            "|3,0><0,3| + h.c.",
        ]),
        (4, 3) => ("N_{4->3}", &[
            "|4,0><4,0| - |3,1><3,1| + |2,2><2,2| - |1,3><1,3| + |0,4><0,4|",
            "|4,0><3,1| - |3,1><2,2| + |2,2><1,3| - |1,3><0,4| + h.c.",
            "|4,0><2,2| - |3,1><1,3| + |2,2><0,4| + h.c.",
            "|4,0><1,3| - |3,1><0,4| + h.c.",
            "|4,0><0,4| + h.c.",
        ]),
        (4, 2) => ("R4 N_{3->2}", &[
            "|3,1><3,1| - |1,3><1,3| - 2|4,0><4,0| - 2|0,4><0,4|",
            "|3,1><2,2| - |2,2><1,3| - 3|4,0><3,1| - 3|1,3><0,4| + h.c.",
            "|4,0><2,2| - |2,2><0,4| + h.c.",
            "|4,0><1,3| + h.c.",
        ]),
        (3, 1) => ("N_{3->1}", &[
            "3/2|3,0><3,0| - 1/2|2,1><2,1| - 1/2|1,2><1,2| + 3/2|0,3><0,3|",
            "|3,0><2,1| - |1,2><0,3| + h.c.",
            "|3,0><1,2| - |3,0><1,2| + h.c.",
        ]),
        _ => return param(format!("no null-operator catalog for {from} -> {to}")),
    };
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Ok(CatalogEntry { name: format!("{label}^({})", i + 1), operator: ABOperator::parse(from, t)? }))
        .collect()
}

/// Null space of `op -> Tr_k op` on real coefficient tables at order `from`.
#[derive(Debug, Clone)]
pub struct NullSpace {
    pub from: usize,
    pub to: usize,
    /// Orthonormal basis in the coordinates of [`ABOperator::coordinates`].
    pub basis: Vec<Vec<f64>>,
    /// Dimension within symmetric (Hermitian) coefficient tables.
    pub symmetric: usize,
    /// Dimension within antisymmetric coefficient tables.
    pub antisymmetric: usize,
}

impl NullSpace {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Orthogonal projection of a coefficient vector onto the null space.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for v in &self.basis {
            let c: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
            for (o, a) in out.iter_mut().zip(v) {
                *o += c * a;
            }
        }
        out
    }

    /// Norm of the component of `x` outside the null space.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let p = self.project(x);
        p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

fn trace_map_matrix(from: usize, k: usize) -> Result<RMat> {
    let (n, m) = (from + 1, from - k + 1);
    let mut a = RMat::zeros(m * m, n * n);
    for i in 0..n {
        for j in 0..n {
            let img = ab_partial_trace(&ABOperator::outer(from, from - i, from - j), k)?;
            for (r, v) in img.coordinates().into_iter().enumerate() {
                a[(r, i * n + j)] = v;
            }
        }
    }
    Ok(a)
}

/// Orthonormal null vectors of `a` restricted to the column span of `s`.
fn restricted_null(a: &RMat, s: &RMat) -> Vec<Vec<f64>> {
    let as_ = a * s;
    let eig = (as_.transpose() * &as_).symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, &x| m.max(x.abs()));
    (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i].abs() <= 1e-9 * scale)
        .map(|i| (s * eig.eigenvectors.column(i)).as_slice().to_vec())
        .collect()
}

/// Brute-force null space of the `from -> to` trace on the A/B operator space.
pub fn compute_null_space(from: usize, to: usize) -> Result<NullSpace> {
    if from > MAX_ORDER || to == 0 || to >= from {
        return param(format!("unsupported null space {from} -> {to}"));
    }
    let a = trace_map_matrix(from, from - to)?;
    let n = from + 1;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut sym = Vec::new();
    let mut anti = Vec::new();
    for i in 0..n {
        for j in i..n {
            let mut v = vec![0.0; n * n];
            if i == j {
                v[i * n + i] = 1.0;
                sym.push(v);
            } else {
                v[i * n + j] = h;
                v[j * n + i] = h;
                sym.push(v.clone());
                v[j * n + i] = -h;
                anti.push(v);
            }
        }
    }
    let cols = |vs: &[Vec<f64>]| RMat::from_fn(n * n, vs.len(), |r, c| vs[c][r]);
    let ns = restricted_null(&a, &cols(&sym));
    let na = restricted_null(&a, &cols(&anti));
    let (symmetric, antisymmetric) = (ns.len(), na.len());
    let basis = ns.into_iter().chain(na).collect();
    Ok(NullSpace { from, to, basis, symmetric, antisymmetric })
}

/// Outcome of checking one cataloged operator.
#[derive(Debug, Clone)]
pub struct CatalogCheck {
    pub name: String,
    pub operator: ABOperator,
    /// Exact image under the catalog's trace.
    pub image: ABOperator,
    pub annihilated: bool,
    /// The operator is identically zero.
    pub trivial: bool,
    /// Distance of the coefficient table from the null space.
    pub null_residual: f64,
    /// Projection of the coefficient table onto the null space, row-major.
    pub corrected: Vec<f64>,
}

pub fn verify_catalog(from: usize, to: usize) -> Result<Vec<CatalogCheck>> {
    let entries = catalog_null_operators(from, to)?;
    let null = compute_null_space(from, to)?;
    entries
        .into_iter()
        .map(|e| {
            let image = ab_partial_trace(&e.operator, from - to)?;
            let x = e.operator.coordinates();
            Ok(CatalogCheck {
                annihilated: image.is_zero(),
                trivial: e.operator.is_zero(),
                null_residual: null.residual(&x),
                corrected: null.project(&x),
                name: e.name,
                operator: e.operator,
                image,
            })
        })
        .collect()
}

/// `|n_a, n_b>` states built from concrete single-copy vectors.
#[derive(Debug, Clone)]
pub struct ABBasis {
    a: CVec,
    b: CVec,
}

impl ABBasis {
    pub fn new(a: CVec, b: CVec) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return param("A and B must have the same nonzero dimension");
        }
        let tol = 1e-10;
        if (a.norm() - 1.0).abs() > tol || (b.norm() - 1.0).abs() > tol || a.dotc(&b).norm() > tol {
            return Err(Error::Validation("A and B must be orthonormal".into()));
        }
        Ok(Self { a, b })
    }

    pub fn site_dim(&self) -> usize {
        self.a.len()
    }

    /// Full-space vector of `|n_a, order - n_a>`, replica 1 most significant.
    pub fn state(&self, order: usize, n_a: usize) -> CVec {
        assert!(n_a <= order, "occupation exceeds order");
        let d = self.site_dim();
        let mut out = CVec::zeros(d.pow(order as u32));
        for mask in 0u32..(1 << order) {
            if mask.count_ones() as usize != n_a {
                continue;
            }
            let mut v = CVec::from_element(1, C64::new(1.0, 0.0));
            for slot in 0..order {
                let f = if mask >> slot & 1 == 1 { &self.a } else { &self.b };
                v = v.kronecker(f);
            }
            out += v;
        }
        out
    }

    /// Full-space matrix of an A/B operator.
    pub fn embed(&self, op: &ABOperator) -> CMat {
        let m = op.order();
        let states: Vec<CVec> = (0..=m).map(|k| self.state(m, k)).collect();
        let f = states[0].len();
        let mut out = CMat::zeros(f, f);
        for ((k, b), c) in op.terms() {
            out += outer(&states[k], &states[b]) * C64::new(c.to_f64().unwrap_or(f64::NAN), 0.0);
        }
        out
    }

    /// `Tr_k` of the embedded operator, computed from the full-space
    /// vectors without forming order-`M` matrices.
    pub fn embedded_trace(&self, op: &ABOperator, k: usize) -> Result<CMat> {
        let m = op.order();
        if k == 0 || k >= m {
            return param(format!("cannot trace {k} slots of an order-{m} operator"));
        }
        let d = self.site_dim();
        let (rows, cols) = (d.pow((m - k) as u32), d.pow(k as u32));
        let reshaped: Vec<CMat> =
            (0..=m).map(|n| CMat::from_row_slice(rows, cols, self.state(m, n).as_slice())).collect();
        let mut out = CMat::zeros(rows, rows);
        for ((ka, ba), c) in op.terms() {
            out += &reshaped[ka] * reshaped[ba].adjoint() * C64::new(c.to_f64().unwrap_or(f64::NAN), 0.0);
        }
        Ok(out)
    }
}

/// Largest entry deviation between embedded printed cells and the
/// full-space partial traces of embedded outer products, per cell.
pub fn embedded_table_errors(table: &TraceTable, basis: &ABBasis) -> Result<Vec<Vec<f64>>> {
    let m = table.from;
    (0..=m)
        .map(|i| {
            (0..=m)
                .map(|j| {
                    let traced = basis.embedded_trace(&ABOperator::outer(m, m - i, m - j), m - table.to)?;
                    let expect = basis.embed(&table.cells[i][j]);
                    Ok((traced - expect).iter().fold(0.0f64, |acc, z| acc.max(z.norm())))
                })
                .collect()
        })
        .collect()
}

/// Takagi factorization `v = sum_j s_j u_j u_jᵀ` of a complex symmetric
/// matrix, keeping `s_j > tol * max s`. Returns `(s_j, u_j)`.
pub fn takagi(v: &CMat, tol: f64) -> Result<Vec<(f64, CVec)>> {
    let d = v.nrows();
    if v.ncols() != d {
        return Err(Error::Validation("Takagi factorization needs a square matrix".into()));
    }
    let asym = (v - v.transpose()).iter().fold(0.0f64, |m, z| m.max(z.norm()));
    let scale = v.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if asym > 1e-8 * scale.max(1e-300) {
        return Err(Error::Validation(format!("matrix is not symmetric (residual {asym:.2e})")));
    }
    // (x, y) with eigenvalue s of [[P, Q], [Q, -P]] gives v conj(u) = s u for u = x + iy
    let big = DMatrix::from_fn(2 * d, 2 * d, |r, c| {
        let z = v[(r % d, c % d)];
        match (r < d, c < d) {
            (true, true) => z.re,
            (false, false) => -z.re,
            _ => z.im,
        }
    });
    let eig = big.symmetric_eigen();
    let smax = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x));
    let mut out = Vec::new();
    for (i, &s) in eig.eigenvalues.iter().enumerate() {
        if s > tol * smax && s > 0.0 {
            let col = eig.eigenvectors.column(i);
            let u = CVec::from_fn(d, |k, _| C64::new(col[k], col[k + d]));
            out.push((s, u));
        }
    }
    out.sort_by(|x, y| y.0.total_cmp(&x.0));
    let mut rebuilt = CMat::zeros(d, d);
    for (s, u) in &out {
        rebuilt += u * u.transpose() * C64::new(*s, 0.0);
    }
    let err = (rebuilt - v).iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if err > 1e-8 * scale.max(1e-300) {
        return Err(Error::Validation(format!("Takagi factorization failed (residual {err:.2e})")));
    }
    Ok(out)
}

/// Schmidt data of one eigenvector of an order-2 state.
#[derive(Debug, Clone)]
pub struct EigenTerm {
    pub weight: f64,
    /// `(s_j, A_j)` with `|v> = sum_j s_j |A_j A_j>`.
    pub schmidt: Vec<(f64, CVec)>,
}

/// Eigen-decomposes an order-2 state and Schmidt-decomposes each eigenvector.
pub fn eigen_schmidt(r2: &ProjectedState) -> Result<Vec<EigenTerm>> {
    if r2.order() != 2 {
        return param("eigenbasis reconstruction needs an order-2 state");
    }
    let basis = r2.basis();
    let d = basis.site_dim();
    let (vals, vecs) = hermitian_eigen(r2.matrix());
    let pmax = vals.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut out = Vec::new();
    for (n, &p) in vals.iter().enumerate() {
        if p.abs() <= 1e-14 * pmax {
            continue;
        }
        let mut full = CVec::zeros(d * d);
        for x in 0..d * d {
            let (c, w) = basis.row(x);
            full[x] = vecs[(c, n)] * w;
        }
        let v = CMat::from_row_slice(d, d, full.as_slice());
        out.push(EigenTerm { weight: p, schmidt: takagi(&v, 1e-12)? });
    }
    Ok(out)
}

/// Order-3 state from the eigen/Schmidt structure of an order-2 state.
///
/// Diagonal terms map `|AA><AA|` to `|AAA><AAA|`; each coherent pair
/// `|AA><BB|` is split as `(1/2 + alpha) |3,0><1,2| + (1/2 - alpha) |2,1><0,3|`
/// plus its adjoint. The single-slot trace reproduces `r2` for every `alpha`.
pub fn eigenbasis_reconstruct(r2: &ProjectedState, alpha: f64, basis3: Arc<SymmetricBasis>) -> Result<ProjectedState> {
    let d = r2.basis().site_dim();
    if basis3.order() != 3 || basis3.site_dim() != d {
        return param("target basis must be order 3 over the same site dimension");
    }
    let terms = eigen_schmidt(r2)?;
    let v3 = basis3.dense();
    let project = |w: &CVec| -> CVec {
        CVec::from_fn(basis3.dim(), |c, _| {
            (0..w.len()).map(|x| w[x] * v3[(x, c)]).sum::<C64>()
        })
    };
    let mut r3 = CMat::zeros(basis3.dim(), basis3.dim());
    for term in &terms {
        let sch = &term.schmidt;
        for (j, (sj, aj)) in sch.iter().enumerate() {
            let cube = project(&ABBasis::pure_power(aj, 3));
            r3 += outer(&cube, &cube) * C64::new(term.weight * sj * sj, 0.0);
            for (sk, ak) in sch.iter().skip(j + 1) {
                let ab = ABBasis { a: aj.clone(), b: ak.clone() };
                let s30 = project(&ab.state(3, 3));
                let s21 = project(&ab.state(3, 2));
                let s12 = project(&ab.state(3, 1));
                let s03 = project(&ab.state(3, 0));
                let mut c = outer(&s30, &s12) * C64::new(0.5 + alpha, 0.0)
                    + outer(&s21, &s03) * C64::new(0.5 - alpha, 0.0);
                c *= C64::new(term.weight * sj * sk, 0.0);
                r3 += &c + c.adjoint();
            }
        }
    }
    ProjectedState::new(basis3, r3)
}

impl ABBasis {
    fn pure_power(a: &CVec, order: usize) -> CVec {
        let mut v = CVec::from_element(1, C64::new(1.0, 0.0));
        for _ in 0..order {
            v = v.kronecker(a);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius;
    use crate::replica::ReplicaReduction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r(n: i64) -> Rational64 {
        Rational64::from_integer(n)
    }

    fn random_pair(d: usize, seed: u64) -> ABBasis {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || CVec::from_fn(d, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let a = v().normalize();
        let b0 = v();
        let b = (&b0 - &a * a.dotc(&b0)).normalize();
        ABBasis::new(a, b).unwrap()
    }

    #[test]
    fn single_trace_examples() {
        let t = ab_partial_trace(&ABOperator::outer(3, 3, 1), 1).unwrap();
        assert_eq!(t, ABOperator::parse(2, "|2,0><0,2|").unwrap());
        let t = ab_partial_trace(&ABOperator::outer(2, 1, 1), 1).unwrap();
        assert_eq!(t, ABOperator::parse(1, "|0,1><0,1| + |1,0><1,0|").unwrap());
        let t = ab_partial_trace(&ABOperator::outer(4, 2, 2), 2).unwrap();
        assert_eq!(t, ABOperator::parse(2, "|0,2><0,2| + 2|1,1><1,1| + |2,0><2,0|").unwrap());
        assert!(ab_partial_trace(&ABOperator::outer(2, 1, 1), 2).is_err());
    }

    #[test]
    fn double_trace_is_two_single_traces() {
        for ka in 0..=4 {
            for ba in 0..=4 {
                let op = ABOperator::outer(4, ka, ba);
                let once = ab_partial_trace(&ab_partial_trace(&op, 1).unwrap(), 1).unwrap();
                assert_eq!(once, ab_partial_trace(&op, 2).unwrap());
            }
        }
    }

    #[test]
    fn parse_and_display_round_trip() {
        let op = ABOperator::parse(3, "3/2|3,0><3,0| - |2,1><1,2| + h.c.").unwrap();
        assert_eq!(op.coefficient(3, 3), r(3));
        assert_eq!(op.coefficient(1, 2), r(-1));
        assert!(op.is_hermitian());
        let again = ABOperator::parse(3, &op.to_string()).unwrap();
        assert_eq!(again, op);
        assert!(ABOperator::parse(3, "|2,0><1,2|").is_err());
        assert!(ABOperator::parse(3, "|3,0><1,2| h.c.").is_err());
    }

    #[test]
    fn single_trace_tables_match() {
        for (from, to) in [(2, 1), (3, 2), (4, 3)] {
            assert!(table_mismatches(from, to).unwrap().is_empty(), "{from}->{to}");
        }
    }

    #[test]
    fn double_trace_table_has_two_misprinted_cells() {
        let bad = table_mismatches(4, 2).unwrap();
        let cells: Vec<_> = bad.iter().map(|m| (m.ket_a, m.bra_a)).collect();
        assert_eq!(cells, vec![(2, 1), (1, 2)]);
        assert_eq!(bad[0].computed, ABOperator::parse(2, "2|1,1><0,2| + |2,0><1,1|").unwrap());
    }

    #[test]
    fn null_space_dimensions() {
        let expect = [((2, 1), 3, 2), ((3, 2), 4, 3), ((4, 3), 5, 4), ((3, 1), 7, 5)];
        for ((from, to), s, a) in expect {
            let ns = compute_null_space(from, to).unwrap();
            assert_eq!((ns.symmetric, ns.antisymmetric), (s, a), "{from}->{to}");
        }
    }

    #[test]
    fn null_space_is_annihilated() {
        let ns = compute_null_space(4, 3).unwrap();
        let a = trace_map_matrix(4, 1).unwrap();
        for v in &ns.basis {
            let img = &a * nalgebra::DVector::from_column_slice(v);
            assert!(img.norm() < 1e-12);
        }
    }

    #[test]
    fn catalog_outcomes() {
        let failed = |from, to| -> Vec<String> {
            verify_catalog(from, to).unwrap().into_iter().filter(|c| !c.annihilated).map(|c| c.name).collect()
        };
        assert!(failed(2, 1).is_empty());
        assert!(failed(4, 3).is_empty());
        assert!(failed(3, 1).is_empty());
        assert_eq!(failed(3, 2), vec!["N_{3->2}^(3)"]);
        assert_eq!(failed(4, 2), vec!["R4 N_{3->2}^(1)", "R4 N_{3->2}^(2)"]);
        let zero: Vec<_> = verify_catalog(3, 1).unwrap().into_iter().filter(|c| c.trivial).collect();
        assert_eq!(zero.len(), 1);
    }

    #[test]
    fn alternating_diagonal_is_null() {
        let fixed = ABOperator::parse(3, "|3,0><1,2| - |2,1><0,3| + h.c.").unwrap();
        assert!(ab_partial_trace(&fixed, 1).unwrap().is_zero());
        // the order-4 third operator reduces to this one
        let r4 = &catalog_null_operators(4, 2).unwrap()[2].operator;
        let once = ab_partial_trace(r4, 1).unwrap();
        assert_eq!(once, fixed);
    }

    #[test]
    fn corrected_coefficients_lie_in_null_space() {
        let ns = compute_null_space(3, 2).unwrap();
        let a = trace_map_matrix(3, 1).unwrap();
        for c in verify_catalog(3, 2).unwrap() {
            let img = &a * nalgebra::DVector::from_column_slice(&c.corrected);
            assert!(img.norm() < 1e-12);
            assert_eq!(c.null_residual < 1e-12, c.annihilated);
            assert!(ns.residual(&c.corrected) < 1e-12);
        }
    }

    #[test]
    fn embedded_tables_agree() {
        let ab = random_pair(4, 3);
        for (from, to) in [(2, 1), (3, 2), (4, 3), (4, 2)] {
            let errs = embedded_table_errors(&computed_table(from, to).unwrap(), &ab).unwrap();
            let worst = errs.iter().flatten().fold(0.0f64, |m, &x| m.max(x));
            assert!(worst < 1e-12, "{from}->{to}: {worst:e}");
        }
    }

    #[test]
    fn embedded_catalog_is_annihilated() {
        let ab = random_pair(3, 9);
        for (from, to) in [(2, 1), (4, 3), (3, 1)] {
            for e in catalog_null_operators(from, to).unwrap() {
                let t = ab.embedded_trace(&e.operator, from - to).unwrap();
                assert!(t.iter().all(|z| z.norm() < 1e-14), "{}", e.name);
            }
        }
    }

    #[test]
    fn basis_rejects_overlap() {
        let a = CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]);
        let b = CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]);
        assert!(ABBasis::new(a, b).is_err());
    }

    #[test]
    fn takagi_recovers_symmetric_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = CMat::from_fn(5, 5, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let v = &g + g.transpose();
        let t = takagi(&v, 1e-14).unwrap();
        assert_eq!(t.len(), 5);
        for (i, (_, ui)) in t.iter().enumerate() {
            for (j, (_, uj)) in t.iter().enumerate() {
                let ip = ui.dotc(uj);
                assert!((ip - C64::new(if i == j { 1.0 } else { 0.0 }, 0.0)).norm() < 1e-10);
            }
        }
        assert!(takagi(&g, 1e-14).is_err());
    }

    fn random_r2(d: usize, count: usize, seed: u64) -> ProjectedState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = Arc::new(SymmetricBasis::new(d, 2).unwrap());
        let states: Vec<CVec> = (0..count)
            .map(|_| CVec::from_fn(d, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).normalize())
            .collect();
        let w: Vec<f64> = (0..count).map(|_| rng.random::<f64>()).collect();
        let s: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|x| x / s).collect();
        ProjectedState::from_pure_states(basis, &states, &w).unwrap()
    }

    #[test]
    fn reconstruction_reduces_for_every_alpha() {
        let r2 = random_r2(4, 5, 1);
        let b3 = Arc::new(SymmetricBasis::new(4, 3).unwrap());
        let red = ReplicaReduction::new(b3.clone(), r2.basis().clone()).unwrap();
        let x0 = eigenbasis_reconstruct(&r2, 0.0, b3.clone()).unwrap();
        let x1 = eigenbasis_reconstruct(&r2, 0.3, b3.clone()).unwrap();
        for x in [&x0, &x1] {
            assert!(frobenius(&(red.reduce(x.matrix()) - r2.matrix())) < 1e-10);
        }
        assert!(frobenius(&(x0.matrix() - x1.matrix())) > 1e-3);
    }

    #[test]
    fn reconstruction_of_pure_product_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let psi = CVec::from_fn(4, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).normalize();
        let b2 = Arc::new(SymmetricBasis::new(4, 2).unwrap());
        let b3 = Arc::new(SymmetricBasis::new(4, 3).unwrap());
        let r2 = ProjectedState::from_pure_states(b2, std::slice::from_ref(&psi), &[1.0]).unwrap();
        let want = ProjectedState::from_pure_states(b3.clone(), &[psi], &[1.0]).unwrap();
        for alpha in [0.0, -0.4, 0.7] {
            let got = eigenbasis_reconstruct(&r2, alpha, b3.clone()).unwrap();
            assert!(frobenius(&(got.matrix() - want.matrix())) < 1e-10);
        }
    }

    #[test]
    fn alpha_freedom_is_the_alternating_operator() {
        // d(r3)/d(alpha) = sum_n p_n sum_{j<k} s_j s_k embed(|3,0><1,2| - |2,1><0,3| + h.c.)
        let r2 = random_r2(3, 4, 2);
        let b3 = Arc::new(SymmetricBasis::new(3, 3).unwrap());
        let x0 = eigenbasis_reconstruct(&r2, 0.0, b3.clone()).unwrap();
        let x1 = eigenbasis_reconstruct(&r2, 1.0, b3.clone()).unwrap();
        let null3 = ABOperator::parse(3, "|3,0><1,2| - |2,1><0,3| + h.c.").unwrap();
        let mut expect = CMat::zeros(27, 27);
        for t in eigen_schmidt(&r2).unwrap() {
            for (j, (sj, aj)) in t.schmidt.iter().enumerate() {
                for (sk, ak) in t.schmidt.iter().skip(j + 1) {
                    let ab = ABBasis::new(aj.clone(), ak.clone()).unwrap();
                    expect += ab.embed(&null3) * C64::new(t.weight * sj * sk, 0.0);
                }
            }
        }
        let got = b3.embed(&(x1.matrix() - x0.matrix()));
        assert!(frobenius(&(got - expect)) < 1e-10);
    }

    #[test]
    fn table_cells_use_integer_coefficients() {
        let t = printed_table(4, 2).unwrap();
        assert_eq!(t.cells[1][1].coefficient(2, 2), r(2));
        assert!(printed_table(3, 1).is_err());
    }
}
