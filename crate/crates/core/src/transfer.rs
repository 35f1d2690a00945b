//! Transfer of replica data from order `N` to order `M > N`.
//!
//! Operators on `N` replicas, identity-padded to `M` replicas, span the
//! subspace `W` of order-`M` operators whose expectation values are fixed by
//! the order-`N` state. Its orthogonal complement is the null space of the
//! partial trace. A [`TransferMap`] stores an orthonormal basis of `W`, built
//! in the order of a graded operator pool, together with the triangular
//! overlap matrices that convert order-`N` coefficients into order-`M` ones.
//!
//! Operators are handled through the real isometric coordinates of their
//! symmetric-subspace representation (see [`crate::linalg::herm_to_vec`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::binio;
use crate::error::{param, Error, Result};
use crate::fock::FockSector;
use crate::linalg::{herm_to_vec, min_eigenvalue, vec_to_herm, CMat, RMat, C64};
use crate::replica::{ProjectedState, ReplicaReduction, SymmetricBasis};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-9;

/// Upper bound on stored `f64` entries for a map's order-`M` basis.
pub const MAX_MAP_ENTRIES: usize = 40_000_000;

/// Upper bound on the work of a literal product-pool selection.
const MAX_POOL_WORK: f64 = 1e10;

/// Orthonormal generalized Gell-Mann basis of `d x d` Hermitian matrices:
/// index 0 is `1/sqrt(d)`, then symmetric and antisymmetric off-diagonal
/// pairs, then traceless diagonals. Stored sparsely.
#[derive(Debug, Clone)]
pub struct GellMann {
    d: usize,
    entries: Vec<Vec<(usize, usize, C64)>>,
}

impl GellMann {
    pub fn new(d: usize) -> Self {
        let mut entries = Vec::with_capacity(d * d);
        let s = 1.0 / (d as f64).sqrt();
        entries.push((0..d).map(|i| (i, i, C64::new(s, 0.0))).collect());
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for j in 0..d {
            for k in (j + 1)..d {
                entries.push(vec![(j, k, C64::new(h, 0.0)), (k, j, C64::new(h, 0.0))]);
                entries.push(vec![(j, k, C64::new(0.0, -h)), (k, j, C64::new(0.0, h))]);
            }
        }
        for l in 1..d {
            let norm = 1.0 / ((l * (l + 1)) as f64).sqrt();
            let mut e: Vec<_> = (0..l).map(|j| (j, j, C64::new(norm, 0.0))).collect();
            e.push((l, l, C64::new(-(l as f64) * norm, 0.0)));
            entries.push(e);
        }
        Self { d, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn matrix(&self, k: usize) -> CMat {
        let mut m = CMat::zeros(self.d, self.d);
        for &(i, j, v) in &self.entries[k] {
            m[(i, j)] = v;
        }
        m
    }
}

/// A product `G_{a_1} ⊗ ... ⊗ G_{a_N}` of Gell-Mann factors; factor 0 is the
/// identity, so the support is the number of nonzero factors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolOperator {
    pub factors: Vec<u16>,
}

impl PoolOperator {
    pub fn support(&self) -> usize {
        self.factors.iter().filter(|&&f| f != 0).count()
    }
}

/// The product Gell-Mann operators on `order` replicas, ordered by support and
/// then lexicographically.
#[derive(Debug, Clone)]
pub struct OperatorPool {
    order: usize,
    gell_mann: GellMann,
    entries: Vec<PoolOperator>,
}

impl OperatorPool {
    pub fn new(site_dim: usize, order: usize) -> Result<Self> {
        let g = site_dim * site_dim;
        let count = g
            .checked_pow(order as u32)
            .filter(|&c| c <= 1 << 22)
            .ok_or_else(|| Error::Resource(format!("pool of {g}^{order} operators is too large")))?;
        let mut entries: Vec<PoolOperator> = (0..count)
            .map(|mut k| {
                let mut f = vec![0u16; order];
                for r in (0..order).rev() {
                    f[r] = (k % g) as u16;
                    k /= g;
                }
                PoolOperator { factors: f }
            })
            .collect();
        entries.sort_by_key(|e| e.support());
        Ok(Self { order, gell_mann: GellMann::new(site_dim), entries })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolOperator] {
        &self.entries
    }

    /// The operator on the full `d^N` space.
    pub fn full_matrix(&self, k: usize) -> CMat {
        let mut m = CMat::identity(1, 1);
        for &f in &self.entries[k].factors {
            m = m.kronecker(&self.gell_mann.matrix(f as usize));
        }
        m
    }

    /// `V† O V` for pool entry `k`, using the sparse factors.
    pub fn projected(&self, k: usize, basis: &SymmetricBasis) -> CMat {
        assert_eq!(basis.order(), self.order);
        let d = basis.site_dim();
        let n = basis.dim();
        let mut out = CMat::zeros(n, n);
        let factors = &self.entries[k].factors;
        let mut stack: Vec<(usize, usize, C64)> = vec![(0, 0, C64::new(1.0, 0.0))];
        for &f in factors {
            let mut next = Vec::with_capacity(stack.len() * d);
            for &(x, y, v) in &stack {
                for &(i, j, g) in &self.gell_mann.entries[f as usize] {
                    next.push((x * d + i, y * d + j, v * g));
                }
            }
            stack = next;
        }
        for (x, y, v) in stack {
            let (cx, vx) = basis.row(x);
            let (cy, vy) = basis.row(y);
            out[(cx, cy)] += v * (vx * vy);
        }
        out
    }
}

pub fn build_operator_pool(sector: &FockSector, order: usize) -> Result<OperatorPool> {
    OperatorPool::new(sector.dim(), order)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Incremental orthonormalization with one reorthogonalization pass.
#[derive(Debug, Clone)]
struct GramSchmidt {
    len: usize,
    rows: Vec<f64>,
    count: usize,
}

impl GramSchmidt {
    fn new(len: usize) -> Self {
        Self { len, rows: Vec::new(), count: 0 }
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.len..(k + 1) * self.len]
    }

    /// Orthogonalizes `v` against the current rows. Returns the projection
    /// coefficients and the residual norm; `v` is left as the residual.
    fn orthogonalize(&self, v: &mut [f64]) -> (Vec<f64>, f64) {
        let mut coeffs = vec![0.0; self.count];
        for _ in 0..2 {
            let c: Vec<f64> = if self.count * self.len > 1 << 16 {
                (0..self.count).into_par_iter().map(|k| dot(self.row(k), v)).collect()
            } else {
                (0..self.count).map(|k| dot(self.row(k), v)).collect()
            };
            if self.len > 1 << 12 {
                let rows = &self.rows;
                let len = self.len;
                v.par_chunks_mut(1024).enumerate().for_each(|(chunk, vs)| {
                    let off = chunk * 1024;
                    for (k, ck) in c.iter().enumerate() {
                        let r = &rows[k * len + off..k * len + off + vs.len()];
                        for (x, y) in vs.iter_mut().zip(r) {
                            *x -= ck * y;
                        }
                    }
                });
            } else {
                for (k, ck) in c.iter().enumerate() {
                    let r = &self.rows[k * self.len..(k + 1) * self.len];
                    for (x, y) in v.iter_mut().zip(r) {
                        *x -= ck * y;
                    }
                }
            }
            for (a, b) in coeffs.iter_mut().zip(&c) {
                *a += b;
            }
        }
        let norm = dot(v, v).sqrt();
        (coeffs, norm)
    }

    fn push(&mut self, v: &[f64], norm: f64) {
        self.rows.extend(v.iter().map(|x| x / norm));
        self.count += 1;
    }

    fn into_matrix(self) -> RMat {
        RMat::from_row_slice(self.count, self.len, &self.rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    /// Literal product Gell-Mann operators on `N` replicas.
    Product,
    /// Gell-Mann basis of Hermitian operators on the symmetric subspace.
    Symmetric,
}

/// Result of a greedy independent-subset selection.
#[derive(Debug, Clone)]
pub struct Selection {
    /// Pool indices of the accepted operators, in pool order.
    pub indices: Vec<usize>,
    /// Orthonormalized accepted operators, one per row.
    pub ortho: RMat,
    /// `C_{jk} = (o_j | õ_k)`, lower triangular.
    pub overlap: RMat,
    /// Projected accepted operators, one per row.
    pub projected: RMat,
}

/// Walks the pool in order and keeps each operator whose projection onto the
/// symmetric subspace is not in the span of those already kept.
pub fn select_independent(pool: &OperatorPool, basis: &SymmetricBasis) -> Selection {
    let n = basis.dim();
    let candidates: Vec<DVector<f64>> =
        (0..pool.len()).into_par_iter().map(|k| herm_to_vec(&pool.projected(k, basis))).collect();
    greedy_select(&candidates, n * n)
}

fn greedy_select(candidates: &[DVector<f64>], len: usize) -> Selection {
    let scale = candidates.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut gs = GramSchmidt::new(len);
    let mut indices = Vec::new();
    let mut coeff_rows: Vec<Vec<f64>> = Vec::new();
    let mut projected = Vec::new();
    for (k, c) in candidates.iter().enumerate() {
        if gs.count == len {
            break;
        }
        let mut v = c.as_slice().to_vec();
        let (mut coeffs, norm) = gs.orthogonalize(&mut v);
        if norm <= RANK_TOLERANCE * scale {
            continue;
        }
        gs.push(&v, norm);
        coeffs.push(norm);
        coeff_rows.push(coeffs);
        indices.push(k);
        projected.extend_from_slice(c.as_slice());
    }
    let s = indices.len();
    let overlap = RMat::from_fn(s, s, |j, k| coeff_rows[j].get(k).copied().unwrap_or(0.0));
    Selection { indices, ortho: gs.into_matrix(), overlap, projected: RMat::from_row_slice(s, len, &projected) }
}

/// Selection over the Gell-Mann basis of the symmetric subspace itself; the
/// basis is already orthonormal.
fn symmetric_selection(basis: &SymmetricBasis) -> Selection {
    let n = basis.dim();
    let g = GellMann::new(n);
    let rows: Vec<DVector<f64>> = (0..g.len()).map(|k| herm_to_vec(&g.matrix(k))).collect();
    let mut m = RMat::zeros(rows.len(), n * n);
    for (k, r) in rows.iter().enumerate() {
        m.set_row(k, &r.transpose());
    }
    Selection { indices: (0..rows.len()).collect(), ortho: m.clone(), overlap: RMat::identity(rows.len(), rows.len()), projected: m }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapKey {
    pub sites: usize,
    pub particles: usize,
    pub lower: usize,
    pub upper: usize,
    pub tolerance: f64,
}

/// Transfer map from order `lower` (N) to order `upper` (M).
#[derive(Debug, Clone)]
pub struct TransferMap {
    key: MapKey,
    pool_kind: PoolKind,
    selected: Vec<usize>,
    lower_basis: Arc<SymmetricBasis>,
    upper_basis: Arc<SymmetricBasis>,
    reduction: ReplicaReduction,
    lower_ortho: RMat,
    lower_overlap: RMat,
    upper_ortho: RMat,
    upper_overlap: RMat,
    lift_matrix: RMat,
    condition: f64,
}

impl TransferMap {
    pub fn build(sector: &FockSector, lower: usize, upper: usize) -> Result<Self> {
        if lower == 0 || lower >= upper || upper > crate::replica::MAX_ORDER {
            return param(format!("need 1 <= N < M <= 4, got N={lower}, M={upper}"));
        }
        let d = sector.dim();
        let lower_basis = Arc::new(SymmetricBasis::new(d, lower)?);
        let upper_basis = Arc::new(SymmetricBasis::new(d, upper)?);
        let s = lower_basis.dim().pow(2);
        let upper_len = upper_basis.dim().pow(2);
        if s.saturating_mul(upper_len) > MAX_MAP_ENTRIES {
            return Err(Error::Resource(format!(
                "transfer map {lower}->{upper} over d={d} needs {s}x{upper_len} coefficients"
            )));
        }
        let pool_work = ((d * d) as f64).powi(lower as i32) * (s as f64).powi(2);
        let (kind, selection) = if pool_work <= MAX_POOL_WORK {
            let pool = OperatorPool::new(d, lower)?;
            (PoolKind::Product, select_independent(&pool, &lower_basis))
        } else {
            (PoolKind::Symmetric, symmetric_selection(&lower_basis))
        };
        Self::from_selection(sector, lower_basis, upper_basis, kind, selection)
    }

    fn from_selection(
        sector: &FockSector,
        lower_basis: Arc<SymmetricBasis>,
        upper_basis: Arc<SymmetricBasis>,
        pool_kind: PoolKind,
        sel: Selection,
    ) -> Result<Self> {
        let reduction = ReplicaReduction::new(upper_basis.clone(), lower_basis.clone())?;
        let n_low = lower_basis.dim();
        let s = sel.indices.len();
        let upper_len = upper_basis.dim().pow(2);
        let lifted: Vec<DVector<f64>> = (0..s)
            .into_par_iter()
            .map(|j| {
                let op = vec_to_herm(sel.projected.row(j).transpose().as_slice(), n_low);
                herm_to_vec(&reduction.extend(&op))
            })
            .collect();
        let mut gs = GramSchmidt::new(upper_len);
        let mut overlap = RMat::zeros(s, s);
        let scale = lifted.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (j, v) in lifted.iter().enumerate() {
            let mut w = v.as_slice().to_vec();
            let (coeffs, norm) = gs.orthogonalize(&mut w);
            if norm <= RANK_TOLERANCE * scale {
                return Err(Error::Construction(format!(
                    "lifted operator {j} is dependent on its predecessors (residual {norm:.3e})"
                )));
            }
            for (k, c) in coeffs.iter().enumerate() {
                overlap[(j, k)] = *c;
            }
            overlap[(j, j)] = norm;
            gs.push(&w, norm);
        }
        let sv = overlap.clone().svd(false, false).singular_values;
        let condition = sv.max() / sv.min();
        let lift_matrix = overlap
            .solve_lower_triangular(&sel.overlap)
            .ok_or_else(|| Error::Construction("singular overlap matrix".into()))?;
        Ok(Self {
            key: MapKey {
                sites: sector.sites(),
                particles: sector.particles(),
                lower: lower_basis.order(),
                upper: upper_basis.order(),
                tolerance: RANK_TOLERANCE,
            },
            pool_kind,
            selected: sel.indices,
            lower_basis,
            upper_basis,
            reduction,
            lower_ortho: sel.ortho,
            lower_overlap: sel.overlap,
            upper_ortho: gs.into_matrix(),
            upper_overlap: overlap,
            lift_matrix,
            condition,
        })
    }

    pub fn key(&self) -> MapKey {
        self.key
    }

    pub fn lower(&self) -> usize {
        self.key.lower
    }

    pub fn upper(&self) -> usize {
        self.key.upper
    }

    pub fn pool_kind(&self) -> PoolKind {
        self.pool_kind
    }

    /// `S_N`, the number of independent order-`N` operators.
    pub fn rank(&self) -> usize {
        self.selected.len()
    }

    /// Dimension of the Hermitian operators on the order-`M` symmetric subspace.
    pub fn upper_rank(&self) -> usize {
        self.upper_basis.dim().pow(2)
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn lower_basis(&self) -> &Arc<SymmetricBasis> {
        &self.lower_basis
    }

    pub fn upper_basis(&self) -> &Arc<SymmetricBasis> {
        &self.upper_basis
    }

    pub fn reduction(&self) -> &ReplicaReduction {
        &self.reduction
    }

    /// Rows are the orthonormalized order-`N` operators `õ^N`.
    pub fn lower_ortho(&self) -> &RMat {
        &self.lower_ortho
    }

    /// Rows are the leading orthonormalized order-`M` operators `õ^M`.
    pub fn upper_ortho(&self) -> &RMat {
        &self.upper_ortho
    }

    pub fn lower_overlap(&self) -> &RMat {
        &self.lower_overlap
    }

    pub fn upper_overlap(&self) -> &RMat {
        &self.upper_overlap
    }

    /// `(C^M)^{-1} C^N`: maps `(õ^N | r_N)` to `(õ^M | r_M)`.
    pub fn lift_matrix(&self) -> &RMat {
        &self.lift_matrix
    }

    /// Condition number of the order-`M` overlap matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn lower_coefficients(&self, r_n: &CMat) -> DVector<f64> {
        &self.lower_ortho * herm_to_vec(r_n)
    }

    /// Leading coefficients `(õ^M_i | r_M)`, `i <= S_N`.
    pub fn upper_coefficients(&self, r_m: &CMat) -> DVector<f64> {
        &self.upper_ortho * herm_to_vec(r_m)
    }

    pub fn lift_coefficients(&self, c_n: &DVector<f64>) -> DVector<f64> {
        &self.lift_matrix * c_n
    }

    /// `sum_i c_i õ^M_i`
    pub fn from_upper_coefficients(&self, c_m: &DVector<f64>) -> CMat {
        let v = self.upper_ortho.tr_mul(c_m);
        vec_to_herm(v.as_slice(), self.upper_basis.dim())
    }

    /// Component of an order-`M` operator orthogonal to the leading block,
    /// which lies in the null space of the partial trace.
    pub fn null_part(&self, r_m: &CMat) -> CMat {
        let v = herm_to_vec(r_m);
        let c = &self.upper_ortho * &v;
        let w = v - self.upper_ortho.tr_mul(&c);
        vec_to_herm(w.as_slice(), self.upper_basis.dim())
    }

    /// Orthonormal basis of the null space, completing the leading block with
    /// the Gell-Mann basis of the order-`M` symmetric subspace.
    pub fn null_basis(&self) -> Result<RMat> {
        let len = self.upper_rank();
        if len.saturating_mul(len) > MAX_MAP_ENTRIES {
            return Err(Error::Resource(format!("explicit null basis needs {len}x{len} entries")));
        }
        let mut gs = GramSchmidt::new(len);
        for k in 0..self.rank() {
            gs.rows.extend(self.upper_ortho.row(k).iter());
            gs.count += 1;
        }
        let g = GellMann::new(self.upper_basis.dim());
        let mut null = Vec::new();
        for k in 0..g.len() {
            if gs.count == len {
                break;
            }
            let mut v = herm_to_vec(&g.matrix(k)).as_slice().to_vec();
            let (_, norm) = gs.orthogonalize(&mut v);
            if norm > 1e-6 {
                gs.push(&v, norm);
                null.extend(gs.row(gs.count - 1).iter().copied());
            }
        }
        let count = null.len() / len;
        Ok(RMat::from_row_slice(count, len, &null))
    }

    const MAGIC: [u8; 8] = *b"RCTMAP01";
    const VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&Self::MAGIC)?;
        binio::put_u32(&mut w, Self::VERSION)?;
        for v in [self.key.sites, self.key.particles, self.key.lower, self.key.upper] {
            binio::put_u32(&mut w, v as u32)?;
        }
        binio::put_f64(&mut w, self.key.tolerance)?;
        binio::put_u32(&mut w, matches!(self.pool_kind, PoolKind::Symmetric) as u32)?;
        binio::put_u64(&mut w, self.selected.len() as u64)?;
        for &i in &self.selected {
            binio::put_u64(&mut w, i as u64)?;
        }
        for m in [&self.lower_ortho, &self.lower_overlap, &self.upper_ortho, &self.upper_overlap] {
            binio::put_f64s(&mut w, m.transpose().as_slice())?;
        }
        binio::put_f64(&mut w, self.condition)?;
        w.flush()?;
        Ok(())
    }

    /// Loads a cached map, failing if it was built for a different sector,
    /// pair of orders or tolerance.
    pub fn load(path: &Path, sector: &FockSector, lower: usize, upper: usize) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        binio::expect_magic(&mut r, &Self::MAGIC)?;
        let version = binio::get_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::Format(format!("transfer map version {version}, expected {}", Self::VERSION)));
        }
        let stored: Vec<usize> = (0..4).map(|_| binio::get_u32(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
        let tol = binio::get_f64(&mut r)?;
        let want = [sector.sites(), sector.particles(), lower, upper];
        if stored != want || tol != RANK_TOLERANCE {
            return Err(Error::Format(format!(
                "cached map is for (L, n, N, M) = {stored:?}, tolerance {tol:e}; requested {want:?}"
            )));
        }
        let kind = if binio::get_u32(&mut r)? == 1 { PoolKind::Symmetric } else { PoolKind::Product };
        let s = binio::get_u64(&mut r)? as usize;
        let lower_basis = Arc::new(SymmetricBasis::new(sector.dim(), lower)?);
        let upper_basis = Arc::new(SymmetricBasis::new(sector.dim(), upper)?);
        let ln = lower_basis.dim().pow(2);
        let un = upper_basis.dim().pow(2);
        if s != ln {
            return Err(Error::Format(format!("cached map has {s} operators, expected {ln}")));
        }
        let selected = (0..s).map(|_| binio::get_u64(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
        let mut read = |rows: usize, cols: usize| -> Result<RMat> {
            Ok(RMat::from_row_slice(rows, cols, &binio::get_f64s(&mut r, rows * cols)?))
        };
        let lower_ortho = read(s, ln)?;
        let lower_overlap = read(s, s)?;
        let upper_ortho = read(s, un)?;
        let upper_overlap = read(s, s)?;
        let condition = binio::get_f64(&mut r)?;
        let lift_matrix = upper_overlap
            .solve_lower_triangular(&lower_overlap)
            .ok_or_else(|| Error::Format("cached overlap matrix is singular".into()))?;
        let reduction = ReplicaReduction::new(upper_basis.clone(), lower_basis.clone())?;
        Ok(Self {
            key: MapKey { sites: sector.sites(), particles: sector.particles(), lower, upper, tolerance: tol },
            pool_kind: kind,
            selected,
            lower_basis,
            upper_basis,
            reduction,
            lower_ortho,
            lower_overlap,
            upper_ortho,
            upper_overlap,
            lift_matrix,
            condition,
        })
    }

    /// Loads the map from `path` if present and valid, otherwise builds and
    /// writes it. A file for a different key is an error, not a rebuild.
    pub fn load_or_build(path: &Path, sector: &FockSector, lower: usize, upper: usize) -> Result<Self> {
        if path.exists() {
            return Self::load(path, sector, lower, upper);
        }
        let map = Self::build(sector, lower, upper)?;
        map.save(path)?;
        Ok(map)
    }
}

pub fn build_transfer_map(sector: &FockSector, lower: usize, upper: usize) -> Result<TransferMap> {
    TransferMap::build(sector, lower, upper)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source_order: usize,
    /// Norm of the part of the order-`N` input outside the selected span.
    pub fit_residual: f64,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone)]
pub struct LiftedEstimate {
    pub state: ProjectedState,
    pub provenance: Provenance,
}

/// Minimal-norm order-`M` operator reproducing `r_N` under the partial trace:
/// leading coefficients `(C^M)^{-1} C^N (õ^N | r_N)`, null coefficients zero.
pub fn lift(r_n: &ProjectedState, map: &TransferMap) -> Result<LiftedEstimate> {
    check_lower(r_n, map)?;
    let v = herm_to_vec(r_n.matrix());
    let c_n = &map.lower_ortho * &v;
    let fit_residual = (v - map.lower_ortho.tr_mul(&c_n)).norm();
    let r = map.from_upper_coefficients(&map.lift_coefficients(&c_n));
    let min_eigenvalue = min_eigenvalue(&r);
    Ok(LiftedEstimate {
        state: ProjectedState::new(map.upper_basis.clone(), r)?,
        provenance: Provenance { source_order: map.lower(), fit_residual, min_eigenvalue },
    })
}

/// Replaces the leading coefficients of `estimate` by those lifted from `r_N`
/// and keeps its null-space component.
pub fn transpose_exact(estimate: &ProjectedState, r_n: &ProjectedState, map: &TransferMap) -> Result<LiftedEstimate> {
    if estimate.order() != map.upper() || estimate.basis().dim() != map.upper_basis.dim() {
        return param("estimate does not match the map's upper order");
    }
    let lifted = lift(r_n, map)?;
    let r = map.null_part(estimate.matrix()) + lifted.state.matrix();
    let min_eigenvalue = min_eigenvalue(&r);
    Ok(LiftedEstimate {
        state: ProjectedState::new(map.upper_basis.clone(), r)?,
        provenance: Provenance { min_eigenvalue, ..lifted.provenance },
    })
}

fn check_lower(r_n: &ProjectedState, map: &TransferMap) -> Result<()> {
    if r_n.order() != map.lower() || r_n.basis().dim() != map.lower_basis.dim() {
        return param(format!("input of order {} does not match map order {}", r_n.order(), map.lower()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::build_sector;
    use crate::linalg::{frobenius, outer, trace, CVec};

    fn random_states(d: usize, count: usize, seed: u64) -> Vec<CVec> {
        let mut s = seed.wrapping_mul(0x2545F4914F6CDD1D) | 1;
        let mut next = || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        (0..count)
            .map(|_| {
                let v = CVec::from_fn(d, |_, _| C64::new(next(), next()));
                let n = v.norm();
                v / C64::new(n, 0.0)
            })
            .collect()
    }

    #[test]
    fn gell_mann_is_orthonormal_and_hermitian() {
        let g = GellMann::new(4);
        assert_eq!(g.len(), 16);
        for a in 0..16 {
            let ma = g.matrix(a);
            assert!(frobenius(&(&ma - ma.adjoint())) == 0.0);
            for b in 0..16 {
                let ip = trace(&(&ma * g.matrix(b))).re;
                assert!((ip - (a == b) as u8 as f64).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pool_is_graded_and_complete() {
        let pool = OperatorPool::new(3, 2).unwrap();
        assert_eq!(pool.len(), 81);
        let supports: Vec<usize> = pool.entries().iter().map(|e| e.support()).collect();
        assert!(supports.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(supports.iter().filter(|&&s| s == 0).count(), 1);
        assert_eq!(supports.iter().filter(|&&s| s == 1).count(), 16);
    }

    #[test]
    fn sparse_projection_matches_dense() {
        let pool = OperatorPool::new(3, 2).unwrap();
        let b = SymmetricBasis::new(3, 2).unwrap();
        for k in [0, 5, 40, 80] {
            let dense = b.project(&pool.full_matrix(k));
            assert!(frobenius(&(dense - pool.projected(k, &b))) < 1e-14);
        }
    }

    /// Independent oracle: numerical rank of the full projected pool via SVD.
    fn svd_rank(pool: &OperatorPool, basis: &SymmetricBasis) -> usize {
        let n = basis.dim();
        let mut m = RMat::zeros(n * n, pool.len());
        for k in 0..pool.len() {
            m.set_column(k, &herm_to_vec(&pool.projected(k, basis)));
        }
        let sv = m.svd(false, false).singular_values;
        let max = sv.max();
        sv.iter().filter(|&&x| x > RANK_TOLERANCE * max).count()
    }

    #[test]
    fn selection_size_equals_svd_rank() {
        for (l, n, order) in [(4, 2, 1), (4, 2, 2), (3, 1, 2), (3, 1, 3), (4, 1, 2)] {
            let s = build_sector(l, n).unwrap();
            let pool = build_operator_pool(&s, order).unwrap();
            let b = SymmetricBasis::new(s.dim(), order).unwrap();
            let sel = select_independent(&pool, &b);
            assert_eq!(sel.indices.len(), svd_rank(&pool, &b), "L={l} n={n} N={order}");
            assert_eq!(sel.indices.len(), b.dim() * b.dim());
            assert_eq!(sel.indices[0], 0);
        }
    }

    #[test]
    fn d6_order2_selection_has_441_operators() {
        let s = build_sector(4, 2).unwrap();
        let pool = build_operator_pool(&s, 2).unwrap();
        assert_eq!(pool.len(), 1296);
        let b = SymmetricBasis::new(6, 2).unwrap();
        let sel = select_independent(&pool, &b);
        assert_eq!(sel.indices.len(), 441);
        assert_eq!(svd_rank(&pool, &b), 441);
        let g = &sel.ortho * sel.ortho.transpose();
        assert!((g - RMat::identity(441, 441)).norm() < 1e-10);
    }

    #[test]
    fn overlaps_are_lower_triangular() {
        let s = build_sector(3, 1).unwrap();
        let map = TransferMap::build(&s, 1, 3).unwrap();
        for m in [map.lower_overlap(), map.upper_overlap()] {
            for j in 0..m.nrows() {
                for k in (j + 1)..m.ncols() {
                    assert_eq!(m[(j, k)], 0.0);
                }
            }
        }
        assert!(map.condition().is_finite());
    }

    #[test]
    fn leading_block_spans_identity_padded_operators() {
        // Project pool operators padded with identities directly at order M.
        let s = build_sector(3, 1).unwrap();
        let map = TransferMap::build(&s, 1, 2).unwrap();
        let pool1 = OperatorPool::new(3, 1).unwrap();
        let pool2 = OperatorPool::new(3, 2).unwrap();
        let b2 = SymmetricBasis::new(3, 2).unwrap();
        for (j, &idx) in map.selected().iter().enumerate() {
            let f = pool1.entries()[idx].factors[0];
            let k = pool2.entries().iter().position(|e| e.factors == vec![f, 0]).unwrap();
            let direct = herm_to_vec(&pool2.projected(k, &b2)) * 3.0f64.sqrt();
            let via = map.upper_ortho().tr_mul(&map.upper_overlap().row(j).transpose());
            assert!((direct - via).norm() < 1e-12, "operator {j}");
        }
    }

    #[test]
    fn lift_reproduces_lower_state_under_partial_trace() {
        for (l, n, lo, hi) in [(3, 1, 1, 2), (3, 1, 1, 3), (3, 1, 2, 3), (4, 1, 2, 4), (4, 2, 1, 3)] {
            let s = build_sector(l, n).unwrap();
            let map = TransferMap::build(&s, lo, hi).unwrap();
            let states = random_states(s.dim(), 7, (l * 10 + hi) as u64);
            let w: Vec<f64> = (1..=7).map(|k| k as f64 / 28.0).collect();
            let r_n = ProjectedState::from_pure_states(map.lower_basis().clone(), &states, &w).unwrap();
            let est = lift(&r_n, &map).unwrap();
            let back = map.reduction().reduce(est.state.matrix());
            assert!(frobenius(&(back - r_n.matrix())) < 1e-10, "L={l} n={n} {lo}->{hi}");
            assert!(est.provenance.fit_residual < 1e-10);
            assert!((trace(est.state.matrix()).re - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn transposition_keeps_null_part_and_fixes_leading_block() {
        let s = build_sector(3, 1).unwrap();
        let map = TransferMap::build(&s, 2, 3).unwrap();
        let states = random_states(3, 6, 5);
        let r2 = ProjectedState::from_pure_states(map.lower_basis().clone(), &states, &[1.0 / 6.0; 6]).unwrap();
        let other = random_states(3, 4, 6);
        let guess = ProjectedState::from_pure_states(map.upper_basis().clone(), &other, &[0.25; 4]).unwrap();
        let fixed = transpose_exact(&guess, &r2, &map).unwrap();
        let back = map.reduction().reduce(fixed.state.matrix());
        assert!(frobenius(&(back - r2.matrix())) < 1e-10);
        let moved = fixed.state.matrix() - guess.matrix();
        let null_of_moved = map.null_part(&moved);
        assert!(frobenius(&null_of_moved) < 1e-10);
        // the true order-3 state is a fixed point
        let truth = ProjectedState::from_pure_states(map.upper_basis().clone(), &states, &[1.0 / 6.0; 6]).unwrap();
        let again = transpose_exact(&truth, &r2, &map).unwrap();
        assert!(frobenius(&(again.state.matrix() - truth.matrix())) < 1e-10);
    }

    #[test]
    fn null_basis_is_annihilated_and_complete() {
        let s = build_sector(3, 1).unwrap();
        let map = TransferMap::build(&s, 2, 3).unwrap();
        let null = map.null_basis().unwrap();
        assert_eq!(null.nrows() + map.rank(), map.upper_rank());
        assert_eq!(map.rank(), 36);
        assert_eq!(map.upper_rank(), 100);
        for k in 0..null.nrows() {
            let op = vec_to_herm(null.row(k).transpose().as_slice(), map.upper_basis().dim());
            assert!(frobenius(&map.reduction().reduce(&op)) < 1e-12);
        }
    }

    #[test]
    fn symmetric_pool_spans_the_same_subspace() {
        let s = build_sector(3, 1).unwrap();
        let prod = TransferMap::build(&s, 2, 3).unwrap();
        let lower = Arc::new(SymmetricBasis::new(3, 2).unwrap());
        let upper = Arc::new(SymmetricBasis::new(3, 3).unwrap());
        let sym = TransferMap::from_selection(&s, lower.clone(), upper, PoolKind::Symmetric, symmetric_selection(&lower))
            .unwrap();
        let states = random_states(3, 5, 8);
        let guess = ProjectedState::from_pure_states(prod.upper_basis().clone(), &states, &[0.2; 5]).unwrap();
        let a = prod.null_part(guess.matrix());
        let b = sym.null_part(guess.matrix());
        assert!(frobenius(&(a - b)) < 1e-10);
    }

    #[test]
    fn cache_round_trip_and_key_mismatch() {
        let s = build_sector(3, 1).unwrap();
        let map = TransferMap::build(&s, 1, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("rc-map-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.bin");
        map.save(&path).unwrap();
        let back = TransferMap::load(&path, &s, 1, 3).unwrap();
        assert_eq!(back.selected(), map.selected());
        assert!((back.lift_matrix() - map.lift_matrix()).norm() < 1e-15);
        assert!(matches!(TransferMap::load(&path, &s, 1, 2), Err(Error::Format(_))));
        let other = build_sector(3, 2).unwrap();
        assert!(matches!(TransferMap::load(&path, &other, 1, 3), Err(Error::Format(_))));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(TransferMap::load(&path, &s, 1, 3), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn oversized_maps_are_refused() {
        let s = build_sector(6, 3).unwrap();
        assert!(matches!(TransferMap::build(&s, 2, 4), Err(Error::Resource(_))));
        let s = build_sector(4, 2).unwrap();
        assert!(matches!(TransferMap::build(&s, 3, 4), Err(Error::Resource(_))));
        assert!(matches!(TransferMap::build(&s, 2, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn lift_rejects_wrong_order() {
        let s = build_sector(3, 1).unwrap();
        let map = TransferMap::build(&s, 1, 2).unwrap();
        let b2 = Arc::new(SymmetricBasis::new(3, 2).unwrap());
        let psi = random_states(3, 1, 1);
        let r2 = ProjectedState::new(b2.clone(), outer(&b2.product_coefficients(&psi[0]), &b2.product_coefficients(&psi[0])))
            .unwrap();
        assert!(lift(&r2, &map).is_err());
    }
}
