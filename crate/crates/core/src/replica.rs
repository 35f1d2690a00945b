//! Replicated density matrices and their permutation-symmetric representation.
//!
//! An order-`N` replica state acts on `d^N` dimensions with replica 1 the most
//! significant digit of the full index. Replica states built from pure-state
//! averages live on the symmetric subspace, spanned by normalized sums over
//! distinct permutations of a multiset of single-copy labels. The isometry `V`
//! onto that subspace is real with exactly one nonzero per row, so it is stored
//! as a row-to-column map.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{param, Error, Result};
use crate::fock::FockSector;
use crate::linalg::{frobenius, real_sandwich, real_sandwich_t, CMat, CVec, RMat, C64};

pub const MAX_ORDER: usize = 4;

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Dimension of the order-`order` symmetric subspace over `d` labels.
pub fn symmetric_dim(d: usize, order: usize) -> usize {
    binomial(d + order - 1, order)
}

#[derive(Debug, Clone)]
pub struct ReplicaState {
    order: usize,
    site_dim: usize,
    matrix: CMat,
}

impl ReplicaState {
    pub fn new(order: usize, site_dim: usize, matrix: CMat) -> Result<Self> {
        let full = site_dim.pow(order as u32);
        if matrix.nrows() != full || matrix.ncols() != full {
            return param(format!(
                "order-{order} replica matrix over d={site_dim} must be {full}x{full}, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            ));
        }
        Ok(Self { order, site_dim, matrix })
    }

    /// `rho^{⊗order}`
    pub fn product(rho: &CMat, order: usize) -> Self {
        let mut m = rho.clone();
        for _ in 1..order {
            m = m.kronecker(rho);
        }
        Self { order, site_dim: rho.nrows(), matrix: m }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn site_dim(&self) -> usize {
        self.site_dim
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMat {
        self.matrix
    }
}

/// Traces out the last `k` replicas.
pub fn partial_trace_replicas(rho: &ReplicaState, k: usize) -> Result<ReplicaState> {
    if k > rho.order {
        return param(format!("cannot trace {k} replicas from an order-{} state", rho.order));
    }
    let keep = rho.site_dim.pow((rho.order - k) as u32);
    let traced = rho.site_dim.pow(k as u32);
    let m = &rho.matrix;
    let out = CMat::from_fn(keep, keep, |a, b| (0..traced).map(|t| m[(a * traced + t, b * traced + t)]).sum());
    ReplicaState::new(rho.order - k, rho.site_dim, out)
}

/// Relabels replicas: replica `r` of the input becomes replica `perm[r]`.
pub fn permute_replicas(rho: &ReplicaState, perm: &[usize]) -> Result<ReplicaState> {
    let n = rho.order;
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return param("replica permutation is not a permutation of 0..order");
    }
    let d = rho.site_dim;
    let full = rho.matrix.nrows();
    let map: Vec<usize> = (0..full)
        .map(|x| {
            let digits = digits_of(x, d, n);
            let mut out = vec![0; n];
            for r in 0..n {
                out[perm[r]] = digits[r];
            }
            index_of_digits(&out, d)
        })
        .collect();
    let mut m = CMat::zeros(full, full);
    for x in 0..full {
        for y in 0..full {
            m[(map[x], map[y])] = rho.matrix[(x, y)];
        }
    }
    ReplicaState::new(n, d, m)
}

/// Traces out replica `index` (0-based).
pub fn trace_out_replica(rho: &ReplicaState, index: usize) -> Result<ReplicaState> {
    if index >= rho.order {
        return param(format!("replica {index} out of range"));
    }
    let mut perm: Vec<usize> = (0..rho.order).collect();
    perm.remove(index);
    perm.push(index);
    // perm currently lists source replicas in target order; invert it
    let mut inv = vec![0; rho.order];
    for (target, &src) in perm.iter().enumerate() {
        inv[src] = target;
    }
    partial_trace_replicas(&permute_replicas(rho, &inv)?, 1)
}

/// Single-copy operator acting on replica `replica` (0-based) of `order` copies.
pub fn replica_operator(single: &CMat, replica: usize, order: usize) -> CMat {
    let d = single.nrows();
    let mut m = CMat::identity(1, 1);
    for r in 0..order {
        let f = if r == replica { single.clone() } else { CMat::identity(d, d) };
        m = m.kronecker(&f);
    }
    m
}

pub(crate) fn digits_of(mut x: usize, d: usize, n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for r in (0..n).rev() {
        out[r] = x % d;
        x /= d;
    }
    out
}

pub(crate) fn index_of_digits(digits: &[usize], d: usize) -> usize {
    digits.iter().fold(0, |acc, &k| acc * d + k)
}

#[derive(Debug, Clone)]
pub struct SymmetricBasis {
    order: usize,
    site_dim: usize,
    multisets: Vec<Vec<usize>>,
    lookup: HashMap<Vec<usize>, usize>,
    row_col: Vec<u32>,
    row_val: Vec<f64>,
}

impl SymmetricBasis {
    pub fn new(site_dim: usize, order: usize) -> Result<Self> {
        if order == 0 || order > MAX_ORDER {
            return param(format!("replica order must be in 1..={MAX_ORDER}, got {order}"));
        }
        if site_dim == 0 {
            return param("site dimension must be positive");
        }
        let full = site_dim
            .checked_pow(order as u32)
            .filter(|&f| f <= 1 << 24)
            .ok_or_else(|| Error::Resource(format!("d^N too large for d={site_dim}, N={order}")))?;
        let mut multisets = Vec::new();
        let mut cur = vec![0usize; order];
        loop {
            multisets.push(cur.clone());
            // next non-decreasing tuple in lexicographic order
            let mut k = order;
            while k > 0 && cur[k - 1] == site_dim - 1 {
                k -= 1;
            }
            if k == 0 {
                break;
            }
            let v = cur[k - 1] + 1;
            for slot in cur.iter_mut().skip(k - 1) {
                *slot = v;
            }
        }
        let lookup: HashMap<Vec<usize>, usize> =
            multisets.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        let mut row_col = vec![0u32; full];
        let mut row_val = vec![0.0; full];
        for x in 0..full {
            let mut key = digits_of(x, site_dim, order);
            key.sort_unstable();
            let col = lookup[&key];
            row_col[x] = col as u32;
            row_val[x] = 1.0 / (distinct_permutations(&key) as f64).sqrt();
        }
        Ok(Self { order, site_dim, multisets, lookup, row_col, row_val })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn site_dim(&self) -> usize {
        self.site_dim
    }

    pub fn dim(&self) -> usize {
        self.multisets.len()
    }

    pub fn full_dim(&self) -> usize {
        self.row_col.len()
    }

    pub fn multiset(&self, i: usize) -> &[usize] {
        &self.multisets[i]
    }

    pub fn index_of(&self, multiset: &[usize]) -> Option<usize> {
        let mut key = multiset.to_vec();
        key.sort_unstable();
        self.lookup.get(&key).copied()
    }

    /// The single nonzero of row `x` of `V`: its column and value.
    pub fn row(&self, x: usize) -> (usize, f64) {
        (self.row_col[x] as usize, self.row_val[x])
    }

    pub fn dense(&self) -> RMat {
        let mut v = RMat::zeros(self.full_dim(), self.dim());
        for x in 0..self.full_dim() {
            v[(x, self.row_col[x] as usize)] = self.row_val[x];
        }
        v
    }

    /// `V† ρ V` for a full-space operator.
    pub fn project(&self, m: &CMat) -> CMat {
        let n = self.dim();
        let mut r = CMat::zeros(n, n);
        for y in 0..self.full_dim() {
            let (cy, vy) = self.row(y);
            for x in 0..self.full_dim() {
                let (cx, vx) = self.row(x);
                r[(cx, cy)] += m[(x, y)] * (vx * vy);
            }
        }
        r
    }

    /// `V r V†`
    pub fn embed(&self, r: &CMat) -> CMat {
        let f = self.full_dim();
        CMat::from_fn(f, f, |x, y| {
            let (cx, vx) = self.row(x);
            let (cy, vy) = self.row(y);
            r[(cx, cy)] * (vx * vy)
        })
    }

    /// `V† ψ^{⊗N}`: component `I` is `sqrt(N!/prod m_k!) prod_k ψ_k^{m_k}`.
    pub fn product_coefficients(&self, psi: &CVec) -> CVec {
        assert_eq!(psi.len(), self.site_dim, "state dimension mismatch");
        CVec::from_iterator(
            self.dim(),
            self.multisets.iter().map(|ms| {
                let amp: C64 = ms.iter().map(|&k| psi[k]).product();
                amp * (distinct_permutations(ms) as f64).sqrt()
            }),
        )
    }
}

fn distinct_permutations(sorted: &[usize]) -> usize {
    let n = sorted.len();
    let mut count = (1..=n).product::<usize>();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        count /= (1..=(j - i)).product::<usize>();
        i = j;
    }
    count
}

pub fn build_symmetric_basis(sector: &FockSector, order: usize) -> Result<SymmetricBasis> {
    SymmetricBasis::new(sector.dim(), order)
}

/// A replica state in symmetric coordinates, `r = V† ρ V`.
#[derive(Debug, Clone)]
pub struct ProjectedState {
    basis: Arc<SymmetricBasis>,
    r: CMat,
}

impl ProjectedState {
    pub fn new(basis: Arc<SymmetricBasis>, r: CMat) -> Result<Self> {
        if r.nrows() != basis.dim() || r.ncols() != basis.dim() {
            return param(format!("projected matrix must be {0}x{0}", basis.dim()));
        }
        Ok(Self { basis, r })
    }

    /// `sum_k w_k (V† ψ_k^{⊗N})(V† ψ_k^{⊗N})†`
    pub fn from_pure_states(basis: Arc<SymmetricBasis>, states: &[CVec], weights: &[f64]) -> Result<Self> {
        if states.len() != weights.len() {
            return param("states and weights differ in length");
        }
        let n = basis.dim();
        let cols: Vec<CVec> = states.par_iter().map(|s| basis.product_coefficients(s)).collect();
        let mut u = CMat::zeros(n, cols.len());
        let mut uw = CMat::zeros(n, cols.len());
        for (k, c) in cols.iter().enumerate() {
            u.set_column(k, c);
            uw.set_column(k, &(c * C64::new(weights[k], 0.0)));
        }
        let r = crate::linalg::zmul(&uw, &u.adjoint());
        Ok(Self { basis, r })
    }

    pub fn basis(&self) -> &Arc<SymmetricBasis> {
        &self.basis
    }

    pub fn order(&self) -> usize {
        self.basis.order()
    }

    pub fn matrix(&self) -> &CMat {
        &self.r
    }

    pub fn into_matrix(self) -> CMat {
        self.r
    }
}

/// Projects a permutation-symmetric replica state onto the symmetric subspace.
/// Fails when the state has weight outside it beyond a relative `1e-8`.
pub fn project_state(rho: &ReplicaState, basis: &Arc<SymmetricBasis>) -> Result<ProjectedState> {
    if rho.order != basis.order() || rho.site_dim != basis.site_dim() {
        return param("replica state does not match the symmetric basis");
    }
    let r = basis.project(&rho.matrix);
    let residual = frobenius(&(basis.embed(&r) - &rho.matrix));
    let scale = frobenius(&rho.matrix).max(f64::MIN_POSITIVE);
    if residual > 1e-8 * scale {
        return Err(Error::Validation(format!(
            "replica state is not supported on the symmetric subspace (relative residual {:.3e})",
            residual / scale
        )));
    }
    ProjectedState::new(basis.clone(), r)
}

pub fn embed_state(state: &ProjectedState) -> ReplicaState {
    ReplicaState::new(state.order(), state.basis.site_dim(), state.basis.embed(&state.r))
        .expect("basis dimensions are consistent")
}

/// `V† O V` for a full-space operator on `N` replicas.
pub fn project_operator(op: &CMat, basis: &SymmetricBasis) -> Result<CMat> {
    if op.nrows() != basis.full_dim() || op.ncols() != basis.full_dim() {
        return param("operator dimension does not match the replica space");
    }
    Ok(basis.project(op))
}

/// Partial trace between symmetric representations.
///
/// With `B_b` the rows of `V_M` whose traced labels equal `b`, the blocks
/// `K_b = V_Nᵀ B_b` give `reduce(r) = sum_b K_b r K_bᵀ`. The adjoint
/// `extend(a) = sum_b K_bᵀ a K_b` equals `V_M† (V_N a V_N† ⊗ 1) V_M`.
#[derive(Debug, Clone)]
pub struct ReplicaReduction {
    from: Arc<SymmetricBasis>,
    to: Arc<SymmetricBasis>,
    blocks: Vec<RMat>,
}

impl ReplicaReduction {
    pub fn new(from: Arc<SymmetricBasis>, to: Arc<SymmetricBasis>) -> Result<Self> {
        if from.site_dim() != to.site_dim() || to.order() >= from.order() {
            return param("reduction needs a lower order over the same site dimension");
        }
        let d = from.site_dim();
        let traced = d.pow((from.order() - to.order()) as u32);
        if traced.saturating_mul(to.dim()).saturating_mul(from.dim()) > crate::transfer::MAX_MAP_ENTRIES {
            return Err(Error::Resource(format!(
                "reduction {} -> {} at d={d} needs {traced} blocks of {}x{}",
                from.order(),
                to.order(),
                to.dim(),
                from.dim()
            )));
        }
        let mut blocks = vec![RMat::zeros(to.dim(), from.dim()); traced];
        for x in 0..to.full_dim() {
            let (cn, vn) = to.row(x);
            for (b, block) in blocks.iter_mut().enumerate() {
                let (cm, vm) = from.row(x * traced + b);
                block[(cn, cm)] += vn * vm;
            }
        }
        Ok(Self { from, to, blocks })
    }

    pub fn from_basis(&self) -> &Arc<SymmetricBasis> {
        &self.from
    }

    pub fn to_basis(&self) -> &Arc<SymmetricBasis> {
        &self.to
    }

    /// Number of traced label tuples.
    pub fn traced_labels(&self) -> usize {
        self.blocks.len()
    }

    pub fn reduce(&self, r: &CMat) -> CMat {
        self.reduce_weighted(r, &vec![1.0; self.blocks.len()])
    }

    /// `sum_b w_b K_b r K_bᵀ`: the reduction with a diagonal operator whose
    /// eigenvalue on traced labels `b` is `w_b` inserted on the traced replicas.
    ///
    /// Terms are summed in label order so results do not depend on the
    /// thread count.
    pub fn reduce_weighted(&self, r: &CMat, weights: &[f64]) -> CMat {
        assert_eq!(weights.len(), self.blocks.len());
        let n = self.to.dim();
        let terms: Vec<CMat> = self
            .blocks
            .par_iter()
            .zip(weights.par_iter())
            .filter(|(_, &w)| w != 0.0)
            .map(|(k, &w)| real_sandwich(k, r) * C64::new(w, 0.0))
            .collect();
        terms.into_iter().fold(CMat::zeros(n, n), |a, b| a + b)
    }

    pub fn extend(&self, a: &CMat) -> CMat {
        let m = self.from.dim();
        let terms: Vec<CMat> = self.blocks.par_iter().map(|k| real_sandwich_t(k, a)).collect();
        terms.into_iter().fold(CMat::zeros(m, m), |x, y| x + y)
    }
}
