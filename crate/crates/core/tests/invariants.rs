//! Cross-module invariants on small sectors.

use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use replica_core::dynamics::{lindblad_rhs, trajectory_replica_average};
use replica_core::fock::{build_hamiltonian, build_sector, measurement_operators, Boundary, FockSector, SectorOperator};
use replica_core::linalg::{frobenius, hermiticity_residual, outer, trace, CMat, CVec, C64};
use replica_core::master::{closure_terms_exact, replica_rhs, ClosureKernel, ReplicaModel};
use replica_core::nullspace::eigenbasis_reconstruct;
use replica_core::observables::bootstrap_band;
use replica_core::replica::{permute_replicas, ProjectedState, ReplicaReduction, SymmetricBasis};
use replica_core::transfer::{lift, transpose_exact, TransferMap};

struct Small {
    sector: FockSector,
    h: CMat,
    ops: Vec<SectorOperator>,
    b2: Arc<SymmetricBasis>,
    b3: Arc<SymmetricBasis>,
    b4: Arc<SymmetricBasis>,
    map23: TransferMap,
}

fn small() -> &'static Small {
    static S: OnceLock<Small> = OnceLock::new();
    S.get_or_init(|| {
        let sector = build_sector(3, 1).unwrap();
        let h = build_hamiltonian(&sector, 0.7, Boundary::Open).matrix().clone();
        let ops = measurement_operators(&sector);
        let d = sector.dim();
        let map23 = TransferMap::build(&sector, 2, 3).unwrap();
        Small {
            b2: map23.lower_basis().clone(),
            b3: map23.upper_basis().clone(),
            b4: Arc::new(SymmetricBasis::new(d, 4).unwrap()),
            sector,
            h,
            ops,
            map23,
        }
    })
}

fn states(d: usize, k: usize) -> impl Strategy<Value = (Vec<CVec>, Vec<f64>)> {
    let vec = prop::collection::vec(-1.0f64..1.0, 2 * d)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(move |v| CVec::from_fn(d, |i, _| C64::new(v[2 * i], v[2 * i + 1])).normalize());
    (prop::collection::vec(vec, 1..=k), prop::collection::vec(0.05f64..1.0, k)).prop_map(|(s, mut w)| {
        w.truncate(s.len());
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        (s, w)
    })
}

fn density(states: &[CVec], w: &[f64]) -> CMat {
    let d = states[0].len();
    states.iter().zip(w).fold(CMat::zeros(d, d), |acc, (s, &x)| acc + outer(s, s) * C64::new(x, 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ensemble_and_eigenbasis_estimates_differ_by_null_operators((s, w) in states(3, 4), alpha in -1.0f64..1.0) {
        let c = small();
        let r2 = ProjectedState::from_pure_states(c.b2.clone(), &s, &w).unwrap();
        let mixture = ProjectedState::from_pure_states(c.b3.clone(), &s, &w).unwrap();
        let eig = eigenbasis_reconstruct(&r2, alpha, c.b3.clone()).unwrap();
        let diff = mixture.matrix() - eig.matrix();
        prop_assert!(frobenius(&c.map23.reduction().reduce(&diff)) < 1e-10);
        prop_assert!(frobenius(&(c.map23.null_part(&diff) - &diff)) < 1e-9);
    }

    #[test]
    fn transposition_is_idempotent_and_exact((s, w) in states(3, 4), (t, v) in states(3, 4)) {
        let c = small();
        let r2 = ProjectedState::from_pure_states(c.b2.clone(), &s, &w).unwrap();
        let other = ProjectedState::from_pure_states(c.b3.clone(), &t, &v).unwrap();
        let once = transpose_exact(&other, &r2, &c.map23).unwrap().state;
        let twice = transpose_exact(&once, &r2, &c.map23).unwrap().state;
        prop_assert!(frobenius(&(once.matrix() - twice.matrix())) < 1e-10);
        prop_assert!(frobenius(&(c.map23.reduction().reduce(once.matrix()) - r2.matrix())) < 1e-10);
        let lifted = lift(&r2, &c.map23).unwrap().state;
        prop_assert!(frobenius(&c.map23.null_part(lifted.matrix())) < 1e-10);
    }

    #[test]
    fn replica_averages_are_exchange_symmetric((s, _) in states(3, 5)) {
        let rho = trajectory_replica_average(&s, 3).unwrap();
        for perm in [[1, 0, 2], [2, 1, 0], [1, 2, 0]] {
            let p = permute_replicas(&rho, &perm).unwrap();
            prop_assert!(frobenius(&(p.matrix() - rho.matrix())) < 1e-12);
        }
    }

    #[test]
    fn lindblad_generator_is_traceless_and_hermitian((s, w) in states(3, 4), gamma in 0.0f64..2.0) {
        let c = small();
        let rho = density(&s, &w);
        let l = lindblad_rhs(&rho, &c.h, &c.ops, gamma).unwrap();
        prop_assert!(trace(&l).norm() < 1e-12);
        prop_assert!(hermiticity_residual(&l) < 1e-12);
    }

    #[test]
    fn exact_closure_reduces_to_lindblad((s, w) in states(3, 5), gamma in 0.0f64..2.0) {
        let c = small();
        let model = ReplicaModel::new(&c.sector, &c.h, &c.ops, gamma).unwrap();
        let kernel = ClosureKernel::new(&model, c.b3.clone(), c.b4.clone()).unwrap();
        let r2 = ProjectedState::from_pure_states(c.b2.clone(), &s, &w).unwrap();
        let r3 = ProjectedState::from_pure_states(c.b3.clone(), &s, &w).unwrap();
        let r4 = ProjectedState::from_pure_states(c.b4.clone(), &s, &w).unwrap();
        let rhs = replica_rhs(&r2, &model, &closure_terms_exact(&r3, &r4, &kernel).unwrap()).unwrap();
        let b1 = Arc::new(SymmetricBasis::new(c.sector.dim(), 1).unwrap());
        let red = ReplicaReduction::new(c.b2.clone(), b1).unwrap();
        let want = lindblad_rhs(&density(&s, &w), &c.h, &c.ops, gamma).unwrap();
        prop_assert!(frobenius(&(red.reduce(&rhs) - want)) < 1e-10);
    }

    #[test]
    fn bootstrap_band_is_shift_equivariant(x in prop::collection::vec(-5.0f64..5.0, 2..40), shift in -3.0f64..3.0, seed in 0u64..100) {
        let a = bootstrap_band(&x, 200, seed).unwrap();
        let y: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let b = bootstrap_band(&y, 200, seed).unwrap();
        prop_assert!(a.sigma >= 0.0);
        prop_assert!((b.mean - a.mean - shift).abs() < 1e-10);
        prop_assert!((b.sigma - a.sigma).abs() < 1e-9);
    }
}
