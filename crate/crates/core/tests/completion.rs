//! Cross-module completion runs: every shipped topology, both scalar types,
//! and the alternative factor strategies.

use tc_core::observation::ObservationSet;
use tc_core::rng::CounterRng;
use tc_core::solver::{
    solve, CoreTopology, FactorStrategy, SolveStatus, SolverConfig,
};
use tc_core::tensor::{DenseTensor, Matrix};

fn planted(dims: &[usize], ranks: &[usize], seed: u64) -> (DenseTensor<f64>, Vec<Matrix<f64>>) {
    let rng = CounterRng::from_seed(seed, &[9]);
    let mut ctr = 0u64;
    let mut draw = || {
        ctr += 1;
        rng.normal(ctr)
    };
    let core = DenseTensor::from_fn(ranks, |_| draw());
    let mats: Vec<Matrix<f64>> = dims
        .iter()
        .zip(ranks)
        .map(|(&d, &r)| Matrix::from_fn(d, r, |_, _| draw()))
        .collect();
    let refs: Vec<&Matrix<f64>> = mats.iter().collect();
    (core.multi_mode_product(&refs).unwrap(), mats)
}

fn observe(t: &DenseTensor<f64>, p: f64, seed: u64) -> ObservationSet<f64> {
    let mask = ObservationSet::sample_mask(t.dims(), p, seed).unwrap();
    ObservationSet::project(t, &mask).unwrap()
}

#[test]
fn completes_with_every_core_topology() {
    let (t, _) = planted(&[10, 10, 10], &[3, 3, 3], 1);
    let obs = observe(&t, 0.6, 2);
    let topologies = [
        CoreTopology::Single,
        CoreTopology::Cp { rank: 6 },
        CoreTopology::Tt {
            weights: vec![3, 3],
        },
        CoreTopology::Tr {
            weights: vec![2, 3, 2],
        },
    ];
    for topo in topologies {
        let mut config = SolverConfig::new(vec![3, 3, 3]);
        config.tol = 1e-3;
        let (mut model, trace) = solve(&obs, &topo, &config, None).unwrap();
        let vals = model.evaluate_at(&obs).unwrap();
        let tau = obs.residual(&vals, true).unwrap();
        assert_eq!(
            trace.status,
            SolveStatus::Converged,
            "{topo:?}: tau {tau:.3e}"
        );
        assert!(model.max_orthonormality_defect() < 1e-8, "{topo:?}");
    }
}

#[test]
fn subsampled_strategy_still_recovers() {
    // c * r observations per row; at this scale c = 3 is below the noise
    // threshold of the alternation, c = 6 converges.
    let (t, _) = planted(&[14, 14, 14], &[2, 2, 2], 3);
    let obs = observe(&t, 0.5, 4);
    let mut config = SolverConfig::new(vec![2, 2, 2]);
    config.factor_strategy = FactorStrategy::SubsampledRowwise { c: 6.0 };
    config.max_outer = 80;
    let (_, trace) = solve(&obs, &CoreTopology::Single, &config, None).unwrap();
    assert_eq!(trace.status, SolveStatus::Converged);
    // The subsample count caps at the row occupancy, so c -> infinity
    // degenerates to the direct solver.
    let mut config_like_direct = SolverConfig::new(vec![2, 2, 2]);
    config_like_direct.factor_strategy = FactorStrategy::SubsampledRowwise { c: 1e9 };
    let (_, t2) = solve(&obs, &CoreTopology::Single, &config_like_direct, None).unwrap();
    let mut config_direct = SolverConfig::new(vec![2, 2, 2]);
    config_direct.factor_strategy = FactorStrategy::DirectRowwise;
    let (_, t3) = solve(&obs, &CoreTopology::Single, &config_direct, None).unwrap();
    assert_eq!(t2.to_csv(false), t3.to_csv(false));
}

#[test]
fn iterative_strategy_still_recovers() {
    let (t, _) = planted(&[12, 12, 12], &[2, 2, 2], 5);
    let obs = observe(&t, 0.5, 6);
    let mut config = SolverConfig::new(vec![2, 2, 2]);
    config.factor_strategy = FactorStrategy::Iterative {
        max_mv: 400,
        atol: 1e-10,
    };
    let (_, trace) = solve(&obs, &CoreTopology::Single, &config, None).unwrap();
    assert_eq!(trace.status, SolveStatus::Converged);
}

#[test]
fn single_precision_pipeline_runs() {
    // The whole stack is generic over the scalar; f32 completes an easy
    // instance at a loose tolerance.
    let rng = CounterRng::from_seed(7, &[11]);
    let mut ctr = 0u64;
    let mut draw = || {
        ctr += 1;
        rng.normal(ctr) as f32
    };
    let core = DenseTensor::<f32>::from_fn(&[2, 2, 2], |_| draw());
    let mats: Vec<Matrix<f32>> = (0..3).map(|_| Matrix::from_fn(10, 2, |_, _| draw())).collect();
    let refs: Vec<&Matrix<f32>> = mats.iter().collect();
    let t = core.multi_mode_product(&refs).unwrap();
    let mask = ObservationSet::<f32>::sample_mask(&[10, 10, 10], 0.6, 8).unwrap();
    let obs = ObservationSet::project(&t, &mask).unwrap();
    let mut config = SolverConfig::new(vec![2, 2, 2]);
    config.tol = 1e-3;
    let (model, trace) = solve(&obs, &CoreTopology::Single, &config, None).unwrap();
    assert_eq!(trace.status, SolveStatus::Converged);
    assert_eq!(model.ranks(), vec![2, 2, 2]);
}

#[test]
fn tensor_ring_gauge_freedom_does_not_break_convergence() {
    // tr with uneven weights on a planted multilinear-rank-2 tensor.
    let (t, _) = planted(&[9, 9, 9], &[2, 2, 2], 9);
    let obs = observe(&t, 0.7, 10);
    let mut config = SolverConfig::new(vec![2, 2, 2]);
    config.tol = 1e-3;
    let topo = CoreTopology::Tr {
        weights: vec![2, 2, 1],
    };
    let (_, trace) = solve(&obs, &topo, &config, None).unwrap();
    assert_eq!(trace.status, SolveStatus::Converged);
}

#[test]
fn trace_records_monotone_iteration_numbers_and_ranks() {
    let (t, _) = planted(&[10, 10, 10], &[2, 2, 2], 11);
    let obs = observe(&t, 0.5, 12);
    let mut config = SolverConfig::new(vec![4, 4, 4]);
    config.seed = 3;
    let (_, trace) = solve(&obs, &CoreTopology::Single, &config, None).unwrap();
    for (k, rec) in trace.records.iter().enumerate() {
        assert_eq!(rec.iter, k);
        assert_eq!(rec.ranks.len(), 3);
    }
    // Ranks never grow.
    for w in trace.records.windows(2) {
        for m in 0..3 {
            assert!(w[1].ranks[m] <= w[0].ranks[m]);
        }
    }
}
