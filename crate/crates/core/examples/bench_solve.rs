//! Quick timing probe: planted multilinear completion at desk scale.
//! Run: cargo run --release -p tc-core --example bench_solve [p] [r] [dim]

use std::time::Instant;

use tc_core::observation::ObservationSet;
use tc_core::rng::CounterRng;
use tc_core::solver::{solve, CoreTopology, SolverConfig};
use tc_core::tensor::{DenseTensor, Matrix};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let p: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let r: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let dim: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3);

    for seed in 0..seeds {
        let rng = CounterRng::from_seed(seed, &[1]);
        let mut ctr = 0u64;
        let mut draw = || {
            ctr += 1;
            rng.normal(ctr)
        };
        let core = DenseTensor::<f64>::from_fn(&[r, r, r], |_| draw());
        let mats: Vec<Matrix<f64>> = (0..3).map(|_| Matrix::from_fn(dim, r, |_, _| draw())).collect();
        let refs: Vec<&Matrix<f64>> = mats.iter().collect();
        let t = core.multi_mode_product(&refs).unwrap();
        let mask = ObservationSet::<f64>::sample_mask(&[dim, dim, dim], p, 1000 + seed).unwrap();
        let obs = ObservationSet::project(&t, &mask).unwrap();

        let extra: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(0);
        let config = SolverConfig::new(vec![r + extra, r + extra, r + extra]);
        let tick = Instant::now();
        let (model, trace) = solve(&obs, &CoreTopology::Single, &config, None).unwrap();
        let last = trace.records.last().unwrap();
        let taus: Vec<f64> = trace.records.iter().map(|rec| rec.tau_norm).collect();
        let tail: Vec<f64> = taus
            .windows(2)
            .rev()
            .take(8)
            .map(|w| w[1] / w[0])
            .collect();
        println!(
            "seed {seed}: p={p} r={r} d0=+{extra} dim={dim} |O|={} -> {:?} in {} iters, tau={:.3e}, ranks={:?}, {:.2}s tail_ratios={:.3?}",
            obs.len(),
            trace.status,
            last.iter,
            last.tau_norm,
            model.ranks(),
            tick.elapsed().as_secs_f64(),
            tail
        );
    }
}
