mod common;

use common::{rng, uniform};
use libra_mil::numkernel::Vector;
use libra_mil::sinkhorn::{sinkhorn, transport_cost, Marginals, SinkhornOptions};
use rand::Rng;

fn simplex(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vector {
    let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    Vector::new(raw.iter().map(|v| v / s).collect())
}

#[test]
fn violation_shrinks_across_checkpoints() {
    let checkpoints = [5, 10, 20, 50, 100];
    let mut monotone = 0;
    for seed in 0..100 {
        let mut r = rng(seed);
        let n = r.random_range(2..12);
        let k = r.random_range(2..12);
        let cost = uniform(&mut r, n, k, 0.0, 2.0);
        let m = Marginals::new(simplex(&mut r, n), simplex(&mut r, k)).unwrap();
        let v: Vec<f64> = checkpoints
            .iter()
            .map(|&it| {
                let opts = SinkhornOptions::new(0.05, it).with_tol(0.0);
                sinkhorn(&cost, &m, &opts).unwrap().0.marginal_violation
            })
            .collect();
        // A checkpoint already at round-off counts as converged.
        if v.windows(2).all(|w| w[1] < w[0] || w[1] <= 1e-15) {
            monotone += 1;
        }
    }
    assert!(monotone >= 95, "{monotone}/100 monotone");
}

#[test]
fn plan_certificates_hold_at_every_iteration_count() {
    for seed in 0..50 {
        let mut r = rng(seed + 300);
        let cost = uniform(&mut r, 6, 5, 0.0, 2.0);
        let m = Marginals::new(simplex(&mut r, 6), simplex(&mut r, 5)).unwrap();
        for iters in [1, 3, 20] {
            let (plan, _) =
                sinkhorn(&cost, &m, &SinkhornOptions::new(0.05, iters).with_tol(0.0)).unwrap();
            assert_eq!(plan.iterations_run, iters);
            assert!(plan.plan.as_slice().iter().all(|&t| t >= 0.0));
            let rows = plan.plan.row_sums();
            let cols = plan.plan.col_sums();
            for (a, b) in rows
                .iter()
                .zip(m.mu().as_slice())
                .chain(cols.iter().zip(m.nu().as_slice()))
            {
                assert!((a - b).abs() <= plan.marginal_violation + 1e-15);
            }
            let c = transport_cost(&plan, &cost).unwrap();
            assert!(c.linear >= 0.0 && c.linear <= 2.0 * plan.total_mass());
        }
    }
}
