//! Entropic transport between two small prototype banks, and how the plan
//! sharpens toward the exact coupling as epsilon shrinks.
//!
//! The marginals here force mass across an expensive entry, which is the
//! slow case for plain scaling: at eps 0.05 the scalings have to grow by
//! about exp(1.0 / 0.05) and 20 iterations leave the rows far from `mu`.

use libra_mil::numkernel::{Matrix, Vector};
use libra_mil::sinkhorn::{sinkhorn, sinkhorn_vjp, transport_cost, Marginals, SinkhornOptions};

fn main() -> libra_mil::Result<()> {
    let cost = Matrix::from_rows(&[[0.1, 1.2, 0.9], [1.1, 0.2, 1.4], [0.8, 1.3, 0.3]])?;
    let marginals = Marginals::new(
        Vector::new(vec![0.5, 0.3, 0.2]),
        Vector::new(vec![0.4, 0.4, 0.2]),
    )?;

    for eps in [1.0, 0.2, 0.05, 0.01] {
        let opts = SinkhornOptions::new(eps, 2000).with_log_domain(eps < 0.02);
        let (plan, _) = sinkhorn(&cost, &marginals, &opts)?;
        let c = transport_cost(&plan, &cost)?;
        println!(
            "eps {eps:<5} iters {:4}  violation {:.1e}  <T,C> {:.4}  entropy {:.4}",
            plan.iterations_run, plan.marginal_violation, c.linear, c.entropy
        );
    }

    // The training default: 20 unrolled iterations, differentiated as run.
    let (plan, tape) = sinkhorn(&cost, &marginals, &SinkhornOptions::default())?;
    println!("\nplan at eps 0.05, 20 iterations:");
    for row in plan.plan.iter_rows() {
        println!(
            "  {:?}",
            row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        );
    }
    // d<T,C>/dC through the unrolled loop.
    let grads = sinkhorn_vjp(&tape, &cost)?;
    println!("\ngradient of <T,C> with respect to C:");
    for row in grads.cost.iter_rows() {
        println!(
            "  {:?}",
            row.iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>()
        );
    }
    Ok(())
}
