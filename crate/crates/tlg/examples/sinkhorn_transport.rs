//! Entropy-regularized optimal transport on a small cost matrix: solve,
//! check marginals, and watch the dual objective climb to the primal value.
//!
//! Usage: `cargo run --release --example sinkhorn_transport -- [n] [lambda]`

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlg::ht::{entropic_objective, sinkhorn, sinkhorn_log};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lambda: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10.0);

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cost = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0));
    let plan = sinkhorn(&cost, lambda, 500, 1e-9).expect("sinkhorn");

    println!(
        "{n}x{n} cost, lambda {lambda}: converged = {}, iterations = {}, marginal violation = {:.3e}",
        plan.converged, plan.iterations_used, plan.final_violation
    );
    println!("total mass = {:.12}", plan.total_mass());
    println!(
        "primal objective at the plan = {:.9}",
        entropic_objective(&plan.coupling, &cost, lambda)
    );
    println!("dual objective trace (every 5th iteration):");
    for (i, d) in plan.dual_series.iter().enumerate().step_by(5) {
        println!("  iter {i:>4}: dual {d:.9}  primal-at-iterate {:.9}", plan.objective_series[i]);
    }

    // the log-domain solver agrees with the scaling form
    let r = ndarray::Array1::from_elem(n, 1.0 / n as f64);
    let c = r.clone();
    let log_plan = sinkhorn_log(&cost, lambda, &r, &c, 500, 1e-9).expect("log sinkhorn");
    let max_diff = plan
        .coupling
        .iter()
        .zip(log_plan.coupling.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max |standard - log-domain| = {max_diff:.3e}");

    // a cheap antidiagonal instance: mass concentrates on the diagonal
    let hard = ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]);
    for l in [1.0, 10.0, 50.0] {
        let p = sinkhorn(&hard, l, 500, 1e-12).expect("sinkhorn");
        println!(
            "2x2 antidiagonal, lambda {l:>4}: diagonal mass {:.6}",
            p.coupling[[0, 0]] + p.coupling[[1, 1]]
        );
    }
}
