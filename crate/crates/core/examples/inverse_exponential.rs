//! Barrier reproducing `p(t) = e^{-t}` for Brownian motion started from `x e^{-x}`.
//! The exact answer is the straight line `b(t) = 2t`.
//!
//! Run with `cargo run --release --example inverse_exponential`.

use std::f64::consts::SQRT_2;
use std::time::Instant;

use ifpt::forward::forward_pde;
use ifpt::grid::SpaceTimeGrid;
use ifpt::inverse::{check_invariants, epsilon_continuation, PenaltyConfig};
use ifpt::model::{sigma_reduce, DiffusionSpec, InitialDensity, SurvivalCurve};

fn main() -> ifpt::Result<()> {
    let spec = DiffusionSpec::brownian(SQRT_2, InitialDensity::gamma2(), (-8.5, 25.0));
    let reduced = sigma_reduce(&spec)?;
    let curve = SurvivalCurve::exponential(1.0, 1.0, 1000)?;
    let grid = SpaceTimeGrid::with_steps(-8.5, 25.0, 0.01, 0.0, 1.0, 1e-3)?;
    let cfg = PenaltyConfig::with_schedule(vec![1.6e-2, 4e-3, 1e-3], 5e-3);

    let clock = Instant::now();
    let sol = epsilon_continuation(&curve, &reduced, &grid, &cfg)?;
    println!("continuation finished in {:.2?}", clock.elapsed());
    for level in &sol.report.levels {
        println!(
            "  eps {:.1e}: {} Newton steps, max residual {:.1e}, change {:?}",
            level.epsilon, level.newton_iterations, level.max_residual, level.diff_from_previous
        );
    }

    println!("   t      b(t)     2t");
    for t in [0.1, 0.25, 0.5, 0.75, 1.0] {
        println!("{t:5.2}  {:8.4}  {:5.2}", sol.b.eval(t).as_f64(), 2.0 * t);
    }

    let back = forward_pde(&reduced, &sol.b, &grid)?;
    println!("round trip: max |p_hat - p| = {:.2e}", back.sup_error(|t| curve.p(t), 0.0, 1.0));
    println!("invariants hold: {}", check_invariants(&sol, &curve, &reduced).holds());
    Ok(())
}
