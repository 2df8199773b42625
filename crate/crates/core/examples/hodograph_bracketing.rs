//! Hodograph strip problem on the exponential case and the bracketing family
//! `Y^{-h}(0, t) < b(t) < Y^{h}(0, t)`.
//!
//! Run with `cargo run --release --example hodograph_bracketing`.

use std::f64::consts::SQRT_2;

use ifpt::grid::SpaceTimeGrid;
use ifpt::hodograph::{run_hodograph, HodographConfig, QuasilinearOptions};
use ifpt::inverse::{epsilon_continuation, PenaltyConfig};
use ifpt::model::{sigma_reduce, DiffusionSpec, InitialDensity, SurvivalCurve};

fn main() -> ifpt::Result<()> {
    let spec = DiffusionSpec::brownian(SQRT_2, InitialDensity::gamma2(), (-8.5, 25.0));
    let reduced = sigma_reduce(&spec)?;
    let curve = SurvivalCurve::exponential(1.0, 1.0, 1000)?;
    let grid = SpaceTimeGrid::with_steps(-8.5, 25.0, 0.01, 0.0, 1.0, 1e-3)?;
    let sol =
        epsilon_continuation(&curve, &reduced, &grid, &PenaltyConfig::with_schedule(vec![1.6e-2, 4e-3, 1e-3], 5e-3))?;

    let cfg = HodographConfig {
        z_eps: None,
        nz: 64,
        h_values: vec![4e-2, 2e-2, 1e-2],
        t_start: None,
        options: QuasilinearOptions::default(),
    };
    let out = run_hodograph(&sol, &curve, &reduced, &cfg)?;
    println!("strip width z_eps = {:.4}, window starts at t = {}", out.z_eps, out.x.t[0]);
    println!("a-priori band for Y_z: [{:.4}, {:.4}]", out.y.band.lower, out.y.band.upper);
    println!("sup |Y - X| on [0.1, 1] = {:.2e}", out.y.y.sup_diff(&out.x, 0.1));
    for m in &out.family {
        println!(
            "h = {:.0e}: strict = {}, width = {:.3}, smallest margin = {:.2e}",
            m.h, m.bracket.strict, m.bracket.width, m.bracket.min_margin
        );
    }
    Ok(())
}
