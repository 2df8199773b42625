//! Survival above a constant barrier, PDE and Monte Carlo against the closed form.
//!
//! Run with `cargo run --release --example forward_constant_barrier`.

use std::f64::consts::SQRT_2;
use std::time::Instant;

use ifpt::forward::{forward_mc, forward_pde, forward_pde_with, PdeOptions};
use ifpt::grid::SpaceTimeGrid;
use ifpt::model::{sigma_reduce, Boundary, DiffusionSpec, InitialDensity, Level};
use ifpt::numerics::normal_cdf;

fn main() -> ifpt::Result<()> {
    // dX = sqrt(2) dB from 0, absorbed below -1
    let spec = DiffusionSpec::brownian(SQRT_2, InitialDensity::delta(0.0), (-1.5, 9.0));
    let reduced = sigma_reduce(&spec)?;
    let barrier = Boundary::constant(Level::At(-1.0), &[0.0, 1.0]);
    let exact = |t: f64| 2.0 * normal_cdf(1.0 / (2.0 * t).sqrt()) - 1.0;

    let grid = SpaceTimeGrid::with_steps(-1.5, 9.0, 5e-3, 0.0, 1.0, 2.5e-4)?;
    let clock = Instant::now();
    let pde = forward_pde(&reduced, &barrier, &grid)?;
    println!(
        "PDE (Crank-Nicolson): p(1) = {:.6}, max error on [0.05, 1] = {:.2e}, {:.2?}",
        pde.p_at(1.0),
        pde.sup_error(exact, 0.05, 1.0),
        clock.elapsed()
    );

    let opts = PdeOptions { front_fixing: true, keep_field: false, ..Default::default() };
    let clock = Instant::now();
    let ff = forward_pde_with(&reduced, &barrier, &grid, &opts)?;
    println!(
        "PDE (front fixing):   p(1) = {:.6}, max error on [0.05, 1] = {:.2e}, {:.2?}",
        ff.p_at(1.0),
        ff.sup_error(exact, 0.05, 1.0),
        clock.elapsed()
    );

    let clock = Instant::now();
    let mc = forward_mc(&spec, &barrier, 100_000, 1000, 7)?;
    let se = mc.se_at(1.0).unwrap_or(0.0);
    println!(
        "Monte Carlo:          p(1) = {:.6} +/- {:.1e}, |error| / SE = {:.2}, {:.2?}",
        mc.p_at(1.0),
        se,
        (mc.p_at(1.0) - exact(1.0)).abs() / se,
        clock.elapsed()
    );
    println!("closed form:          p(1) = {:.6}", exact(1.0));
    Ok(())
}
