//! Reduction of a diffusion to unit volatility `sqrt 2` and the corner compatibility check.
//!
//! Run with `cargo run --release --example sigma_reduction`.

use std::f64::consts::SQRT_2;

use ifpt::model::{compatibility_residuals, sigma_reduce, Coefficient, DiffusionSpec, InitialDensity, SurvivalCurve};

fn main() -> ifpt::Result<()> {
    // state-dependent volatility with a mean-reverting drift
    let spec = DiffusionSpec::new(
        Coefficient::space(|x| -0.5 * x),
        Coefficient::space(|x| 1.0 + 0.3 * (x / 2.0).tanh()),
        InitialDensity::gamma2(),
        (-6.0, 20.0),
    );
    let reduced = sigma_reduce(&spec)?;
    println!("   x      y = Y(x)   X(Y(x)) - x   reduced drift");
    for x in [-2.0, 0.0, 1.0, 3.0, 8.0] {
        let y = reduced.y_of(x, 0.0);
        println!("{x:5.1}  {y:10.5}  {:12.2e}  {:12.5}", reduced.x_of(y, 0.0) - x, reduced.mu(y, 0.0));
    }

    // p = e^{-t} against u0 = x e^{-x}: first-order compatible since pdot(0) = -1 = -u0'(0)
    let brownian = DiffusionSpec::brownian(SQRT_2, InitialDensity::gamma2(), (-8.5, 25.0));
    for rate in [1.0, 2.0] {
        let curve = SurvivalCurve::exponential(rate, 1.0, 1000)?;
        for r in compatibility_residuals(&brownian, &curve, 2)? {
            println!(
                "rate {rate}: order {} residual {:+.3e} (original), {:+.3e} (reduced)",
                r.order, r.original, r.reduced
            );
        }
    }
    Ok(())
}
