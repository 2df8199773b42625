//! Full round trip with the regularity diagnostics: free-boundary residual,
//! weak-form straddle, Hoelder exponent and sign changes of the density slope.
//!
//! Run with `cargo run --release --example regularity_diagnostics`.

use std::f64::consts::SQRT_2;

use ifpt::diagnostics::{round_trip, RoundTripConfig, Tolerances};
use ifpt::grid::SpaceTimeGrid;
use ifpt::inverse::PenaltyConfig;
use ifpt::model::{sigma_reduce, DiffusionSpec, InitialDensity, SurvivalCurve};

fn main() -> ifpt::Result<()> {
    let spec = DiffusionSpec::brownian(SQRT_2, InitialDensity::gamma2(), (-8.5, 25.0));
    let reduced = sigma_reduce(&spec)?;
    let curve = SurvivalCurve::exponential(1.0, 1.0, 1000)?;
    let cfg = RoundTripConfig {
        grid: SpaceTimeGrid::with_steps(-8.5, 25.0, 0.01, 0.0, 1.0, 1e-3)?,
        penalty: PenaltyConfig::with_schedule(vec![1.6e-2, 4e-3, 1e-3], 5e-3),
        mc_paths: 20_000,
        mc_steps: 1000,
        seed: 7,
        window: (0.1, 1.0),
        deltas: None,
        weak_times: 10,
        lag_range: None,
        tolerances: Tolerances::default(),
    };
    let rt = round_trip(&curve, &reduced, &cfg, "regularity_diagnostics example")?;
    for m in &rt.report.metrics {
        let value = m.value.map_or("-".into(), |v| format!("{v:.3e}"));
        println!("{:<28} {:>10}  {:?} {:.2e}  {:?}", m.name, value, m.relation, m.tolerance, m.status);
    }
    if let Some(h) = &rt.holder {
        println!("Hoelder slope {:.3} +/- {:.3} over {} lags", h.alpha, h.standard_error, h.lags.len());
    }
    println!("sign changes at the first slices: {:?}", &rt.signs.count[..8]);
    Ok(())
}
