//! Acceptance suite: one PASS/FAIL line per criterion. Expected values come
//! from closed forms evaluated here, not from the library.

use std::f64::consts::SQRT_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use ifpt::cli::{run, Command};
use ifpt::config::RunConfig;
use ifpt::diagnostics::{holder_estimate, round_trip, RoundTrip, RoundTripConfig, Tolerances};
use ifpt::forward::{forward_mc, forward_pde};
use ifpt::grid::SpaceTimeGrid;
use ifpt::hodograph::{run_hodograph, HodographConfig, HodographOutput, QuasilinearOptions};
use ifpt::inverse::{epsilon_continuation, PenaltyConfig};
use ifpt::model::{sigma_reduce, Boundary, DiffusionSpec, InitialDensity, Level, ReducedSpec, SurvivalCurve};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Survival of `sqrt 2 B` from 0 above -1.
fn barrier_oracle(t: f64) -> f64 {
    2.0 * phi(1.0 / (2.0 * t).sqrt()) - 1.0
}

/// `y` in `[0, 1]` with `y e^{-y} = c`, by bisection.
fn lambert_branch(c: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid * (-mid).exp() < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const DX: f64 = 0.01;
const DT: f64 = 1e-3;
const SCHEDULE: [f64; 3] = [1.6e-2, 4e-3, 1e-3];

fn gamma_brownian() -> ReducedSpec {
    sigma_reduce(&DiffusionSpec::brownian(SQRT_2, InitialDensity::gamma2(), (-8.5, 25.0))).unwrap()
}

fn exp_curve() -> SurvivalCurve {
    SurvivalCurve::exponential(1.0, 1.0, 1000).unwrap()
}

fn run3_config(dx: f64, dt: f64) -> RoundTripConfig {
    RoundTripConfig {
        grid: SpaceTimeGrid::with_steps(-8.5, 25.0, dx, 0.0, 1.0, dt).unwrap(),
        penalty: PenaltyConfig::with_schedule(SCHEDULE.to_vec(), 5e-3),
        mc_paths: 20_000,
        mc_steps: 1000,
        seed: 7,
        window: (0.1, 1.0),
        deltas: None,
        weak_times: 10,
        lag_range: None,
        tolerances: Tolerances::default(),
    }
}

struct Run3 {
    reduced: ReducedSpec,
    curve: SurvivalCurve,
    rt: RoundTrip,
    seconds: f64,
}

fn run3() -> &'static Run3 {
    static CELL: OnceLock<Run3> = OnceLock::new();
    CELL.get_or_init(|| {
        let (reduced, curve) = (gamma_brownian(), exp_curve());
        let clock = Instant::now();
        let rt = round_trip(&curve, &reduced, &run3_config(DX, DT), "acceptance run 3").unwrap();
        Run3 { reduced, curve, rt, seconds: clock.elapsed().as_secs_f64() }
    })
}

fn hodograph() -> &'static HodographOutput {
    static CELL: OnceLock<HodographOutput> = OnceLock::new();
    CELL.get_or_init(|| {
        let r = run3();
        let cfg = HodographConfig {
            z_eps: None,
            nz: 64,
            h_values: vec![4e-2, 2e-2, 1e-2],
            t_start: None,
            options: QuasilinearOptions::default(),
        };
        run_hodograph(&r.rt.solution, &r.curve, &r.reduced, &cfg).unwrap()
    })
}

fn c1_constant_barrier_pde() -> Verdict {
    let spec = DiffusionSpec::brownian(SQRT_2, InitialDensity::delta(0.0), (-1.5, 9.0));
    let reduced = sigma_reduce(&spec).unwrap();
    let grid = SpaceTimeGrid::with_steps(-1.5, 9.0, 5e-3, 0.0, 1.0, 2.5e-4).unwrap();
    let clock = Instant::now();
    let pde = forward_pde(&reduced, &Boundary::constant(Level::At(-1.0), &[0.0, 1.0]), &grid).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    let err = pde
        .t
        .iter()
        .zip(&pde.p_hat)
        .filter(|(t, _)| **t >= 0.05 - 1e-12)
        .map(|(t, p)| (p - barrier_oracle(*t)).abs())
        .fold(0.0, f64::max);
    ensure(err <= 5e-3 && secs <= 30.0, format!("max error on [0.05,1] {err:.2e} (<= 5e-3), {secs:.1}s (<= 30s)"))
}

fn c2_monte_carlo() -> Verdict {
    let spec = DiffusionSpec::brownian(SQRT_2, InitialDensity::delta(0.0), (-1.5, 9.0));
    let clock = Instant::now();
    let mc = forward_mc(&spec, &Boundary::constant(Level::At(-1.0), &[0.0, 1.0]), 100_000, 1000, 7).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    let se = mc.se_at(1.0).unwrap();
    let err = (mc.p_at(1.0) - barrier_oracle(1.0)).abs();
    ensure(
        err <= 3.0 * se && se <= 2e-3 && secs <= 30.0,
        format!("|p_MC(1) - oracle| {err:.2e} (<= 3 SE = {:.2e}), SE {se:.2e} (<= 2e-3), {secs:.1}s", 3.0 * se),
    )
}

fn c3_round_trip() -> Verdict {
    let r = run3();
    let pde_err = r.rt.pde.t.iter().zip(&r.rt.pde.p_hat).map(|(t, p)| (p - (-t).exp()).abs()).fold(0.0, f64::max);
    let clock = Instant::now();
    let fine_grid = SpaceTimeGrid::with_steps(-8.5, 25.0, DX / 2.0, 0.0, 1.0, DT / 2.0).unwrap();
    let cfg = PenaltyConfig::with_schedule(SCHEDULE.to_vec(), 5e-3);
    let fine = epsilon_continuation(&r.curve, &r.reduced, &fine_grid, &cfg).unwrap();
    let secs = r.seconds + clock.elapsed().as_secs_f64();
    let coarse = &r.rt.solution.b;
    let mut gap: f64 = 0.0;
    let mut exact_gap: f64 = 0.0;
    for &t in coarse.knots() {
        let (a, b) = (coarse.eval(t), fine.b.eval(t));
        match (a, b) {
            (Level::At(a), Level::At(b)) => {
                gap = gap.max((a - b).abs());
                exact_gap = exact_gap.max((a - 2.0 * t).abs());
            }
            _ => gap = f64::INFINITY,
        }
    }
    ensure(
        pde_err <= 2e-2 && gap <= 5.0 * DX && secs <= 300.0,
        format!(
            "||forward(b) - p|| {pde_err:.2e} (<= 2e-2), |b - b_fine| {gap:.2e} (<= 5dx = {:.0e}), \
             |b - 2t| {exact_gap:.2e}, {secs:.1}s (<= 300s)",
            5.0 * DX
        ),
    )
}

fn c4_invariants() -> Verdict {
    let r = run3();
    let sol = &r.rt.solution;
    let g = sol.w.grid;
    let (dx, dt) = (g.dx(), g.dt());
    let eps = sol.epsilon_final;
    let mut worst = [f64::NEG_INFINITY; 6];
    for n in sol.start_index..=g.nt {
        let p = r.curve.p(g.t(n));
        let (w, w0, u) = (sol.w.slice(n), sol.w0.slice(n), sol.u.slice(n));
        for j in 1..g.nx {
            worst[0] = worst[0].max(-w[j]);
            worst[1] = worst[1].max(w[j] - (p + eps).min(w0[j]));
            worst[2] = worst[2].max(-u[j]);
            // -d_x w0 by central differences
            worst[3] = worst[3].max(u[j] - (w0[j - 1] - w0[j + 1]) / (2.0 * dx));
        }
        if n > sol.start_index {
            // driftless reduced operator: R = -((d^n - d^{n-1}) / dt - D2 d^n), d = w - w0
            let (wp, w0p) = (sol.w.slice(n - 1), sol.w0.slice(n - 1));
            let d = |j: usize| w[j] - w0[j];
            for j in 1..g.nx {
                let lap = (d(j + 1) - 2.0 * d(j) + d(j - 1)) / (dx * dx);
                let res = -((d(j) - (wp[j] - w0p[j])) / dt - lap);
                worst[4] = worst[4].max(-res);
                worst[5] = worst[5].max(res - sol.m);
            }
        }
    }
    // the w bounds hold exactly up to floating-point rounding
    let ok = worst[0] <= 1e-12
        && worst[1] <= 1e-12
        && worst[2] <= 1e-10
        && worst[3] <= 1e-8
        && worst[4] <= 1e-8
        && worst[5] <= 1e-8;
    ensure(
        ok,
        format!(
            "max(-w) {:.1e}, max(w - min(p+eps, w0)) {:.1e}, max(-u) {:.1e}, max(u + d_x w0) {:.1e}, \
             residual outside [0, m] by {:.1e} / {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
    )
}

fn c5_free_boundary() -> Verdict {
    let r = run3();
    let med = r.rt.fb_outer.median_relative().unwrap_or(f64::INFINITY);
    let weak = r.rt.weak.as_ref().ok_or("no weak bounds")?;
    let smallest = weak.smallest();
    let straddles = smallest.iter().all(|w| w.inf <= w.target && w.target <= w.sup);
    ensure(
        med <= 5e-2 && straddles && !smallest.is_empty(),
        format!(
            "median relative residual {med:.2e} (<= 5e-2), straddle at delta = {:.2e} on {} times: {straddles}",
            smallest.first().map_or(f64::NAN, |w| w.delta),
            smallest.len()
        ),
    )
}

fn c6_hodograph() -> Verdict {
    let r = run3();
    let h = hodograph();
    let b = &r.rt.solution.b;
    let mut edge: f64 = 0.0;
    let mut oracle: f64 = 0.0;
    for (n, &t) in h.x.t.iter().enumerate() {
        if t < 0.1 - 1e-12 {
            continue;
        }
        edge = edge.max((h.y.y.get(n, 0) - b.eval(t).as_f64()).abs());
        for (i, &z) in h.x.z.iter().enumerate() {
            oracle = oracle.max((h.y.y.get(n, i) - (2.0 * t + lambert_branch(z * t.exp()))).abs());
        }
    }
    let sup = h.y.y.sup_diff(&h.x, 0.1);
    ensure(
        edge <= 2.0 * DX && sup <= 2.0 * DX && h.y.band_margin >= 0.0,
        format!(
            "|Y(0) - b| {edge:.2e}, |Y - X| {sup:.2e} (both <= 2dx), band margin {:.2e} (>= 0), |Y - exact X| {oracle:.2e}",
            h.y.band_margin
        ),
    )
}

fn c7_bracketing() -> Verdict {
    let r = run3();
    let h = hodograph();
    let last = h.x.z.len() - 1;
    let mut lines = Vec::new();
    let mut ok = true;
    let mut members: Vec<_> = h.family.iter().collect();
    members.sort_by(|a, b| a.h.total_cmp(&b.h));
    for m in &members {
        let mut strict = true;
        let mut width: f64 = 0.0;
        for (n, &t) in h.x.t.iter().enumerate() {
            let b = r.rt.solution.b.eval(t).as_f64();
            let (lo, hi) = (m.minus.y.get(n, 0), m.plus.y.get(n, 0));
            let x_eps = h.x.get(n, last);
            strict &= lo < b && b < hi && m.minus.y.get(n, last) < x_eps && x_eps < m.plus.y.get(n, last);
            width = width.max(hi - lo);
        }
        ok &= strict;
        lines.push((m.h, strict, width));
    }
    let monotone = lines.windows(2).all(|p| p[0].2 <= p[1].2);
    let text: Vec<String> = lines.iter().map(|(h, s, w)| format!("h={h:.0e} strict={s} width={w:.3}")).collect();
    ensure(ok && monotone, format!("{}, width monotone in h: {monotone}", text.join(", ")))
}

fn c8_regularity() -> Verdict {
    let r = run3();
    let b = &r.rt.solution.b;
    let est = holder_estimate(b, 0.1, 1.0, None).map_err(|e| e.to_string())?;
    // second route: modulus at two lags a factor 4 apart
    let modulus = |lag: f64| {
        let mut m: f64 = 0.0;
        let mut t = 0.1;
        while t + lag <= 1.0 + 1e-12 {
            m = m.max((b.eval(t + lag).as_f64() - b.eval(t).as_f64()).abs());
            t += DT;
        }
        m
    };
    let two_lag = (modulus(0.04) / modulus(0.01)).ln() / 4f64.ln();
    let signs = &r.rt.signs;
    let nonincreasing = signs.count.windows(2).all(|w| w[1] <= w[0]);
    ensure(
        est.reported >= 0.45 && two_lag >= 0.45 && nonincreasing,
        format!(
            "alpha {:.3} (regression), {two_lag:.3} (two lags), both >= 0.45; N(t) nonincreasing: {nonincreasing} \
             (N from {} to {})",
            est.reported,
            signs.count.first().unwrap_or(&0),
            signs.count.last().unwrap_or(&0)
        ),
    )
}

fn c9_degenerate() -> Verdict {
    let reduced = gamma_brownian();
    let grid = SpaceTimeGrid::with_steps(-8.5, 25.0, 0.02, 0.0, 1.0, 2e-3).unwrap();
    let flat = SurvivalCurve::constant_one(1.0, 500).unwrap();
    let sol = epsilon_continuation(&flat, &reduced, &grid, &PenaltyConfig::with_schedule(SCHEDULE.to_vec(), 5e-3))
        .map_err(|e| e.to_string())?;
    let all_neg_inf = sol.b.knots().iter().all(|&t| sol.b.eval(t) == Level::NegInf);
    let back = forward_pde(&reduced, &sol.b, &grid).unwrap();
    let rt_err = back.p_hat.iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
    let free = forward_pde(&reduced, &Boundary::constant(Level::NegInf, &[0.0, 1.0]), &grid).unwrap();
    let free_err = free.p_hat.iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
    ensure(
        all_neg_inf && rt_err <= 1e-12 && free_err <= 1e-8,
        format!(
            "p == 1 gives b == -inf: {all_neg_inf}, round-trip error {rt_err:.1e} (rounding level); \
             b == -inf forward |p - 1| {free_err:.1e} (<= 1e-8)"
        ),
    )
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn c10_determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut dirs = Vec::new();
    for k in 0..2 {
        let mut cfg = RunConfig::load(&configs_dir().join("exponential.toml"), &[]).map_err(|e| e.to_string())?;
        cfg.output_dir = tmp.path().join(format!("run{k}"));
        let out = run(Command::Verify, &cfg).map_err(|e| e.to_string())?;
        dirs.push(out.output_dir);
    }
    let mut names: Vec<_> = std::fs::read_dir(&dirs[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut differing = Vec::new();
    for name in &names {
        let a = std::fs::read_to_string(dirs[0].join(name)).unwrap();
        let b = std::fs::read_to_string(dirs[1].join(name)).unwrap_or_default();
        let same = if name == "manifest.json" {
            // wall time is the one field allowed to differ
            let strip = |s: &str| s.lines().filter(|l| !l.contains("\"wall_time_s\"")).collect::<Vec<_>>().join("\n");
            strip(&a) == strip(&b)
        } else {
            a == b
        };
        if !same {
            differing.push(name.to_string_lossy().to_string());
        }
    }
    ensure(
        differing.is_empty() && names.len() > 5,
        format!("{} artifacts compared, differing: {differing:?} (manifest compared without wall time)", names.len()),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("constant-barrier forward accuracy", c1_constant_barrier_pde),
        ("Monte Carlo cross-check", c2_monte_carlo),
        ("inverse round trip", c3_round_trip),
        ("invariant suite", c4_invariants),
        ("free-boundary residual and weak straddle", c5_free_boundary),
        ("hodograph consistency", c6_hodograph),
        ("bracketing", c7_bracketing),
        ("regularity diagnostics", c8_regularity),
        ("degenerate cases", c9_degenerate),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match verdict {
            Ok(d) => println!("PASS {:>2} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
