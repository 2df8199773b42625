//! Checks tying a computed solution to the free-boundary identities and the
//! regularity statements: boundary residual, weak-form bounds, Hölder
//! exponent, sign changes and full round trips.

use serde::Serialize;

use crate::forward::{forward_mc, forward_pde, ForwardResult};
use crate::grid::{Field, SpaceTimeGrid};
use crate::inverse::{contact_edges, epsilon_continuation, InverseSolution, PenaltyConfig};
use crate::model::{Boundary, Level, ReducedSpec, SurvivalCurve};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
    /// Boolean metric: value 1 passes, 0 fails.
    Holds,
}

#[derive(Clone, Debug, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: Option<f64>,
    pub tolerance: f64,
    pub relation: Relation,
    pub status: Status,
    pub note: Option<String>,
}

/// Named metrics, each with its tolerance and verdict.
#[derive(Clone, Debug, Default, Serialize)]
pub struct DiagnosticReport {
    pub provenance: String,
    pub metrics: Vec<Metric>,
}

impl DiagnosticReport {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self { provenance: provenance.into(), metrics: Vec::new() }
    }

    pub fn check(&mut self, name: &str, value: f64, relation: Relation, tolerance: f64) -> Status {
        let ok = match relation {
            Relation::AtMost => value <= tolerance,
            Relation::AtLeast => value >= tolerance,
            Relation::Holds => value == 1.0,
        };
        let status = if ok { Status::Pass } else { Status::Fail };
        let value = value.is_finite().then_some(value);
        self.metrics.push(Metric { name: name.into(), value, tolerance, relation, status, note: None });
        status
    }

    pub fn holds(&mut self, name: &str, ok: bool) -> Status {
        self.check(name, if ok { 1.0 } else { 0.0 }, Relation::Holds, 1.0)
    }

    pub fn skip(&mut self, name: &str, relation: Relation, tolerance: f64, why: &str) {
        self.metrics.push(Metric {
            name: name.into(),
            value: None,
            tolerance,
            relation,
            status: Status::Skipped,
            note: Some(why.into()),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn passed(&self) -> bool {
        self.metrics.iter().all(|m| m.status != Status::Fail)
    }
}

/// Residual of `sigma^2 u_x(b+) + 2 pdot` per slice, absolute and relative to `|2 pdot|`.
#[derive(Clone, Debug, Default, Serialize)]
pub struct FbResidual {
    pub t: Vec<f64>,
    pub absolute: Vec<f64>,
    pub relative: Vec<f64>,
}

impl FbResidual {
    pub fn median_relative(&self) -> Option<f64> {
        median(&self.relative)
    }
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

/// Derivative at `x` of the quadratic through three consecutive nodes from `j`.
fn quadratic_slope(row: &[f64], grid: &SpaceTimeGrid, j: usize, x: f64) -> f64 {
    let h = grid.dx();
    let (x0, x1) = (grid.x(j), grid.x(j + 1));
    let d1 = (row[j + 1] - row[j]) / h;
    let d2 = (row[j + 2] - 2.0 * row[j + 1] + row[j]) / (2.0 * h * h);
    d1 + d2 * (2.0 * x - x0 - x1)
}

/// Shared residual loop: on each slice in `[t1, t2]` the quadratic is anchored at
/// the first node at or above `anchor(n, b)` and differentiated at `b`.
fn residual_series(
    u: &Field,
    b: &Boundary,
    curve: &SurvivalCurve,
    t1: f64,
    t2: f64,
    anchor: impl Fn(usize, f64) -> f64,
) -> FbResidual {
    let g = u.grid;
    let mut out = FbResidual::default();
    for n in 0..=g.nt {
        let t = g.t(n);
        if t < t1 - 1e-12 || t > t2 + 1e-12 {
            continue;
        }
        let Level::At(bv) = b.eval(t) else { continue };
        let a = anchor(n, bv);
        let j = ((a - g.x_min) / g.dx()).ceil().max(0.0) as usize;
        if j + 2 > g.nx {
            continue;
        }
        let ux = quadratic_slope(u.slice(n), &g, j, bv);
        let pdot = curve.pdot(t);
        // sigma^2 = 2 in reduced coordinates
        let r = 2.0 * ux + 2.0 * pdot;
        out.t.push(t);
        out.absolute.push(r.abs());
        out.relative.push(if pdot != 0.0 { r.abs() / (2.0 * pdot.abs()) } else { f64::INFINITY });
    }
    out
}

/// Boundary residual with the 3-point one-sided stencil anchored at the first
/// node strictly above `b + dx/2`.
pub fn fb_residual(u: &Field, b: &Boundary, curve: &SurvivalCurve, t1: f64, t2: f64) -> FbResidual {
    let h = u.grid.dx();
    residual_series(u, b, curve, t1, t2, |_, bv| bv + 0.5 * h + 1e-9 * h)
}

/// Boundary residual of a penalized solution with the stencil anchored beyond
/// the penalty layer (first node at or above the contact edge plus `dx/2`),
/// extrapolated back to `b`.
pub fn fb_residual_outer(sol: &InverseSolution, curve: &SurvivalCurve, t1: f64, t2: f64) -> FbResidual {
    let h = sol.w.grid.dx();
    let edges = contact_edges(&sol.w, curve);
    residual_series(&sol.u, &sol.b, curve, t1, t2, |n, bv| edges[n].unwrap_or(bv).max(bv) + 0.5 * h)
}

#[derive(Clone, Debug, Serialize)]
pub struct WeakBound {
    pub t: f64,
    pub delta: f64,
    pub inf: f64,
    pub sup: f64,
    pub target: f64,
    pub straddle: bool,
}

/// Weak-form bounds over shrinking neighbourhoods, all deltas per target time.
#[derive(Clone, Debug, Default, Serialize)]
pub struct WeakBounds {
    pub rows: Vec<WeakBound>,
}

impl WeakBounds {
    /// Rows at the smallest tested delta.
    pub fn smallest(&self) -> Vec<&WeakBound> {
        let d = self.rows.iter().map(|r| r.delta).fold(f64::INFINITY, f64::min);
        self.rows.iter().filter(|r| r.delta == d).collect()
    }

    pub fn straddle_at_smallest(&self) -> bool {
        let s = self.smallest();
        !s.is_empty() && s.iter().all(|r| r.straddle)
    }
}

/// Inf and sup of `sigma^2 u(x,s) / (x - l(s))` over grid nodes with `x > l(s)`,
/// `s <= t` and distance to `(b(t), t)` below `delta`, where `l` interpolates `b`.
pub fn weak_fb_bounds(
    u: &Field,
    b: &Boundary,
    curve: &SurvivalCurve,
    times: &[f64],
    deltas: &[f64],
) -> Result<WeakBounds> {
    let g = u.grid;
    let mut rows = Vec::new();
    for &t in times {
        let Level::At(bt) = b.eval(t) else {
            return Err(Error::InvalidInput(format!("barrier is -inf at t={t}")));
        };
        let nt = g.nearest_t(t);
        let target = -2.0 * curve.pdot(t);
        for &delta in deltas {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for n in 0..=nt {
                let s = g.t(n);
                if (s - t).abs() >= delta {
                    continue;
                }
                let Level::At(ls) = b.eval(s) else { continue };
                let row = u.slice(n);
                for (j, &uj) in row.iter().enumerate() {
                    let x = g.x(j);
                    if x <= ls || ((x - bt).powi(2) + (s - t).powi(2)).sqrt() >= delta {
                        continue;
                    }
                    let r = 2.0 * uj / (x - ls);
                    lo = lo.min(r);
                    hi = hi.max(r);
                }
            }
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::EmptyNeighborhood { t, delta });
            }
            rows.push(WeakBound { t, delta, inf: lo, sup: hi, target, straddle: lo <= target && target <= hi });
        }
    }
    Ok(WeakBounds { rows })
}

#[derive(Clone, Debug, Serialize)]
pub struct HolderEstimate {
    /// Least-squares slope of the log-modulus.
    pub alpha: f64,
    /// `alpha` capped at 1.
    pub reported: f64,
    pub standard_error: f64,
    pub lags: Vec<f64>,
    pub modulus: Vec<f64>,
}

/// Slope of `log sup_t |b(t + tau) - b(t)|` against `log tau` over geometric lags
/// in `lag_range` (default `[4 dt, window / 8]`, `dt` the mean knot spacing).
pub fn holder_estimate(b: &Boundary, t1: f64, t2: f64, lag_range: Option<(f64, f64)>) -> Result<HolderEstimate> {
    let Some((ts, bs)) = b.finite_window(t1, t2) else {
        return Err(Error::InvalidInput("barrier is -inf inside the Hölder window".into()));
    };
    if ts.len() < 64 {
        return Err(Error::InvalidInput(format!("Hölder window holds {} knots, need 64", ts.len())));
    }
    let n = ts.len() - 1;
    let dt = (ts[n] - ts[0]) / n as f64;
    let (lo, hi) = lag_range.unwrap_or((4.0 * dt, (ts[n] - ts[0]) / 8.0));
    let kmin = ((lo / dt).round() as usize).max(1);
    let kmax = ((hi / dt).round() as usize).min(n);
    if kmax <= kmin {
        return Err(Error::DegenerateRegression(format!("empty lag range [{lo}, {hi}]")));
    }
    let steps = 16;
    let ratio = (kmax as f64 / kmin as f64).powf(1.0 / steps as f64);
    let mut ks: Vec<usize> = (0..=steps).map(|i| (kmin as f64 * ratio.powi(i)).round() as usize).collect();
    ks.dedup();
    let mut lags = Vec::new();
    let mut modulus = Vec::new();
    for k in ks {
        let osc = (0..=n - k).map(|i| (bs[i + k] - bs[i]).abs()).fold(0.0, f64::max);
        if !(osc > 0.0) {
            return Err(Error::DegenerateRegression(format!("zero oscillation at lag {}", k as f64 * dt)));
        }
        lags.push(k as f64 * dt);
        modulus.push(osc);
    }
    if lags.len() < 3 {
        return Err(Error::DegenerateRegression("fewer than three lags".into()));
    }
    let xs: Vec<f64> = lags.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = modulus.iter().map(|v| v.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = sxy / sxx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - my - alpha * (x - mx)).powi(2)).sum();
    let standard_error = (sse / (m - 2.0) / sxx).sqrt();
    Ok(HolderEstimate { alpha, reported: alpha.min(1.0), standard_error, lags, modulus })
}

/// Strict sign alternations of the discrete `v_x` right of `b`, ignoring
/// differences below `1e-10` times the largest `|v|` on that part of the slice.
pub fn sign_changes(row: &[f64], grid: &SpaceTimeGrid, b: Level) -> usize {
    let j0 = match b {
        Level::NegInf => 0,
        Level::At(bv) => (((bv - grid.x_min) / grid.dx()).floor() + 1.0).max(0.0) as usize,
    };
    if j0 + 1 >= row.len() {
        return 0;
    }
    let d: Vec<f64> = row[j0..].windows(2).map(|w| w[1] - w[0]).collect();
    let band = 1e-10 * row[j0..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut count = 0;
    let mut last = 0.0f64;
    for v in d {
        if v.abs() <= band {
            continue;
        }
        if last != 0.0 && v.signum() != last {
            count += 1;
        }
        last = v.signum();
    }
    count
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SignChanges {
    pub t: Vec<f64>,
    pub count: Vec<usize>,
}

impl SignChanges {
    pub fn nonincreasing(&self) -> bool {
        self.count.windows(2).all(|w| w[1] <= w[0])
    }
}

/// `N(t)` over every slice from `start`.
pub fn sign_change_series(v: &Field, b: &Boundary, start: usize) -> SignChanges {
    let g = v.grid;
    let mut out = SignChanges::default();
    for n in start..=g.nt {
        let t = g.t(n);
        out.t.push(t);
        out.count.push(sign_changes(v.slice(n), &g, b.eval(t)));
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct Tolerances {
    pub round_trip: f64,
    pub fb_median: f64,
    pub holder_min: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { round_trip: 2e-2, fb_median: 5e-2, holder_min: 0.45 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundTripConfig {
    pub grid: SpaceTimeGrid,
    pub penalty: PenaltyConfig,
    /// Monte Carlo paths; `0` skips the Monte Carlo leg.
    pub mc_paths: usize,
    pub mc_steps: usize,
    pub seed: u64,
    /// Diagnostic window.
    pub window: (f64, f64),
    /// Neighbourhood radii for the weak bounds; default `[16, 8, 4] dx`.
    pub deltas: Option<Vec<f64>>,
    /// Number of target times for the weak bounds.
    pub weak_times: usize,
    pub lag_range: Option<(f64, f64)>,
    pub tolerances: Tolerances,
}

#[derive(Clone, Debug)]
pub struct RoundTrip {
    pub solution: InverseSolution,
    pub pde: ForwardResult,
    pub mc: Option<ForwardResult>,
    pub fb_stencil: FbResidual,
    pub fb_outer: FbResidual,
    pub weak: Option<WeakBounds>,
    pub holder: Option<HolderEstimate>,
    pub signs: SignChanges,
    pub report: DiagnosticReport,
}

fn sup_error(f: &ForwardResult, curve: &SurvivalCurve) -> f64 {
    f.t.iter().zip(&f.p_hat).map(|(t, p)| (p - curve.p(*t)).abs()).fold(0.0, f64::max)
}

/// Inverse solve, forward re-evaluation (PDE and Monte Carlo) of the extracted
/// barrier, and every diagnostic on the result.
pub fn round_trip(
    curve: &SurvivalCurve,
    reduced: &ReducedSpec,
    cfg: &RoundTripConfig,
    provenance: &str,
) -> Result<RoundTrip> {
    let g = cfg.grid;
    let sol = epsilon_continuation(curve, reduced, &g, &cfg.penalty)?;
    let tol = &cfg.tolerances;
    let mut report = DiagnosticReport::new(provenance);
    let pde = forward_pde(reduced, &sol.b, &g)?;
    report.check("round_trip_pde", sup_error(&pde, curve), Relation::AtMost, tol.round_trip);
    let mc = if cfg.mc_paths > 0 {
        let original = reduced.unmap_boundary(&sol.b);
        let mc = forward_mc(reduced.original(), &original, cfg.mc_paths, cfg.mc_steps, cfg.seed)?;
        let se = mc.standard_errors.as_ref().map_or(0.0, |s| s.iter().fold(0.0, |m: f64, v| m.max(*v)));
        report.check("round_trip_mc", sup_error(&mc, curve), Relation::AtMost, tol.round_trip + 3.0 * se);
        Some(mc)
    } else {
        report.skip("round_trip_mc", Relation::AtMost, tol.round_trip, "monte carlo disabled");
        None
    };
    let (t1, t2) = cfg.window;
    let finite = sol.b.finite_window(t1, t2).is_some();
    let (fb_stencil, fb_outer, weak, holder);
    if finite {
        fb_stencil = fb_residual(&sol.u, &sol.b, curve, t1, t2);
        fb_outer = fb_residual_outer(&sol, curve, t1, t2);
        let med = fb_outer.median_relative().unwrap_or(f64::INFINITY);
        report.check("fb_residual_median", med, Relation::AtMost, tol.fb_median);
        let raw = fb_stencil.median_relative().unwrap_or(f64::INFINITY);
        report.metrics.push(Metric {
            name: "fb_residual_median_stencil".into(),
            value: raw.is_finite().then_some(raw),
            tolerance: tol.fb_median,
            relation: Relation::AtMost,
            status: Status::Skipped,
            note: Some("literal stencil at b + dx/2, inside the penalty layer; informational".into()),
        });
        let deltas = cfg.deltas.clone().unwrap_or_else(|| vec![16.0 * g.dx(), 8.0 * g.dx(), 4.0 * g.dx()]);
        let k = cfg.weak_times.max(1);
        let times: Vec<f64> = (0..k)
            .map(|i| {
                let t = if k == 1 { t2 } else { t1 + (t2 - t1) * i as f64 / (k - 1) as f64 };
                g.t(g.nearest_t(t))
            })
            .collect();
        let w = weak_fb_bounds(&sol.u, &sol.b, curve, &times, &deltas)?;
        report.holds("weak_straddle", w.straddle_at_smallest());
        weak = Some(w);
        let h = holder_estimate(&sol.b, t1, t2, cfg.lag_range)?;
        report.check("holder_exponent", h.reported, Relation::AtLeast, tol.holder_min);
        holder = Some(h);
    } else {
        fb_stencil = FbResidual::default();
        fb_outer = FbResidual::default();
        weak = None;
        holder = None;
        let why = "barrier is -inf on the window";
        report.skip("fb_residual_median", Relation::AtMost, tol.fb_median, why);
        report.skip("weak_straddle", Relation::Holds, 1.0, why);
        report.skip("holder_exponent", Relation::AtLeast, tol.holder_min, why);
    }
    let signs = sign_change_series(&sol.u, &sol.b, sol.start_index);
    report.holds("sign_changes_nonincreasing", signs.nonincreasing());
    let inv = crate::inverse::check_invariants(&sol, curve, reduced);
    report.holds("penalty_invariants", inv.holds());
    Ok(RoundTrip { solution: sol, pde, mc, fb_stencil, fb_outer, weak, holder, signs, report })
}
