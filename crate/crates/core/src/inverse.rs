//! Penalized obstacle scheme for the survival field and barrier extraction.
//!
//! The survival field `w(x,t) = P(X_t > x, tau > t)` solves the variational
//! inequality `max{L w, w - p} = 0` with `L = d_t - d_xx + mu d_x`. It is
//! approximated by `L w = -beta((w - p) / eps)`, `beta(z) = m max(0, z)^3`,
//! and the barrier is read off where `w` leaves the obstacle `p`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::delta_warm_start_time;
use crate::grid::{Field, FieldLabel, SpaceTimeGrid};
use crate::model::{usc_envelope, Boundary, DensityKind, Level, ReducedSpec, SurvivalCurve};
use crate::numerics::{normal_cdf, solve_tridiagonal};

/// How the barrier is read off the penalized field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRule {
    /// First crossing of `w = p - theta`.
    Threshold,
    /// First crossing of `w = p`, moved left to the zero of the linear density
    /// profile `u = |pdot| (x - b)` that holds just outside the penalty layer.
    OuterProfile,
}

/// Penalty parameters and continuation schedule.
#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct PenaltyConfig {
    /// Strictly decreasing penalty widths.
    pub schedule: Vec<f64>,
    /// Penalty magnitude; `max |pdot|` when `None`.
    pub m: Option<f64>,
    /// Newton stopping tolerance on the slice residual (sup norm, PDE units).
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Continuation stops once successive levels differ by less than this.
    pub tol_cont: f64,
    pub extraction: ExtractionRule,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            schedule: (0..6).map(|k| 0.1 * 0.25f64.powi(k)).collect(),
            m: None,
            newton_tol: 1e-10,
            max_newton: 50,
            tol_cont: 1e-3,
            extraction: ExtractionRule::OuterProfile,
        }
    }
}

impl PenaltyConfig {
    pub fn with_schedule(schedule: Vec<f64>, tol_cont: f64) -> Self {
        Self { schedule, tol_cont, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidInput("penalty schedule is empty".into()));
        }
        if self.schedule.iter().any(|e| !(*e > 0.0)) || self.schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidInput("penalty schedule must be positive and strictly decreasing".into()));
        }
        if let Some(m) = self.m {
            if !(m >= 0.0) {
                return Err(Error::InvalidInput("penalty magnitude must be nonnegative".into()));
            }
        }
        if !(self.newton_tol > 0.0) || self.max_newton == 0 {
            return Err(Error::InvalidInput("Newton tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }

    /// Extraction threshold `max(eps_final, 10 newton_tol)`.
    pub fn theta(&self, eps_final: f64) -> f64 {
        eps_final.max(10.0 * self.newton_tol)
    }
}

/// Per-level continuation record.
#[derive(Clone, Debug, Serialize)]
pub struct LevelReport {
    pub epsilon: f64,
    pub newton_iterations: usize,
    pub max_newton_per_slice: usize,
    pub max_residual: f64,
    /// `sup |w_k - w_{k-1}|` against the previous level.
    pub diff_from_previous: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub levels: Vec<LevelReport>,
    pub converged: bool,
    pub m: f64,
    pub theta: f64,
}

/// Output of the continuation: fields in reduced coordinates.
#[derive(Clone, Debug)]
pub struct InverseSolution {
    pub w: Field,
    /// `u = -d_x w`.
    pub u: Field,
    /// `u` with the penalty layer replaced by the outer linear profile
    /// (outer-profile extraction only); zero below the barrier.
    pub u_outer: Option<Field>,
    pub w0: Field,
    pub b: Boundary,
    pub epsilon_final: f64,
    pub m: f64,
    pub theta: f64,
    /// First time level produced by the solver (later than 0 for a point-mass start).
    pub start_index: usize,
    pub report: ConvergenceReport,
}

/// Barrier-free survival `w0(x,t) = P(X_t > x)`.
///
/// Closed form for a driftless point mass, otherwise the discrete solve used
/// by the penalized scheme.
pub fn baseline_distribution(reduced: &ReducedSpec, grid: &SpaceTimeGrid) -> Result<Field> {
    let spec = reduced.spec();
    if let (DensityKind::Delta { at }, true) = (spec.initial_density.kind(), reduced.is_driftless()) {
        let x0 = *at;
        let f = Field::from_fn(*grid, FieldLabel::W0, |x, t| {
            if t <= 0.0 {
                if x < x0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                1.0 - normal_cdf((x - x0) / (2.0 * t).sqrt())
            }
        });
        check_truncation(&f)?;
        return Ok(f);
    }
    let (f, _) = discrete_baseline(reduced, grid, None)?;
    Ok(f)
}

fn check_truncation(w0: &Field) -> Result<()> {
    let g = w0.grid;
    for n in 0..=g.nt {
        if g.t(n) <= 0.0 {
            continue;
        }
        let v = w0.get(n, 0);
        if v < 1.0 - 1e-8 {
            return Err(Error::TruncationTooTight(format!(
                "w0(x_min={}, t={}) = {v}; move the left edge down",
                g.x_min,
                g.t(n)
            )));
        }
    }
    Ok(())
}

/// Start index and initial row for the time stepping.
fn initial_row(
    reduced: &ReducedSpec,
    grid: &SpaceTimeGrid,
    curve: Option<&SurvivalCurve>,
) -> (usize, Vec<f64>, Vec<Vec<f64>>) {
    let spec = reduced.spec();
    let xs = grid.xs();
    match spec.initial_density.kind() {
        DensityKind::Delta { at } => {
            let x0 = *at;
            // start once the barrier is still out of reach: p stays within 1e-10 of 1
            let mut tw = delta_warm_start_time(x0, Level::NegInf, grid.dx(), grid.t_end);
            if let Some(c) = curve {
                let mut lim = grid.t0;
                for n in 0..=grid.nt {
                    if 1.0 - c.p(grid.t(n)) <= 1e-10 {
                        lim = grid.t(n);
                    } else {
                        break;
                    }
                }
                tw = tw.min(lim.max(grid.t(1)));
            }
            let index =
                if grid.t0 >= tw { 0 } else { (((tw - grid.t0) / grid.dt()).round() as usize).clamp(1, grid.nt) };
            let drift0 = spec.mu.eval(x0, 0.0);
            let tail = |t: f64| -> Vec<f64> {
                if t <= 0.0 {
                    xs.iter().map(|&x| if x < x0 { 1.0 } else { 0.0 }).collect()
                } else {
                    let c = x0 + drift0 * t;
                    xs.iter().map(|&x| 1.0 - normal_cdf((x - c) / (2.0 * t).sqrt())).collect()
                }
            };
            let early: Vec<Vec<f64>> = (0..index).map(|n| tail(grid.t(n))).collect();
            (index, tail(grid.t(index)), early)
        }
        _ => (0, spec.initial_density.tail_on_nodes(&xs), Vec::new()),
    }
}

/// Tridiagonal rows of `A w = -w_xx + mu w_x` on nodes `0..nx` (node `nx` is the
/// Dirichlet edge `w = 0`; node 0 carries the reflecting condition `w_x = 0`).
struct SliceOperator {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

fn slice_operator(reduced: &ReducedSpec, grid: &SpaceTimeGrid, t: f64) -> SliceOperator {
    let n = grid.nx;
    let dx = grid.dx();
    let h2 = dx * dx;
    let mut op = SliceOperator { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n] };
    for j in 0..n {
        let mu = reduced.mu(grid.x(j), t);
        let (mut lo, mut di, mut up) = (-1.0 / h2, 2.0 / h2, -1.0 / h2);
        if j > 0 {
            if (mu * dx).abs() <= 2.0 {
                lo -= mu / (2.0 * dx);
                up += mu / (2.0 * dx);
            } else if mu > 0.0 {
                lo -= mu / dx;
                di += mu / dx;
            } else {
                di -= mu / dx;
                up += mu / dx;
            }
        } else {
            // ghost w_{-1} = w_1
            up += lo;
            lo = 0.0;
        }
        op.lower[j] = lo;
        op.diag[j] = di;
        op.upper[j] = up;
    }
    op
}

fn apply_operator(op: &SliceOperator, w: &[f64], out: &mut [f64]) {
    let n = op.diag.len();
    for j in 0..n {
        let mut v = op.diag[j] * w[j];
        if j > 0 {
            v += op.lower[j] * w[j - 1];
        }
        if j + 1 < n {
            v += op.upper[j] * w[j + 1];
        }
        out[j] = v;
    }
}

/// Discrete barrier-free survival with the scheme of the penalized solver.
fn discrete_baseline(
    reduced: &ReducedSpec,
    grid: &SpaceTimeGrid,
    curve: Option<&SurvivalCurve>,
) -> Result<(Field, usize)> {
    let (start, row, early) = initial_row(reduced, grid, curve);
    let mut f = Field::zeros(*grid, FieldLabel::W0);
    for (n, r) in early.iter().enumerate() {
        f.slice_mut(n).copy_from_slice(r);
    }
    let mut w = row;
    w[grid.nx] = 0.0;
    f.slice_mut(start).copy_from_slice(&w);
    let dt = grid.dt();
    let nx = grid.nx;
    for n in start..grid.nt {
        let op = slice_operator(reduced, grid, grid.t(n + 1));
        let lower = op.lower.clone();
        let diag: Vec<f64> = op.diag.iter().map(|d| d + 1.0 / dt).collect();
        let upper = op.upper.clone();
        let mut rhs: Vec<f64> = w[..nx].iter().map(|v| v / dt).collect();
        if !solve_tridiagonal(&lower, &diag, &upper, &mut rhs) {
            return Err(Error::InvalidInput(format!("singular baseline system at step {}", n + 1)));
        }
        w[..nx].copy_from_slice(&rhs);
        w[nx] = 0.0;
        f.slice_mut(n + 1).copy_from_slice(&w);
    }
    check_truncation(&f)?;
    Ok((f, start))
}

#[inline]
fn beta(m: f64, z: f64) -> f64 {
    if z > 0.0 {
        m * z * z * z
    } else {
        0.0
    }
}

#[inline]
fn beta_prime(m: f64, z: f64) -> f64 {
    if z > 0.0 {
        3.0 * m * z * z
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct NewtonStats {
    total: usize,
    max_per_slice: usize,
    max_residual: f64,
}

/// Penalty magnitude: `max |pdot|` over the knots, raised to the steepest
/// discrete slope on the time grid so that `p + eps` stays a discrete supersolution.
pub fn penalty_magnitude(curve: &SurvivalCurve, grid: &SpaceTimeGrid) -> f64 {
    let mut m = curve.sup_abs_slope();
    for n in 0..grid.nt {
        let s = (curve.p(grid.t(n)) - curve.p(grid.t(n + 1))) / grid.dt();
        m = m.max(s);
    }
    m
}

struct PenaltyProblem<'a> {
    curve: &'a SurvivalCurve,
    reduced: &'a ReducedSpec,
    grid: SpaceTimeGrid,
    w0: &'a Field,
    start: usize,
    m: f64,
    newton_tol: f64,
    max_newton: usize,
}

impl PenaltyProblem<'_> {
    /// Time-steps one penalty level; `guess` warm-starts each slice's Newton iteration.
    fn solve(&self, eps: f64, guess: Option<&Field>) -> Result<(Field, NewtonStats)> {
        let g = self.grid;
        let nx = g.nx;
        let dt = g.dt();
        let mut w = Field::zeros(g, FieldLabel::W);
        for n in 0..=self.start {
            w.slice_mut(n).copy_from_slice(self.w0.slice(n));
        }
        let mut stats = NewtonStats::default();
        let mut cur = vec![0.0; nx];
        let mut res = vec![0.0; nx];
        let mut aw = vec![0.0; nx];
        for n in self.start..g.nt {
            let t = g.t(n + 1);
            let p = self.curve.p(t);
            let op = slice_operator(self.reduced, &g, t);
            let prev: Vec<f64> = w.slice(n)[..nx].to_vec();
            match guess {
                Some(gf) => cur.copy_from_slice(&gf.slice(n + 1)[..nx]),
                None => cur.copy_from_slice(&prev),
            }
            let residual = |cur: &[f64], res: &mut [f64], aw: &mut [f64]| -> f64 {
                apply_operator(&op, cur, aw);
                let mut worst = 0.0f64;
                for j in 0..nx {
                    res[j] = (cur[j] - prev[j]) / dt + aw[j] + beta(self.m, (cur[j] - p) / eps);
                    worst = worst.max(res[j].abs());
                }
                worst
            };
            let mut norm = residual(&cur, &mut res, &mut aw);
            let mut iters = 0;
            while norm > self.newton_tol {
                if iters == self.max_newton {
                    return Err(Error::NewtonDivergence { slice: n + 1, residual: norm });
                }
                iters += 1;
                let diag: Vec<f64> =
                    (0..nx).map(|j| op.diag[j] + 1.0 / dt + beta_prime(self.m, (cur[j] - p) / eps) / eps).collect();
                let mut step: Vec<f64> = res.iter().map(|r| -r).collect();
                if !solve_tridiagonal(&op.lower, &diag, &op.upper, &mut step) {
                    return Err(Error::NewtonDivergence { slice: n + 1, residual: norm });
                }
                let mut lambda = 1.0;
                let mut trial = vec![0.0; nx];
                loop {
                    for j in 0..nx {
                        trial[j] = cur[j] + lambda * step[j];
                    }
                    let tn = residual(&trial, &mut res, &mut aw);
                    if tn <= norm || lambda < 1e-4 {
                        cur.copy_from_slice(&trial);
                        norm = tn;
                        break;
                    }
                    lambda *= 0.5;
                }
            }
            stats.total += iters;
            stats.max_per_slice = stats.max_per_slice.max(iters);
            stats.max_residual = stats.max_residual.max(norm);
            let row = w.slice_mut(n + 1);
            row[..nx].copy_from_slice(&cur);
            row[nx] = 0.0;
            // comparison bounds
            let w0row = self.w0.slice(n + 1);
            for j in 0..=nx {
                let v = row[j];
                let upper = (p + eps).min(w0row[j]);
                if v < -1e-10 || v > upper + 1e-10 {
                    return Err(Error::BoundsViolation {
                        slice: n + 1,
                        node: j,
                        detail: format!("w = {v:e} outside [0, {upper:e}]"),
                    });
                }
            }
        }
        Ok((w, stats))
    }
}

/// One penalty level from a cold start.
pub fn solve_penalized(
    curve: &SurvivalCurve,
    reduced: &ReducedSpec,
    grid: &SpaceTimeGrid,
    eps: f64,
    m: Option<f64>,
) -> Result<Field> {
    let (w0, start) = discrete_baseline(reduced, grid, Some(curve))?;
    let m = m.unwrap_or_else(|| penalty_magnitude(curve, grid));
    let problem = PenaltyProblem {
        curve,
        reduced,
        grid: *grid,
        w0: &w0,
        start,
        m,
        newton_tol: PenaltyConfig::default().newton_tol,
        max_newton: PenaltyConfig::default().max_newton,
    };
    Ok(problem.solve(eps, None)?.0)
}

/// `u = -d_x w`: central inside, zero at the reflecting edge, one-sided at the Dirichlet edge.
pub fn density_from_survival(w: &Field) -> Field {
    let g = w.grid;
    let dx = g.dx();
    let mut u = Field::zeros(g, FieldLabel::U);
    for n in 0..=g.nt {
        let row = w.slice(n);
        let out = u.slice_mut(n);
        out[0] = 0.0;
        for j in 1..g.nx {
            out[j] = (row[j - 1] - row[j + 1]) / (2.0 * dx);
        }
        out[g.nx] = (row[g.nx - 1] - row[g.nx]) / dx;
    }
    u
}

fn sup_diff(a: &Field, b: &Field) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs the penalty schedule with warm starts and extracts the barrier.
pub fn epsilon_continuation(
    curve: &SurvivalCurve,
    reduced: &ReducedSpec,
    grid: &SpaceTimeGrid,
    cfg: &PenaltyConfig,
) -> Result<InverseSolution> {
    cfg.validate()?;
    if curve.horizon() < grid.t_end - 1e-12 {
        return Err(Error::InvalidInput(format!(
            "survival curve ends at {} before the grid horizon {}",
            curve.horizon(),
            grid.t_end
        )));
    }
    let (w0, start) = discrete_baseline(reduced, grid, Some(curve))?;
    let m = match cfg.m {
        Some(m) => m,
        None => {
            let m = penalty_magnitude(curve, grid);
            if m == 0.0 && curve.is_strict_decrease() {
                return Err(Error::InvalidInput("penalty magnitude vanished for a decreasing curve".into()));
            }
            m
        }
    };
    let problem = PenaltyProblem {
        curve,
        reduced,
        grid: *grid,
        w0: &w0,
        start,
        m,
        newton_tol: cfg.newton_tol,
        max_newton: cfg.max_newton,
    };
    let mut levels = Vec::new();
    let mut prev: Option<Field> = None;
    let mut converged = false;
    let mut eps_final = cfg.schedule[0];
    for &eps in &cfg.schedule {
        let (w, stats) = problem.solve(eps, prev.as_ref())?;
        let diff = prev.as_ref().map(|p| sup_diff(p, &w));
        levels.push(LevelReport {
            epsilon: eps,
            newton_iterations: stats.total,
            max_newton_per_slice: stats.max_per_slice,
            max_residual: stats.max_residual,
            diff_from_previous: diff,
        });
        prev = Some(w);
        eps_final = eps;
        if matches!(diff, Some(d) if d < cfg.tol_cont) {
            converged = true;
            break;
        }
    }
    let w = prev.expect("schedule is nonempty");
    let u = density_from_survival(&w);
    let theta = cfg.theta(eps_final);
    let (b, u_outer) = match cfg.extraction {
        ExtractionRule::Threshold => (extract_boundary(&w, curve, theta), None),
        ExtractionRule::OuterProfile => {
            let b = extract_boundary_outer(&w, &u, curve, theta);
            let uo = outer_density(&w, &u, curve, &b);
            (b, Some(uo))
        }
    };
    let last_diff = levels.last().and_then(|l| l.diff_from_previous).unwrap_or(f64::INFINITY);
    let solution = InverseSolution {
        w,
        u,
        u_outer,
        w0,
        b,
        epsilon_final: eps_final,
        m,
        theta,
        start_index: start,
        report: ConvergenceReport { levels, converged, m, theta },
    };
    if converged || cfg.schedule.len() == 1 {
        Ok(solution)
    } else {
        Err(Error::ScheduleExhausted { last_diff, solution: Box::new(solution) })
    }
}

/// Rounding allowance when locating the crossing of `w = p`.
const CONTACT_ROUNDING: f64 = 1e-12;

/// First `x` on the slice where `row` drops below `level`, by linear sub-cell interpolation.
/// `None` if node 0 already lies below or no node does.
fn first_crossing(row: &[f64], grid: &SpaceTimeGrid, level: f64) -> Option<f64> {
    if row[0] < level {
        return None;
    }
    let j = row.iter().position(|v| *v < level)?;
    let (a, b) = (row[j - 1] - level, row[j] - level);
    Some(grid.x(j - 1) + grid.dx() * a / (a - b))
}

/// Whether the obstacle is active on slice `n`.
fn in_contact(row: &[f64], p: f64, pdot: f64, theta: f64) -> bool {
    pdot != 0.0 && row.iter().any(|v| *v >= p - 1e-3 * theta)
}

/// `b(t) = inf{x : w(x,t) < p(t) - theta}` on every slice, usc-normalized.
///
/// A slice is `-inf` when the survival slope vanishes, when the obstacle is
/// nowhere active, or when the left edge already lies below the threshold.
pub fn extract_boundary(w: &Field, curve: &SurvivalCurve, theta: f64) -> Boundary {
    let g = w.grid;
    let ts = g.ts();
    let levels = ts
        .iter()
        .enumerate()
        .map(|(n, &t)| {
            let (p, pdot) = (curve.p(t), curve.pdot(t));
            let row = w.slice(n);
            if !in_contact(row, p, pdot, theta) {
                return Level::NegInf;
            }
            first_crossing(row, &g, p - theta).map_or(Level::NegInf, Level::At)
        })
        .collect();
    usc_envelope(&Boundary::new(ts, levels).expect("grid times ascend"))
}

/// Per slice, the first crossing of `w = p` (the outer edge of the penalty layer).
pub fn contact_edges(w: &Field, curve: &SurvivalCurve) -> Vec<Option<f64>> {
    let g = w.grid;
    (0..=g.nt).map(|n| first_crossing(w.slice(n), &g, curve.p(g.t(n)) - CONTACT_ROUNDING)).collect()
}

/// Outer-profile extraction (see [`ExtractionRule::OuterProfile`]).
pub fn extract_boundary_outer(w: &Field, u: &Field, curve: &SurvivalCurve, theta: f64) -> Boundary {
    let g = w.grid;
    let ts = g.ts();
    let levels = ts
        .iter()
        .enumerate()
        .map(|(n, &t)| {
            let (p, pdot) = (curve.p(t), curve.pdot(t));
            let row = w.slice(n);
            if !in_contact(row, p, pdot, theta) || row[0] < p - theta {
                return Level::NegInf;
            }
            let Some(xc) = first_crossing(row, &g, p - CONTACT_ROUNDING) else {
                return Level::NegInf;
            };
            let uc = u.slice_interpolate(n, xc).unwrap_or(0.0).max(0.0);
            Level::At((xc - uc / pdot.abs()).max(g.x_min))
        })
        .collect();
    usc_envelope(&Boundary::new(ts, levels).expect("grid times ascend"))
}

/// Density with the penalty layer replaced by its outer profile.
///
/// On each slice with a finite barrier `b`, nodes below `b` are set to zero and
/// nodes between `b` and the crossing `x_c` of `w = p` to `|pdot| (x - b)`,
/// which joins the computed density continuously at `x_c`.
pub fn outer_density(w: &Field, u: &Field, curve: &SurvivalCurve, b: &Boundary) -> Field {
    let g = w.grid;
    let mut out = u.clone();
    for n in 0..=g.nt {
        let t = g.t(n);
        let Level::At(bv) = b.eval(t) else { continue };
        let (p, slope) = (curve.p(t), curve.pdot(t).abs());
        let xc = first_crossing(w.slice(n), &g, p - CONTACT_ROUNDING).unwrap_or(bv);
        let row = out.slice_mut(n);
        for (j, v) in row.iter_mut().enumerate() {
            let x = g.x(j);
            if x < bv {
                *v = 0.0;
            } else if x < xc {
                *v = slope * (x - bv);
            } else {
                break;
            }
        }
    }
    out
}

/// Largest violations of the comparison bounds, in the sign convention "positive = violated".
#[derive(Clone, Debug, Default, Serialize)]
pub struct InvariantReport {
    /// `max(-w)`.
    pub w_below_zero: f64,
    /// `max(w - min(p + eps, w0))`.
    pub w_above_obstacle: f64,
    /// `max(-u)`.
    pub u_below_zero: f64,
    /// `max(u + d_x w0)`.
    pub u_above_baseline: f64,
    /// `max(-R)` with `R = -L_h (w - w0)`.
    pub residual_below_zero: f64,
    /// `max(R - m)`.
    pub residual_above_m: f64,
}

impl InvariantReport {
    pub fn holds(&self) -> bool {
        self.w_below_zero <= 1e-10
            && self.w_above_obstacle <= 1e-10
            && self.u_below_zero <= 1e-10
            && self.u_above_baseline <= 1e-8
            && self.residual_below_zero <= 1e-8
            && self.residual_above_m <= 1e-8
    }
}

/// Recomputes every nodal invariant from the stored fields.
pub fn check_invariants(sol: &InverseSolution, curve: &SurvivalCurve, reduced: &ReducedSpec) -> InvariantReport {
    let g = sol.w.grid;
    let nx = g.nx;
    let dt = g.dt();
    let u0 = density_from_survival(&sol.w0);
    let mut r = InvariantReport {
        w_below_zero: f64::NEG_INFINITY,
        w_above_obstacle: f64::NEG_INFINITY,
        u_below_zero: f64::NEG_INFINITY,
        u_above_baseline: f64::NEG_INFINITY,
        residual_below_zero: f64::NEG_INFINITY,
        residual_above_m: f64::NEG_INFINITY,
    };
    let mut aw = vec![0.0; nx];
    let mut diff = vec![0.0; nx];
    for n in sol.start_index..=g.nt {
        let t = g.t(n);
        let p = curve.p(t);
        let (w, w0) = (sol.w.slice(n), sol.w0.slice(n));
        let (u, ub) = (sol.u.slice(n), u0.slice(n));
        for j in 0..=nx {
            r.w_below_zero = r.w_below_zero.max(-w[j]);
            r.w_above_obstacle = r.w_above_obstacle.max(w[j] - (p + sol.epsilon_final).min(w0[j]));
            r.u_below_zero = r.u_below_zero.max(-u[j]);
            r.u_above_baseline = r.u_above_baseline.max(u[j] - ub[j]);
        }
        if n > sol.start_index {
            let op = slice_operator(reduced, &g, t);
            for j in 0..nx {
                diff[j] = w[j] - w0[j];
            }
            apply_operator(&op, &diff, &mut aw);
            let (wp, w0p) = (sol.w.slice(n - 1), sol.w0.slice(n - 1));
            for j in 0..nx {
                let lw = (diff[j] - (wp[j] - w0p[j])) / dt + aw[j];
                let res = -lw;
                r.residual_below_zero = r.residual_below_zero.max(-res);
                r.residual_above_m = r.residual_above_m.max(res - sol.m);
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sigma_reduce, DiffusionSpec, InitialDensity};
    use std::f64::consts::SQRT_2;

    fn brownian_delta() -> ReducedSpec {
        sigma_reduce(&DiffusionSpec::brownian(SQRT_2, InitialDensity::delta(0.0), (-8.0, 8.0))).unwrap()
    }

    fn gamma_spec() -> ReducedSpec {
        sigma_reduce(&DiffusionSpec::brownian(SQRT_2, InitialDensity::gamma2(), (-8.5, 25.0))).unwrap()
    }

    #[test]
    fn closed_form_baseline() {
        let g = SpaceTimeGrid::new(-8.0, 8.0, 160, 0.0, 1.0, 10).unwrap();
        let w0 = baseline_distribution(&brownian_delta(), &g).unwrap();
        assert!((w0.get(5, 80) - 0.5).abs() < 1e-15);
        let x = g.x(95);
        assert!((w0.get(10, 95) - (1.0 - normal_cdf(x / SQRT_2))).abs() < 1e-6);
    }

    #[test]
    fn baseline_rejects_tight_truncation() {
        let g = SpaceTimeGrid::new(-2.0, 8.0, 100, 0.0, 1.0, 10).unwrap();
        assert!(matches!(baseline_distribution(&brownian_delta(), &g), Err(Error::TruncationTooTight(_))));
    }

    #[test]
    fn discrete_baseline_starts_from_tail() {
        let g = SpaceTimeGrid::new(-8.5, 25.0, 670, 0.0, 0.2, 20).unwrap();
        let w0 = baseline_distribution(&gamma_spec(), &g).unwrap();
        for j in [170, 200, 300] {
            let x = g.x(j);
            let exact = if x <= 0.0 { 1.0 } else { (1.0 + x) * (-x).exp() };
            assert!((w0.get(0, j) - exact).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn flat_curve_gives_baseline_and_no_barrier() {
        let g = SpaceTimeGrid::new(-8.5, 25.0, 335, 0.0, 1.0, 50).unwrap();
        let curve = SurvivalCurve::constant_one(1.0, 20).unwrap();
        let r = gamma_spec();
        let cfg = PenaltyConfig::with_schedule(vec![0.01], 1e-3);
        let sol = epsilon_continuation(&curve, &r, &g, &cfg).unwrap();
        assert!(sup_diff(&sol.w, &sol.w0) < 1e-12);
        assert!(sol.b.all_neg_inf());
    }

    #[test]
    fn large_epsilon_is_inactive() {
        let g = SpaceTimeGrid::new(-8.5, 25.0, 335, 0.0, 0.3, 30).unwrap();
        let curve = SurvivalCurve::exponential(1.0, 1.0, 100).unwrap();
        let r = gamma_spec();
        let w = solve_penalized(&curve, &r, &g, 10.0, None).unwrap();
        let (w0, _) = discrete_baseline(&r, &g, None).unwrap();
        // beta((w - p)/eps) <= m (1/eps)^3 = 1e-3 per unit time
        assert!(sup_diff(&w, &w0) < 5e-4);
    }

    #[test]
    fn penalized_field_respects_bounds() {
        let g = SpaceTimeGrid::new(-8.5, 25.0, 670, 0.0, 1.0, 200).unwrap();
        let curve = SurvivalCurve::exponential(1.0, 1.0, 200).unwrap();
        let r = gamma_spec();
        let cfg = PenaltyConfig::with_schedule(vec![1.6e-2, 4e-3, 1e-3], 5e-3);
        let sol = epsilon_continuation(&curve, &r, &g, &cfg).unwrap();
        let max_excess = (0..=g.nt)
            .flat_map(|n| {
                let p = curve.p(g.t(n));
                sol.w.slice(n).iter().map(move |w| w - p).collect::<Vec<_>>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max_excess <= 1e-3 * (1.0 + 1e-6));
        let inv = check_invariants(&sol, &curve, &r);
        assert!(inv.holds(), "{inv:?}");
        let diffs: Vec<f64> = sol.report.levels.iter().filter_map(|l| l.diff_from_previous).collect();
        assert!(diffs.windows(2).all(|d| d[1] < d[0]), "{diffs:?}");
    }

    #[test]
    fn kink_extraction() {
        let g = SpaceTimeGrid::new(-1.0, 1.0, 200, 0.0, 1.0, 10).unwrap();
        let curve = SurvivalCurve::exponential(1.0, 1.0, 10).unwrap();
        let c = 0.237;
        let w = Field::from_fn(g, FieldLabel::W, |x, t| {
            let p = curve.p(t);
            p.min(p - (x - c))
        });
        let b = extract_boundary(&w, &curve, 1e-6);
        for l in b.levels() {
            assert!((l.finite().unwrap() - c).abs() <= g.dx());
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(PenaltyConfig::with_schedule(vec![], 1e-3).validate().is_err());
        assert!(PenaltyConfig::with_schedule(vec![1e-2, 1e-2], 1e-3).validate().is_err());
        assert!(PenaltyConfig::default().validate().is_ok());
    }
}
