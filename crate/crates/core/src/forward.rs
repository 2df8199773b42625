//! Survival probability of a diffusion above a given barrier.
//!
//! Two independent routes: a finite-volume solve of the forward equation
//! `u_t = u_xx - (mu u)_x` with an absorbing moving boundary, and Euler–Maruyama
//! Monte Carlo with a Brownian-bridge crossing correction.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Field, FieldLabel, SpaceTimeGrid};
use crate::model::{Boundary, DensityKind, DiffusionSpec, Level, ReducedSpec};
use crate::numerics::{fmt_sci, lerp_table, normal_cdf, solve_tridiagonal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMethod {
    Pde,
    PdeFrontFixing,
    MonteCarlo,
}

/// Survival curve produced by a forward solve.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub method: ForwardMethod,
    pub t: Vec<f64>,
    pub p_hat: Vec<f64>,
    /// Monte Carlo only.
    pub standard_errors: Option<Vec<f64>>,
    /// PDE only, when the field was kept.
    pub u: Option<Field>,
}

impl ForwardResult {
    /// Linear interpolation of `p_hat`.
    pub fn p_at(&self, t: f64) -> f64 {
        lerp_table(&self.t, &self.p_hat, t)
    }

    pub fn se_at(&self, t: f64) -> Option<f64> {
        self.standard_errors.as_ref().map(|se| lerp_table(&self.t, se, t))
    }

    /// `max |p_hat(t) - f(t)|` over the stored times inside `[t1, t2]`.
    pub fn sup_error(&self, f: impl Fn(f64) -> f64, t1: f64, t2: f64) -> f64 {
        self.t
            .iter()
            .zip(&self.p_hat)
            .filter(|(t, _)| **t >= t1 - 1e-12 && **t <= t2 + 1e-12)
            .map(|(t, p)| (p - f(*t)).abs())
            .fold(0.0, f64::max)
    }

    /// CSV `t,p_hat[,se]`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        match &self.standard_errors {
            Some(se) => {
                writeln!(w, "t,p_hat,se")?;
                for i in 0..self.t.len() {
                    writeln!(w, "{},{},{}", fmt_sci(self.t[i]), fmt_sci(self.p_hat[i]), fmt_sci(se[i]))?;
                }
            }
            None => {
                writeln!(w, "t,p_hat")?;
                for i in 0..self.t.len() {
                    writeln!(w, "{},{}", fmt_sci(self.t[i]), fmt_sci(self.p_hat[i]))?;
                }
            }
        }
        Ok(())
    }
}

/// Time discretization of the forward PDE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    /// Crank–Nicolson after two implicit Euler half-steps.
    CrankNicolson,
    ImplicitEuler,
    Explicit,
}

#[derive(Clone, Debug)]
pub struct PdeOptions {
    pub scheme: TimeScheme,
    /// Solve in the frame `xi = x - b(t)`; needs a finite barrier throughout.
    pub front_fixing: bool,
    /// Start time for a point-mass initial law; chosen automatically when `None`.
    pub warm_start: Option<f64>,
    pub keep_field: bool,
}

impl Default for PdeOptions {
    fn default() -> Self {
        Self { scheme: TimeScheme::CrankNicolson, front_fixing: false, warm_start: None, keep_field: true }
    }
}

const NEG_TOL: f64 = -1e-10;

/// Warm-start time for a point mass at `x0`: the free-space kernel puts less
/// than `1e-12` of its mass below `barrier_at_0`, and is at least 8 cells wide.
pub fn delta_warm_start_time(x0: f64, barrier_at_0: Level, dx: f64, horizon: f64) -> f64 {
    // Phi(-d / sqrt(2 t)) < 1e-12  <=>  d / sqrt(2 t) > 7.034...
    let cap = 0.02 * horizon;
    let t = match barrier_at_0 {
        Level::At(b) if x0 > b => ((x0 - b) * (x0 - b) / 98.98).min(cap),
        _ => cap,
    };
    t.max(32.0 * dx * dx).min(0.5 * horizon)
}

fn gaussian(x: f64, center: f64, t: f64) -> f64 {
    (-(x - center) * (x - center) / (4.0 * t)).exp() / (4.0 * std::f64::consts::PI * t).sqrt()
}

/// Forward solve with default options (Crank–Nicolson, Eulerian grid).
///
/// `boundary` is in the reduced coordinates of `reduced`.
pub fn forward_pde(reduced: &ReducedSpec, boundary: &Boundary, grid: &SpaceTimeGrid) -> Result<ForwardResult> {
    forward_pde_with(reduced, boundary, grid, &PdeOptions::default())
}

pub fn forward_pde_with(
    reduced: &ReducedSpec,
    boundary: &Boundary,
    grid: &SpaceTimeGrid,
    opts: &PdeOptions,
) -> Result<ForwardResult> {
    if opts.scheme == TimeScheme::Explicit {
        let dx = grid.dx();
        let limit = if boundary.all_neg_inf() { 0.5 * dx * dx } else { 0.375 * dx * dx };
        if grid.dt() > limit {
            return Err(Error::CflViolation { dt: grid.dt(), limit });
        }
    }
    if opts.front_fixing {
        front_fixing_solve(reduced, boundary, grid, opts)
    } else {
        eulerian_solve(reduced, boundary, grid, opts)
    }
}

/// Active geometry of one time level on the Eulerian grid.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    /// First node carrying an unknown.
    first: usize,
    /// Distance from the barrier to `first`; `None` when the left edge is a no-flux wall.
    h_left: Option<f64>,
    barrier: Level,
}

fn geometry(grid: &SpaceTimeGrid, b: Level) -> Geometry {
    let dx = grid.dx();
    match b {
        Level::At(bv) if bv > grid.x_min - 0.5 * dx => {
            let s = ((bv + 0.5 * dx - grid.x_min) / dx).ceil().max(0.0) as usize;
            let mut first = s.min(grid.nx + 1);
            if first <= grid.nx && grid.x(first) - bv < 0.5 * dx {
                first += 1;
            }
            let h = if first <= grid.nx { grid.x(first) - bv } else { dx };
            Geometry { first, h_left: Some(h), barrier: b }
        }
        _ => Geometry { first: 0, h_left: None, barrier: b },
    }
}

/// Control volume of node `j`.
fn volume(grid: &SpaceTimeGrid, g: &Geometry, j: usize) -> f64 {
    let dx = grid.dx();
    if j == g.first {
        match g.h_left {
            Some(h) => {
                if j == grid.nx {
                    0.5 * h
                } else {
                    0.5 * (h + dx)
                }
            }
            None => 0.5 * dx,
        }
    } else if j == grid.nx {
        0.5 * dx
    } else {
        dx
    }
}

/// Mass `sum V_j u_j` of the active profile, equal to the integral of its
/// piecewise-linear interpolant vanishing at the barrier.
fn profile_mass(grid: &SpaceTimeGrid, g: &Geometry, u: &[f64]) -> f64 {
    (g.first..=grid.nx).map(|j| volume(grid, g, j) * u[j]).sum()
}

/// Operator rows `(A u)_j = (F_{j+1/2} - F_{j-1/2}) / V_j` for the active nodes.
struct Operator {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

fn assemble(grid: &SpaceTimeGrid, g: &Geometry, drift: impl Fn(f64) -> f64) -> Operator {
    let n = grid.nx + 1;
    let dx = grid.dx();
    let mut op = Operator { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n] };
    if g.first > grid.nx {
        return op;
    }
    // flux F_{j+1/2} = (u_{j+1} - u_j)/dx - mu_{j+1/2} (u_j + u_{j+1})/2
    for j in g.first..grid.nx {
        let mu = drift(grid.x(j) + 0.5 * dx);
        let a = -1.0 / dx - 0.5 * mu;
        let c = 1.0 / dx - 0.5 * mu;
        let (vj, vk) = (volume(grid, g, j), volume(grid, g, j + 1));
        op.diag[j] += a / vj;
        op.upper[j] += c / vj;
        op.lower[j + 1] -= a / vk;
        op.diag[j + 1] -= c / vk;
    }
    if let (Some(h), Level::At(b)) = (g.h_left, g.barrier) {
        // flux between the barrier (u = 0) and the first node
        let mu = drift(b + 0.5 * h);
        let a = 1.0 / h - 0.5 * mu;
        op.diag[g.first] -= a / volume(grid, g, g.first);
    }
    op
}

fn apply(op: &Operator, first: usize, u: &[f64], out: &mut [f64]) {
    let n = u.len();
    for j in first..n {
        let mut v = op.diag[j] * u[j];
        if j > first {
            v += op.lower[j] * u[j - 1];
        }
        if j + 1 < n {
            v += op.upper[j] * u[j + 1];
        }
        out[j] = v;
    }
}

/// `u^{n+1} = (I - theta dt A)^{-1} (I + (1 - theta) dt A) u^n` on the active nodes.
fn theta_step(op: &Operator, first: usize, u: &mut [f64], dt: f64, theta: f64) -> bool {
    let n = u.len();
    if first >= n {
        return true;
    }
    let mut rhs = u.to_vec();
    if theta < 1.0 {
        let mut au = vec![0.0; n];
        apply(op, first, u, &mut au);
        for j in first..n {
            rhs[j] += (1.0 - theta) * dt * au[j];
        }
    }
    if theta == 0.0 {
        u[first..].copy_from_slice(&rhs[first..]);
        return true;
    }
    let m = n - first;
    let lower: Vec<f64> = (first..n).map(|j| -theta * dt * op.lower[j]).collect();
    let diag: Vec<f64> = (first..n).map(|j| 1.0 - theta * dt * op.diag[j]).collect();
    let upper: Vec<f64> = (first..n).map(|j| -theta * dt * op.upper[j]).collect();
    let mut sol = rhs[first..].to_vec();
    debug_assert_eq!(sol.len(), m);
    if !solve_tridiagonal(&lower, &diag, &upper, &mut sol) {
        return false;
    }
    u[first..].copy_from_slice(&sol);
    true
}

/// Fills the clamped nodes: zero below the barrier, linear between the barrier and the first active node.
fn fill_clamped(grid: &SpaceTimeGrid, g: &Geometry, u: &mut [f64]) {
    let first = g.first.min(grid.nx + 1);
    for j in 0..first {
        u[j] = 0.0;
    }
    if let (Some(h), Level::At(b)) = (g.h_left, g.barrier) {
        if g.first <= grid.nx {
            let top = u[g.first];
            for j in 0..g.first {
                let x = grid.x(j);
                if x > b {
                    u[j] = top * (x - b) / h;
                }
            }
        }
    }
}

/// Moves the profile onto a new geometry without creating mass.
fn regrid(grid: &SpaceTimeGrid, old: &Geometry, new: &Geometry, u: &mut [f64]) {
    let before = profile_mass(grid, old, u);
    fill_clamped(grid, old, u);
    for j in 0..new.first.min(grid.nx + 1) {
        u[j] = 0.0;
    }
    if new.first > grid.nx {
        return;
    }
    let after = profile_mass(grid, new, u);
    if after > before {
        let v = volume(grid, new, new.first);
        u[new.first] = (u[new.first] - (after - before) / v).max(0.0);
    }
}

struct Start {
    index: usize,
    profile: Vec<f64>,
    /// `(u row, p_hat)` for levels before the start.
    early: Vec<(Vec<f64>, f64)>,
}

fn initial_profile(
    reduced: &ReducedSpec,
    boundary: &Boundary,
    grid: &SpaceTimeGrid,
    opts: &PdeOptions,
    positions: &dyn Fn(usize, f64) -> f64,
) -> Result<Start> {
    let spec = reduced.spec();
    let nodes = grid.nx + 1;
    match spec.initial_density.kind() {
        DensityKind::Delta { at } => {
            let x0 = *at;
            let b0 = boundary.eval(grid.t0);
            let horizon = grid.t_end;
            let tw = opts.warm_start.unwrap_or_else(|| delta_warm_start_time(x0, b0, grid.dx(), horizon));
            let index =
                if grid.t0 >= tw { 0 } else { (((tw - grid.t0) / grid.dt()).round() as usize).clamp(1, grid.nt) };
            let drift0 = spec.mu.eval(x0, 0.0);
            let kernel_row = |t: f64| -> (Vec<f64>, f64) {
                let c = x0 + drift0 * t;
                let row: Vec<f64> = (0..nodes).map(|j| gaussian(positions(j, t), c, t)).collect();
                let mass = match boundary.eval(t) {
                    Level::At(b) => 1.0 - normal_cdf((b - c) / (2.0 * t).sqrt()),
                    Level::NegInf => 1.0,
                };
                (row, mass)
            };
            let mut early = Vec::with_capacity(index);
            for n in 0..index {
                let t = grid.t(n);
                if t <= 0.0 {
                    early.push((vec![0.0; nodes], 1.0));
                } else {
                    early.push(kernel_row(t));
                }
            }
            let tstart = grid.t(index);
            if tstart <= 0.0 {
                return Err(Error::InvalidInput("point-mass start needs a positive warm-start time".into()));
            }
            let (profile, _) = kernel_row(tstart);
            Ok(Start { index, profile, early })
        }
        _ => {
            let profile: Vec<f64> =
                (0..nodes).map(|j| spec.initial_density.density(positions(j, grid.t0)).unwrap_or(0.0)).collect();
            Ok(Start { index: 0, profile, early: Vec::new() })
        }
    }
}

fn eulerian_solve(
    reduced: &ReducedSpec,
    boundary: &Boundary,
    grid: &SpaceTimeGrid,
    opts: &PdeOptions,
) -> Result<ForwardResult> {
    let start = initial_profile(reduced, boundary, grid, opts, &|j, _| grid.x(j))?;
    let mut field = opts.keep_field.then(|| Field::zeros(*grid, FieldLabel::U));
    let mut p_hat = vec![0.0; grid.nt + 1];
    for (n, (row, p)) in start.early.iter().enumerate() {
        p_hat[n] = *p;
        if let Some(f) = field.as_mut() {
            let mut row = row.clone();
            fill_clamped(grid, &geometry(grid, boundary.eval(grid.t(n))), &mut row);
            f.slice_mut(n).copy_from_slice(&row);
        }
    }

    let n0 = start.index;
    let mut geo = geometry(grid, boundary.eval(grid.t(n0)));
    let mut u = start.profile;
    fill_clamped(grid, &geo, &mut u);
    for j in geo.first.min(grid.nx + 1)..=grid.nx {
        if grid.x(j) <= geo.barrier.as_f64() {
            u[j] = 0.0;
        }
    }
    // normalise to the analytic mass above the barrier
    let target = if n0 > 0 || reduced.spec().initial_density.is_delta() {
        match geo.barrier {
            Level::At(b) => {
                let t = grid.t(n0);
                let c = reduced.spec().initial_density.support_floor()
                    + reduced.spec().mu.eval(reduced.spec().initial_density.support_floor(), 0.0) * t;
                1.0 - normal_cdf((b - c) / (2.0 * t).sqrt())
            }
            Level::NegInf => 1.0,
        }
    } else {
        1.0
    };
    let m0 = profile_mass(grid, &geo, &u);
    if m0 > 0.0 {
        for v in u.iter_mut() {
            *v *= target / m0;
        }
    }
    p_hat[n0] = profile_mass(grid, &geo, &u);
    if let Some(f) = field.as_mut() {
        f.slice_mut(n0).copy_from_slice(&u);
    }

    let dt = grid.dt();
    let drift = |x: f64, t: f64| reduced.mu(x, t);
    for n in n0..grid.nt {
        let t_next = grid.t(n + 1);
        let new_geo = geometry(grid, boundary.eval(t_next));
        regrid(grid, &geo, &new_geo, &mut u);
        geo = new_geo;
        let ok = if n == n0 && opts.scheme == TimeScheme::CrankNicolson {
            let tm = grid.t(n) + 0.5 * dt;
            let op1 = assemble(grid, &geo, |x| drift(x, tm));
            let op2 = assemble(grid, &geo, |x| drift(x, t_next));
            theta_step(&op1, geo.first, &mut u, 0.5 * dt, 1.0) && theta_step(&op2, geo.first, &mut u, 0.5 * dt, 1.0)
        } else {
            let (theta, tm) = match opts.scheme {
                TimeScheme::CrankNicolson => (0.5, grid.t(n) + 0.5 * dt),
                TimeScheme::ImplicitEuler => (1.0, t_next),
                TimeScheme::Explicit => (0.0, grid.t(n)),
            };
            let op = assemble(grid, &geo, |x| drift(x, tm));
            theta_step(&op, geo.first, &mut u, dt, theta)
        };
        if !ok {
            return Err(Error::InvalidInput(format!("singular forward system at step {}", n + 1)));
        }
        if let Some((j, v)) = (geo.first..=grid.nx.min(u.len() - 1))
            .filter(|&j| j < u.len())
            .map(|j| (j, u[j]))
            .find(|(_, v)| *v < NEG_TOL || !v.is_finite())
        {
            return Err(Error::NonpositiveDensity { slice: n + 1, node: j, value: v });
        }
        fill_clamped(grid, &geo, &mut u);
        p_hat[n + 1] = profile_mass(grid, &geo, &u);
        if let Some(f) = field.as_mut() {
            f.slice_mut(n + 1).copy_from_slice(&u);
        }
    }
    Ok(ForwardResult { method: ForwardMethod::Pde, t: grid.ts(), p_hat, standard_errors: None, u: field })
}

/// Solve in the frame `xi = x - b(t)`, where the barrier sits at node 0.
fn front_fixing_solve(
    reduced: &ReducedSpec,
    boundary: &Boundary,
    grid: &SpaceTimeGrid,
    opts: &PdeOptions,
) -> Result<ForwardResult> {
    let ts = grid.ts();
    let bs: Vec<f64> = ts
        .iter()
        .map(|&t| {
            boundary.eval(t).finite().ok_or_else(|| Error::InvalidInput("front fixing needs a finite barrier".into()))
        })
        .collect::<Result<_>>()?;
    let bmin = bs.iter().copied().fold(f64::INFINITY, f64::min);
    let dx = grid.dx();
    let span = grid.x_max - bmin;
    let m = ((span / dx).ceil() as usize).max(8);
    let xi = |j: usize| j as f64 * dx;
    let xi_grid = SpaceTimeGrid::new(0.0, m as f64 * dx, m, grid.t0, grid.t_end, grid.nt)?;
    let geo = Geometry { first: 1, h_left: Some(dx), barrier: Level::At(0.0) };

    let start = initial_profile(reduced, boundary, grid, opts, &|j, _| grid.x(j))?;
    let nodes = m + 1;
    let n0 = start.index;
    let t0 = grid.t(n0);
    let mut u: Vec<f64> = match reduced.spec().initial_density.kind() {
        DensityKind::Delta { at } => {
            let c = at + reduced.spec().mu.eval(*at, 0.0) * t0;
            (0..nodes).map(|j| gaussian(xi(j) + bs[n0], c, t0)).collect()
        }
        _ => (0..nodes).map(|j| reduced.spec().initial_density.density(xi(j) + bs[n0]).unwrap_or(0.0)).collect(),
    };
    u[0] = 0.0;
    let target = if reduced.spec().initial_density.is_delta() {
        let at = reduced.spec().initial_density.support_floor();
        let c = at + reduced.spec().mu.eval(at, 0.0) * t0;
        1.0 - normal_cdf((bs[n0] - c) / (2.0 * t0).sqrt())
    } else {
        1.0
    };
    let m0 = profile_mass(&xi_grid, &geo, &u);
    if m0 > 0.0 {
        for v in u.iter_mut() {
            *v *= target / m0;
        }
    }

    let mut field = opts.keep_field.then(|| Field::zeros(*grid, FieldLabel::U));
    let mut p_hat = vec![0.0; grid.nt + 1];
    for (n, (row, p)) in start.early.iter().enumerate() {
        p_hat[n] = *p;
        if let Some(f) = field.as_mut() {
            let mut row = row.clone();
            fill_clamped(grid, &geometry(grid, Level::At(bs[n])), &mut row);
            f.slice_mut(n).copy_from_slice(&row);
        }
    }
    let store = |f: &mut Field, n: usize, u: &[f64]| {
        for j in 0..=grid.nx {
            let s = (grid.x(j) - bs[n]) / dx;
            let v = if s <= 0.0 || s >= m as f64 {
                0.0
            } else {
                let k = s.floor() as usize;
                let a = s - k as f64;
                (1.0 - a) * u[k] + a * u[k + 1]
            };
            f.set(n, j, v);
        }
    };
    p_hat[n0] = profile_mass(&xi_grid, &geo, &u);
    if let Some(f) = field.as_mut() {
        store(f, n0, &u);
    }

    let dt = grid.dt();
    for n in n0..grid.nt {
        let bdot = (bs[n + 1] - bs[n]) / dt;
        let (b_mid, tm) = (0.5 * (bs[n] + bs[n + 1]), grid.t(n) + 0.5 * dt);
        let drift = |s: f64, bb: f64, t: f64| reduced.mu(s + bb, t) - bdot;
        let ok = if n == n0 && opts.scheme == TimeScheme::CrankNicolson {
            let op1 = assemble(&xi_grid, &geo, |s| drift(s, b_mid, tm));
            let op2 = assemble(&xi_grid, &geo, |s| drift(s, bs[n + 1], grid.t(n + 1)));
            theta_step(&op1, 1, &mut u, 0.5 * dt, 1.0) && theta_step(&op2, 1, &mut u, 0.5 * dt, 1.0)
        } else {
            let theta = match opts.scheme {
                TimeScheme::CrankNicolson => 0.5,
                TimeScheme::ImplicitEuler => 1.0,
                TimeScheme::Explicit => 0.0,
            };
            let op = assemble(&xi_grid, &geo, |s| drift(s, b_mid, tm));
            theta_step(&op, 1, &mut u, dt, theta)
        };
        if !ok {
            return Err(Error::InvalidInput(format!("singular forward system at step {}", n + 1)));
        }
        if let Some((j, v)) = u.iter().copied().enumerate().find(|(_, v)| *v < NEG_TOL || !v.is_finite()) {
            return Err(Error::NonpositiveDensity { slice: n + 1, node: j, value: v });
        }
        p_hat[n + 1] = profile_mass(&xi_grid, &geo, &u);
        if let Some(f) = field.as_mut() {
            store(f, n + 1, &u);
        }
    }
    Ok(ForwardResult { method: ForwardMethod::PdeFrontFixing, t: ts, p_hat, standard_errors: None, u: field })
}

const CHUNK: usize = 2048;

/// Euler–Maruyama Monte Carlo in original coordinates over `[0, T]`, `T` the
/// last barrier knot. Chunk `k` draws from the ChaCha8 stream `k` of `seed`,
/// and chunk sums are reduced in order, so results do not depend on the
/// thread count.
pub fn forward_mc(
    spec: &DiffusionSpec,
    boundary: &Boundary,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ForwardResult> {
    if n_paths < 1000 {
        return Err(Error::InvalidPaths(n_paths));
    }
    if n_steps == 0 {
        return Err(Error::InvalidInput("Monte Carlo needs at least one time step".into()));
    }
    let horizon = *boundary.knots().last().unwrap();
    let dt = horizon / n_steps as f64;
    let ts: Vec<f64> = (0..=n_steps).map(|k| if k == n_steps { horizon } else { k as f64 * dt }).collect();
    if boundary.all_neg_inf() {
        return Ok(ForwardResult {
            method: ForwardMethod::MonteCarlo,
            p_hat: vec![1.0; ts.len()],
            standard_errors: Some(vec![0.0; ts.len()]),
            t: ts,
            u: None,
        });
    }
    let levels: Vec<Level> = ts.iter().map(|&t| boundary.eval(t)).collect();
    let quantiles = spec.initial_density.quantile_table(1 << 14);
    let x_start = spec.initial_density.support_floor();
    let sqdt = dt.sqrt();
    let n_chunks = n_paths.div_ceil(CHUNK);

    let partials: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let count = CHUNK.min(n_paths - chunk * CHUNK);
            let mut sum = vec![0.0; n_steps + 1];
            let mut sq = vec![0.0; n_steps + 1];
            for _ in 0..count {
                let mut x = match &quantiles {
                    None => x_start,
                    Some((cdf, xs)) => {
                        let v: f64 = rng.random();
                        lerp_table(cdf, xs, v)
                    }
                };
                let mut w = if let Level::At(b) = levels[0] {
                    if x < b {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    1.0
                };
                sum[0] += w;
                sq[0] += w * w;
                let mut k = 0;
                while k < n_steps && w > 0.0 {
                    let t = ts[k];
                    let sig = spec.sigma.eval(x, t);
                    let z: f64 = rng.sample(StandardNormal);
                    let next = x + spec.mu.eval(x, t) * dt + sig * sqdt * z;
                    if !next.is_finite() {
                        return Err(Error::NonfinitePath { step: k + 1 });
                    }
                    match (levels[k], levels[k + 1]) {
                        (_, Level::At(b1)) if next < b1 => w = 0.0,
                        (Level::At(b0), Level::At(b1)) => {
                            let arg = -2.0 * (x - b0) * (next - b1) / (sig * sig * dt);
                            w *= 1.0 - arg.exp();
                        }
                        _ => {}
                    }
                    x = next;
                    k += 1;
                    sum[k] += w;
                    sq[k] += w * w;
                }
            }
            Ok((sum, sq))
        })
        .collect();

    let mut sum = vec![0.0; n_steps + 1];
    let mut sq = vec![0.0; n_steps + 1];
    for part in partials {
        let (s, q) = part?;
        for k in 0..=n_steps {
            sum[k] += s[k];
            sq[k] += q[k];
        }
    }
    let nf = n_paths as f64;
    let p_hat: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let se: Vec<f64> = sq.iter().zip(&p_hat).map(|(q, p)| ((q / nf - p * p).max(0.0) / nf).sqrt()).collect();
    Ok(ForwardResult { method: ForwardMethod::MonteCarlo, t: ts, p_hat, standard_errors: Some(se), u: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sigma_reduce, InitialDensity};
    use std::f64::consts::SQRT_2;

    fn oracle(t: f64) -> f64 {
        if t <= 0.0 {
            1.0
        } else {
            2.0 * normal_cdf(1.0 / (2.0 * t).sqrt()) - 1.0
        }
    }

    fn brownian() -> ReducedSpec {
        sigma_reduce(&DiffusionSpec::brownian(SQRT_2, InitialDensity::delta(0.0), (-6.0, 6.0))).unwrap()
    }

    #[test]
    fn no_barrier_conserves_mass() {
        let r = brownian();
        let g = SpaceTimeGrid::new(-8.0, 8.0, 400, 0.0, 1.0, 100).unwrap();
        let b = Boundary::constant(Level::NegInf, &[0.0, 1.0]);
        let res = forward_pde(&r, &b, &g).unwrap();
        for p in &res.p_hat {
            assert!((p - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_barrier_coarse() {
        let r = brownian();
        let g = SpaceTimeGrid::new(-1.5, 8.0, 950, 0.0, 1.0, 1000).unwrap();
        let b = Boundary::constant(Level::At(-1.0), &[0.0, 1.0]);
        let res = forward_pde(&r, &b, &g).unwrap();
        let err = res.sup_error(oracle, 0.05, 1.0);
        assert!(err < 1e-2, "sup error {err}");
        assert!(res.p_hat.windows(2).all(|w| w[1] <= w[0] + 1e-8));
    }

    #[test]
    fn front_fixing_matches_oracle() {
        let r = brownian();
        let g = SpaceTimeGrid::new(-1.5, 8.0, 950, 0.0, 1.0, 1000).unwrap();
        let b = Boundary::constant(Level::At(-1.0), &[0.0, 1.0]);
        let opts = PdeOptions { front_fixing: true, ..Default::default() };
        let res = forward_pde_with(&r, &b, &g, &opts).unwrap();
        let err = res.sup_error(oracle, 0.05, 1.0);
        assert!(err < 1e-2, "sup error {err}");
    }

    #[test]
    fn far_mass_does_not_reach_barrier() {
        let u0 = InitialDensity::tabulated(vec![1.0, 1.5, 2.0], vec![0.0, 2.0, 0.0]).unwrap();
        let r = sigma_reduce(&DiffusionSpec::brownian(SQRT_2, u0, (-1.0, 4.0))).unwrap();
        let g = SpaceTimeGrid::new(-0.5, 4.0, 450, 0.0, 0.01, 20).unwrap();
        let b = Boundary::constant(Level::At(0.0), &[0.0, 0.01]);
        let res = forward_pde(&r, &b, &g).unwrap();
        assert!(res.p_hat[20] >= 1.0 - 1e-6);
    }

    #[test]
    fn raising_barrier_lowers_survival() {
        let r = brownian();
        let g = SpaceTimeGrid::new(-2.0, 6.0, 400, 0.0, 0.5, 200).unwrap();
        let lo = forward_pde(&r, &Boundary::constant(Level::At(-1.0), &[0.0, 0.5]), &g).unwrap();
        let hi = forward_pde(&r, &Boundary::constant(Level::At(-0.8), &[0.0, 0.5]), &g).unwrap();
        for (a, b) in lo.p_hat.iter().zip(&hi.p_hat) {
            assert!(b <= &(a + 1e-8));
        }
    }

    #[test]
    fn explicit_scheme_checks_cfl() {
        let r = brownian();
        let g = SpaceTimeGrid::new(-2.0, 6.0, 400, 0.0, 0.5, 100).unwrap();
        let b = Boundary::constant(Level::At(-1.0), &[0.0, 0.5]);
        let opts = PdeOptions { scheme: TimeScheme::Explicit, ..Default::default() };
        assert!(matches!(forward_pde_with(&r, &b, &g, &opts), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn mc_trivial_and_invalid() {
        let spec = DiffusionSpec::brownian(SQRT_2, InitialDensity::delta(0.0), (-6.0, 6.0));
        let none = Boundary::constant(Level::NegInf, &[0.0, 1.0]);
        let res = forward_mc(&spec, &none, 1000, 10, 1).unwrap();
        assert!(res.p_hat.iter().all(|p| *p == 1.0));
        assert!(res.standard_errors.unwrap().iter().all(|s| *s == 0.0));
        assert!(matches!(forward_mc(&spec, &none, 999, 10, 1), Err(Error::InvalidPaths(999))));
    }

    #[test]
    fn mc_is_seed_deterministic() {
        let spec = DiffusionSpec::brownian(SQRT_2, InitialDensity::delta(0.0), (-6.0, 6.0));
        let b = Boundary::constant(Level::At(-1.0), &[0.0, 1.0]);
        let a = forward_mc(&spec, &b, 5000, 100, 42).unwrap();
        let c = forward_mc(&spec, &b, 5000, 100, 42).unwrap();
        assert_eq!(a.p_hat, c.p_hat);
        let se = a.se_at(1.0).unwrap();
        assert!((a.p_at(1.0) - oracle(1.0)).abs() < 4.0 * se + 1e-3);
    }
}
