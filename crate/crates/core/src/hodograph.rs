//! Hodograph transformation: K-scaling, level-set inversion and the
//! quasilinear boundary problem for the inverse of the scaled density.

use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

use crate::grid::{Field, FieldLabel, SpaceTimeGrid};
use crate::inverse::InverseSolution;
use crate::model::{Boundary, Level, ReducedSpec, SurvivalCurve};
use crate::numerics::{fmt_sci, solve_tridiagonal};
use crate::{Error, Result};

/// Scaling function `K`, scaled density `v = u / K` and the drift `nu = mu - 2 K_x / K`.
#[derive(Clone, Debug)]
pub struct ScaledDensity {
    pub v: Field,
    pub k: Field,
    pub nu: Field,
}

/// A function on the strip `[0, z_eps] x [t_start, T]`, stored by time slice.
#[derive(Clone, Debug)]
pub struct HodographField {
    pub z: Vec<f64>,
    pub t: Vec<f64>,
    values: Vec<f64>,
    dz: Vec<f64>,
}

impl HodographField {
    fn new(z: Vec<f64>, t: Vec<f64>) -> Self {
        let n = z.len() * t.len();
        Self { z, t, values: vec![0.0; n], dz: vec![0.0; n] }
    }

    pub fn get(&self, n: usize, i: usize) -> f64 {
        self.values[n * self.z.len() + i]
    }

    /// Sampled `z`-derivative.
    pub fn dz_at(&self, n: usize, i: usize) -> f64 {
        self.dz[n * self.z.len() + i]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let nz = self.z.len();
        &self.values[n * nz..(n + 1) * nz]
    }

    pub fn dz_row(&self, n: usize) -> &[f64] {
        let nz = self.z.len();
        &self.dz[n * nz..(n + 1) * nz]
    }

    fn set_row(&mut self, n: usize, vals: &[f64], dz: &[f64]) {
        let nz = self.z.len();
        self.values[n * nz..(n + 1) * nz].copy_from_slice(vals);
        self.dz[n * nz..(n + 1) * nz].copy_from_slice(dz);
    }

    /// Time series at the `i`-th z-knot.
    pub fn edge(&self, i: usize) -> Vec<f64> {
        (0..self.t.len()).map(|n| self.get(n, i)).collect()
    }

    /// Sup distance over the slices with `t >= t_from`.
    pub fn sup_diff(&self, other: &HodographField, t_from: f64) -> f64 {
        let mut d: f64 = 0.0;
        for (n, &t) in self.t.iter().enumerate() {
            if t + 1e-12 < t_from {
                continue;
            }
            for (a, b) in self.row(n).iter().zip(other.row(n)) {
                d = d.max((a - b).abs());
            }
        }
        d
    }

    /// Extreme `z`-derivative over all slices.
    pub fn dz_range(&self) -> (f64, f64) {
        self.dz.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    /// CSV with header `t,z,value,dz`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,z,value,dz")?;
        for (n, &t) in self.t.iter().enumerate() {
            for (i, &z) in self.z.iter().enumerate() {
                writeln!(w, "{},{},{},{}", fmt_sci(t), fmt_sci(z), fmt_sci(self.get(n, i)), fmt_sci(self.dz_at(n, i)))?;
            }
        }
        Ok(())
    }
}

/// Linear interpolation on slice `n` with clamping, returning the value and the cell slope.
fn lerp_clamped(field: &Field, n: usize, x: f64) -> (f64, f64) {
    let g = field.grid;
    let row = field.slice(n);
    let s = ((x - g.x_min) / g.dx()).clamp(0.0, g.nx as f64);
    let j = (s.floor() as usize).min(g.nx - 1);
    let f = s - j as f64;
    let slope = (row[j + 1] - row[j]) / g.dx();
    (row[j] + f * (row[j + 1] - row[j]), slope)
}

/// Solves `K_t = K_xx - (mu K)_x` from `K = 1` by Crank-Nicolson in flux form.
///
/// Interior faces carry diffusive plus central advective flux; the two edge
/// faces carry the advective flux of the edge value only, so that constants
/// solve the discrete problem wherever the drift is locally constant.
pub fn solve_k(reduced: &ReducedSpec, grid: &SpaceTimeGrid) -> Result<Field> {
    let g = *grid;
    let mut k = Field::from_fn(g, FieldLabel::K, |_, _| 1.0);
    if reduced.is_driftless() {
        return Ok(k);
    }
    let (nx, dx, dt) = (g.nx, g.dx(), g.dt());
    let xs = g.xs();
    let vol: Vec<f64> = (0..=nx).map(|j| if j == 0 || j == nx { 0.5 * dx } else { dx }).collect();
    // Divergence operator A with d/dt(V K) = A K, assembled as tridiagonal rows.
    let assemble = |t: f64| {
        let mut lo = vec![0.0; nx + 1];
        let mut di = vec![0.0; nx + 1];
        let mut up = vec![0.0; nx + 1];
        for j in 0..nx {
            let mf = reduced.mu(0.5 * (xs[j] + xs[j + 1]), t);
            // F = (K_{j+1} - K_j)/dx - mf (K_j + K_{j+1})/2, added to j and subtracted from j+1.
            let (a, b) = (-1.0 / dx - 0.5 * mf, 1.0 / dx - 0.5 * mf);
            di[j] += a;
            up[j] += b;
            lo[j + 1] -= a;
            di[j + 1] -= b;
        }
        di[0] += reduced.mu(xs[0], t);
        di[nx] -= reduced.mu(xs[nx], t);
        (lo, di, up)
    };
    let mut prev = assemble(g.t(0));
    let mut min_k: f64 = 1.0;
    for n in 0..g.nt {
        let next = assemble(g.t(n + 1));
        let cur = k.slice(n).to_vec();
        let mut rhs: Vec<f64> = (0..=nx)
            .map(|j| {
                let mut a = prev.1[j] * cur[j];
                if j > 0 {
                    a += prev.0[j] * cur[j - 1];
                }
                if j < nx {
                    a += prev.2[j] * cur[j + 1];
                }
                vol[j] * cur[j] + 0.5 * dt * a
            })
            .collect();
        let lo: Vec<f64> = next.0.iter().map(|v| -0.5 * dt * v).collect();
        let up: Vec<f64> = next.2.iter().map(|v| -0.5 * dt * v).collect();
        let di: Vec<f64> = next.1.iter().zip(&vol).map(|(v, w)| w - 0.5 * dt * v).collect();
        if !solve_tridiagonal(&lo, &di, &up, &mut rhs) {
            return Err(Error::PositivityLoss { min_k: f64::NAN });
        }
        for v in &rhs {
            min_k = min_k.min(*v);
        }
        if !(min_k > 0.0) {
            return Err(Error::PositivityLoss { min_k });
        }
        k.slice_mut(n + 1).copy_from_slice(&rhs);
        prev = next;
    }
    Ok(k)
}

/// `v = u / K` and `nu = mu - 2 K_x / K` with central differences for `K_x`.
pub fn scaled_density(u: &Field, k: &Field, reduced: &ReducedSpec) -> Result<ScaledDensity> {
    let g = u.grid;
    if let Some(min_k) = k.values().iter().copied().reduce(f64::min) {
        if !(min_k > 0.0) {
            return Err(Error::PositivityLoss { min_k });
        }
    }
    let mut v = Field::zeros(g, FieldLabel::V);
    let mut nu = Field::zeros(g, FieldLabel::Other);
    let dx = g.dx();
    for n in 0..=g.nt {
        let t = g.t(n);
        let kr = k.slice(n);
        for (o, (a, b)) in v.slice_mut(n).iter_mut().zip(u.slice(n).iter().zip(kr)) {
            *o = a / b;
        }
        let row = nu.slice_mut(n);
        for j in 0..=g.nx {
            let kx = if j == 0 {
                (kr[1] - kr[0]) / dx
            } else if j == g.nx {
                (kr[j] - kr[j - 1]) / dx
            } else {
                (kr[j + 1] - kr[j - 1]) / (2.0 * dx)
            };
            row[j] = reduced.mu(g.x(j), t) - 2.0 * kx / kr[j];
        }
    }
    Ok(ScaledDensity { v, k: k.clone(), nu })
}

/// Peak of `v` right of `b` on slice `n`: the running maximum until `v` falls below half of it.
fn strip_peak(v: &Field, n: usize, b: f64) -> f64 {
    let g = v.grid;
    let j0 = ((b - g.x_min) / g.dx()).ceil().max(0.0) as usize;
    let mut peak: f64 = 0.0;
    for &x in &v.slice(n)[j0.min(g.nx)..] {
        if x > peak {
            peak = x;
        } else if x < 0.5 * peak {
            break;
        }
    }
    peak
}

/// Strip width: half the smallest slice peak of `v` over the window slices `start..`.
pub fn select_z_eps(v: &Field, boundary: &Boundary, start: usize) -> Result<f64> {
    let g = v.grid;
    let mut lo = f64::INFINITY;
    for n in start..=g.nt {
        let t = g.t(n);
        let Level::At(b) = boundary.eval(t) else {
            return Err(Error::InvalidInput(format!("barrier is -inf at t={t} inside the hodograph window")));
        };
        lo = lo.min(strip_peak(v, n, b));
    }
    if !(lo > 0.0) {
        return Err(Error::LevelNotReached { z: 0.0, t: g.t(start) });
    }
    Ok(0.5 * lo)
}

/// `X(z,t) = min{x >= b(t) : v(x,t) = z}` on slices `start..`, with sub-cell linear refinement.
///
/// The stored `z`-derivative is `1 / v_x` at the crossing, with `v_x` from
/// differences of `v` (forward at the first node right of `b`, central beyond)
/// interpolated linearly to the crossing point.
pub fn invert_level_sets(v: &Field, boundary: &Boundary, z: &[f64], start: usize) -> Result<HodographField> {
    let g = v.grid;
    let dx = g.dx();
    let ts: Vec<f64> = (start..=g.nt).map(|n| g.t(n)).collect();
    let mut out = HodographField::new(z.to_vec(), ts.clone());
    let mut vals = vec![0.0; z.len()];
    let mut ders = vec![0.0; z.len()];
    for (k, n) in (start..=g.nt).enumerate() {
        let t = ts[k];
        let Level::At(b) = boundary.eval(t) else {
            return Err(Error::InvalidInput(format!("barrier is -inf at t={t} inside the hodograph window")));
        };
        let row = v.slice(n);
        let j0 = ((b - g.x_min) / dx).ceil().max(0.0) as usize;
        // Central differences, one-sided at the first node right of the barrier.
        let d = |i: usize| {
            if i <= j0 {
                (row[j0 + 1] - row[j0]) / dx
            } else {
                (row[i + 1] - row[i - 1]) / (2.0 * dx)
            }
        };
        let slope_at = |x: f64| {
            let s = ((x - g.x_min) / dx).clamp(j0 as f64, (g.nx - 1) as f64);
            let j = (s.floor() as usize).min(g.nx - 2);
            let f = s - j as f64;
            d(j) + f * (d(j + 1) - d(j))
        };
        let mut j = j0;
        for (i, &zi) in z.iter().enumerate() {
            if zi <= 0.0 {
                vals[i] = b;
                ders[i] = 1.0 / slope_at(b);
                continue;
            }
            while j <= g.nx && row[j] < zi {
                j += 1;
            }
            if j > g.nx {
                return Err(Error::LevelNotReached { z: zi, t });
            }
            let (xl, vl) = if j == j0 { (b, 0.0) } else { (g.x(j - 1), row[j - 1]) };
            let x = xl + (g.x(j) - xl) * (zi - vl) / (row[j] - vl);
            vals[i] = x;
            ders[i] = 1.0 / slope_at(x);
        }
        out.set_row(k, &vals, &ders);
    }
    Ok(out)
}

/// Constants of the a-priori band `m e^{-int k} <= Y_z <= M e^{int k}`.
#[derive(Clone, Debug, Serialize)]
pub struct BandConstants {
    pub upper_boundary: f64,
    pub lower_boundary: f64,
    pub upper_initial: f64,
    pub lower_initial: f64,
    pub upper_edge: f64,
    pub lower_edge: f64,
    pub upper: f64,
    pub lower: f64,
    /// `int_{t_start}^t sup |nu_x|` at each strip time.
    pub growth: Vec<f64>,
}

impl BandConstants {
    pub fn bounds(&self, n: usize) -> (f64, f64) {
        let e = self.growth[n].exp();
        (self.lower / e, self.upper * e)
    }
}

/// Inputs of the strip problem shared by the unperturbed and perturbed solves.
#[derive(Clone, Debug)]
pub struct StripData<'a> {
    pub z: Vec<f64>,
    /// First grid slice of the strip window.
    pub start: usize,
    /// Initial profile on the z-knots.
    pub x0: Vec<f64>,
    /// Right-edge Neumann data `X_z(z_eps, t)` at each strip time.
    pub neumann: Vec<f64>,
    pub k: &'a Field,
    pub nu: &'a Field,
}

#[derive(Clone, Debug, Serialize)]
pub struct QuasilinearOptions {
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Relative slack on the band test, for rounding in the sampled derivative.
    pub band_slack: f64,
}

impl Default for QuasilinearOptions {
    fn default() -> Self {
        Self { newton_tol: 1e-12, max_newton: 50, band_slack: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct QuasilinearRun {
    pub y: HodographField,
    pub band: BandConstants,
    /// Smallest distance of `Y_z` to either band edge, relative to the edge, over all steps.
    pub band_margin: f64,
    pub max_newton: usize,
}

fn band_constants(data: &StripData, curve: &SurvivalCurve) -> BandConstants {
    let g = data.k.grid;
    let ts: Vec<f64> = (data.start..=g.nt).map(|n| g.t(n)).collect();
    let slopes: Vec<f64> = ts.iter().map(|&t| curve.pdot(t).abs()).collect();
    let (smin, smax) = slopes.iter().fold((f64::INFINITY, 0.0f64), |(a, b), s| (a.min(*s), b.max(*s)));
    let (mut kmin, mut kmax) = (f64::INFINITY, 0.0f64);
    for n in data.start..=g.nt {
        for v in data.k.slice(n) {
            kmin = kmin.min(*v);
            kmax = kmax.max(*v);
        }
    }
    let nz = data.z.len();
    let d0: Vec<f64> = (0..nz)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == nz - 1 {
                (nz - 2, nz - 1)
            } else {
                (i - 1, i + 1)
            };
            (data.x0[b] - data.x0[a]) / (data.z[b] - data.z[a])
        })
        .collect();
    let range = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(*s), b.max(*s)));
    let (l2, u2) = range(&d0);
    let (l3, u3) = range(&data.neumann);
    let dx = g.dx();
    let mut growth = vec![0.0; ts.len()];
    let mut prev_k = None;
    for (i, n) in (data.start..=g.nt).enumerate() {
        let row = data.nu.slice(n);
        let kx = row.windows(2).map(|w| ((w[1] - w[0]) / dx).abs()).fold(0.0, f64::max);
        if let Some(pk) = prev_k {
            growth[i] = growth[i - 1] + 0.5 * (pk + kx) * (ts[i] - ts[i - 1]);
        }
        prev_k = Some(kx);
    }
    let (u1, l1) = (kmax / smin, kmin / smax);
    BandConstants {
        upper_boundary: u1,
        lower_boundary: l1,
        upper_initial: u2,
        lower_initial: l2,
        upper_edge: u3,
        lower_edge: l3,
        upper: u1.max(u2).max(u3),
        lower: l1.min(l2).min(l3),
        growth,
    }
}

/// Backward-Euler slice problem for `Y_t = Y_z^{-2} Y_zz + nu(Y,t)`.
struct Slice<'a> {
    prev: &'a [f64],
    dz: f64,
    dt: f64,
    pdot: f64,
    q: f64,
    k: &'a Field,
    nu: &'a Field,
    n: usize,
}

impl Slice<'_> {
    /// Residual and tridiagonal Jacobian at `y`.
    fn eval(&self, y: &[f64]) -> (Vec<f64>, [Vec<f64>; 3]) {
        let nz = y.len();
        let last = nz - 1;
        let (h, dt) = (self.dz, self.dt);
        let mut r = vec![0.0; nz];
        let mut lo = vec![0.0; nz];
        let mut di = vec![0.0; nz];
        let mut up = vec![0.0; nz];
        let a = -self.pdot;
        for i in 0..nz {
            let (nv, nvx) = lerp_clamped(self.nu, self.n, y[i]);
            let (flux, d_prev, d_self, d_next);
            if i == 0 {
                let (kv, kx) = lerp_clamped(self.k, self.n, y[0]);
                let s = kv / a;
                let sp = kx / a;
                let c = 2.0 * (y[1] - y[0] - h * s) / (h * h);
                let c0 = (-2.0 - 2.0 * h * sp) / (h * h);
                flux = c / (s * s);
                d_prev = 0.0;
                d_self = c0 / (s * s) - 2.0 * c * sp / (s * s * s);
                d_next = 2.0 / (h * h * s * s);
            } else if i == last {
                let s = self.q;
                let c = 2.0 * (y[i - 1] - y[i] + h * s) / (h * h);
                flux = c / (s * s);
                d_prev = 2.0 / (h * h * s * s);
                d_self = -2.0 / (h * h * s * s);
                d_next = 0.0;
            } else {
                let s = (y[i + 1] - y[i - 1]) / (2.0 * h);
                let c = (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h);
                flux = c / (s * s);
                let s2 = s * s;
                let s3 = s2 * s;
                d_prev = 1.0 / (h * h * s2) + c / (h * s3);
                d_self = -2.0 / (h * h * s2);
                d_next = 1.0 / (h * h * s2) - c / (h * s3);
            }
            r[i] = y[i] - self.prev[i] - dt * (flux + nv);
            lo[i] = -dt * d_prev;
            di[i] = 1.0 - dt * (d_self + nvx);
            up[i] = -dt * d_next;
        }
        (r, [lo, di, up])
    }

    fn solve(&self, guess: &[f64], tol: f64, max_iter: usize) -> Option<(Vec<f64>, usize)> {
        let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut y = guess.to_vec();
        let (mut r, mut jac) = self.eval(&y);
        let mut rn = norm(&r);
        for it in 0..max_iter {
            if rn <= tol {
                return Some((y, it));
            }
            let mut step: Vec<f64> = r.iter().map(|v| -v).collect();
            if !solve_tridiagonal(&jac[0], &jac[1], &jac[2], &mut step) {
                return None;
            }
            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> = y.iter().zip(&step).map(|(a, d)| a + lambda * d).collect();
                let monotone = trial.windows(2).all(|w| w[1] > w[0]);
                if monotone {
                    let (tr, tj) = self.eval(&trial);
                    let tn = norm(&tr);
                    if tn.is_finite() && (tn < rn || lambda < 1e-3) {
                        y = trial;
                        r = tr;
                        jac = tj;
                        rn = tn;
                        break;
                    }
                }
                lambda *= 0.5;
                if lambda < 1e-3 {
                    return None;
                }
            }
        }
        (rn <= tol).then_some((y, max_iter))
    }
}

fn sampled_dz(y: &[f64], dz: f64, left: f64, right: f64) -> Vec<f64> {
    let nz = y.len();
    (0..nz)
        .map(|i| {
            if i == 0 {
                left
            } else if i == nz - 1 {
                right
            } else {
                (y[i + 1] - y[i - 1]) / (2.0 * dz)
            }
        })
        .collect()
}

/// Solves the quasilinear strip problem with the nonlinear left condition
/// `pdot Y_z(0) + K(Y(0)) = 0` and the right condition `Y_z(z_eps) = X_z(z_eps)`.
///
/// Each implicit step is a Newton solve with the full tridiagonal Jacobian.
/// `Y_z` is checked against the a-priori band after every step.
pub fn solve_quasilinear(data: &StripData, curve: &SurvivalCurve, opts: &QuasilinearOptions) -> Result<QuasilinearRun> {
    let g = data.k.grid;
    let nz = data.z.len();
    if nz < 3 {
        return Err(Error::InvalidInput("strip needs at least three z-knots".into()));
    }
    let dz = data.z[1] - data.z[0];
    let ts: Vec<f64> = (data.start..=g.nt).map(|n| g.t(n)).collect();
    if data.neumann.len() != ts.len() || data.x0.len() != nz {
        return Err(Error::InvalidInput("strip data lengths disagree with the window".into()));
    }
    if data.x0.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("initial profile is not strictly increasing".into()));
    }
    if data.neumann.iter().any(|q| !(*q > 0.0)) {
        return Err(Error::InvalidInput("right-edge Neumann data must be positive".into()));
    }
    for &t in &ts {
        if !(curve.pdot(t) < 0.0) {
            return Err(Error::InvalidInput(format!("survival slope must be negative on the window (t={t})")));
        }
    }
    let band = band_constants(data, curve);
    let mut out = HodographField::new(data.z.clone(), ts.clone());
    let (k0, _) = lerp_clamped(data.k, data.start, data.x0[0]);
    let d0 = sampled_dz(&data.x0, dz, k0 / -curve.pdot(ts[0]), data.neumann[0]);
    out.set_row(0, &data.x0, &d0);
    let mut margin = f64::INFINITY;
    let mut max_newton = 0;
    let mut y = data.x0.clone();
    for step in 1..ts.len() {
        let n = data.start + step;
        let slice = Slice {
            prev: &y,
            dz,
            dt: ts[step] - ts[step - 1],
            pdot: curve.pdot(ts[step]),
            q: data.neumann[step],
            k: data.k,
            nu: data.nu,
            n,
        };
        let Some((next, its)) = slice.solve(&y, opts.newton_tol, opts.max_newton) else {
            let (r, _) = slice.eval(&y);
            let residual = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(Error::NewtonDivergence { slice: n, residual });
        };
        max_newton = max_newton.max(its);
        let (kv, _) = lerp_clamped(data.k, n, next[0]);
        let d = sampled_dz(&next, dz, kv / -slice.pdot, slice.q);
        let (lower, upper) = band.bounds(step);
        for v in &d {
            let below = (v - lower) / lower;
            let above = (upper - v) / upper;
            if below < -opts.band_slack || above < -opts.band_slack || !(*v > 0.0) {
                return Err(Error::GradientCollapse { t: ts[step], value: *v, lower, upper });
            }
            margin = margin.min(below).min(above);
        }
        out.set_row(step, &next, &d);
        y = next;
    }
    Ok(QuasilinearRun { y: out, band, band_margin: margin, max_newton })
}

/// Perturbed member: initial profile shifted by `h` and survival curve `p - h t`.
pub fn solve_perturbed(
    h: f64,
    data: &StripData,
    curve: &SurvivalCurve,
    opts: &QuasilinearOptions,
) -> Result<QuasilinearRun> {
    let tilted = curve.tilted(h)?;
    let shifted = StripData { x0: data.x0.iter().map(|x| x + h).collect(), ..data.clone() };
    solve_quasilinear(&shifted, &tilted, opts)
}

#[derive(Clone, Debug, Serialize)]
pub struct BracketViolation {
    pub t: f64,
    /// `"boundary"` or `"edge"`.
    pub chain: &'static str,
    /// `min(upper - middle, middle - lower)`; nonpositive when violated.
    pub margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BracketReport {
    pub h: f64,
    pub knots: usize,
    pub boundary_ok: Vec<bool>,
    pub edge_ok: Vec<bool>,
    pub violations: Vec<BracketViolation>,
    pub min_margin: f64,
    /// `max |Y^h(0,.) - Y^{-h}(0,.)|`.
    pub width: f64,
    pub strict: bool,
}

/// Checks `lower < middle < upper` knot by knot for the boundary and right-edge chains.
pub fn bracket_validate(
    h: f64,
    b: &[f64],
    x_eps: &[f64],
    plus: &HodographField,
    minus: &HodographField,
) -> BracketReport {
    let last = plus.z.len() - 1;
    let mut violations = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut width: f64 = 0.0;
    let mut check = |t: f64, chain: &'static str, lo: f64, mid: f64, hi: f64| {
        let m = (hi - mid).min(mid - lo);
        min_margin = min_margin.min(m);
        let ok = lo < mid && mid < hi;
        if !ok {
            violations.push(BracketViolation { t, chain, margin: m });
        }
        ok
    };
    let mut boundary_ok = Vec::with_capacity(b.len());
    let mut edge_ok = Vec::with_capacity(b.len());
    for (n, &t) in plus.t.iter().enumerate() {
        let (lo, hi) = (minus.get(n, 0), plus.get(n, 0));
        width = width.max((hi - lo).abs());
        boundary_ok.push(check(t, "boundary", lo, b[n], hi));
        edge_ok.push(check(t, "edge", minus.get(n, last), x_eps[n], plus.get(n, last)));
    }
    let strict = violations.is_empty();
    BracketReport { h, knots: b.len(), boundary_ok, edge_ok, violations, min_margin, width, strict }
}

#[derive(Clone, Debug, Serialize)]
pub struct HodographConfig {
    /// Strip width; selected from the data when absent.
    pub z_eps: Option<f64>,
    /// Number of z-cells.
    pub nz: usize,
    pub h_values: Vec<f64>,
    /// Window start; five time steps by default, past the start-up transient
    /// of the extracted density.
    pub t_start: Option<f64>,
    pub options: QuasilinearOptions,
}

impl Default for HodographConfig {
    fn default() -> Self {
        Self {
            z_eps: None,
            nz: 64,
            h_values: vec![4e-2, 2e-2, 1e-2],
            t_start: None,
            options: QuasilinearOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FamilyMember {
    pub h: f64,
    pub plus: QuasilinearRun,
    pub minus: QuasilinearRun,
    pub bracket: BracketReport,
}

#[derive(Clone, Debug)]
pub struct HodographOutput {
    pub scaled: ScaledDensity,
    pub z_eps: f64,
    pub start: usize,
    pub x: HodographField,
    pub y: QuasilinearRun,
    pub family: Vec<FamilyMember>,
}

impl HodographOutput {
    /// Window values of the extracted barrier at the strip times.
    pub fn barrier_on_window(&self, b: &Boundary) -> Vec<f64> {
        self.x.t.iter().map(|&t| b.eval(t).as_f64()).collect()
    }

    /// Bracket widths in the order of the configured h-values.
    pub fn widths(&self) -> Vec<f64> {
        self.family.iter().map(|m| m.bracket.width).collect()
    }
}

fn default_start(grid: &SpaceTimeGrid) -> usize {
    5.min(grid.nt - 1)
}

/// Full pipeline on a converged inverse solution: K, scaled density, level
/// sets, the strip problem and the perturbed family (run in parallel).
pub fn run_hodograph(
    sol: &InverseSolution,
    curve: &SurvivalCurve,
    reduced: &ReducedSpec,
    cfg: &HodographConfig,
) -> Result<HodographOutput> {
    let grid = sol.w.grid;
    if cfg.nz < 2 {
        return Err(Error::InvalidInput("hodograph needs at least two z-cells".into()));
    }
    let start = match cfg.t_start {
        Some(t) => grid.nearest_t(t),
        None => default_start(&grid),
    };
    if start >= grid.nt {
        return Err(Error::InvalidInput("hodograph window is empty".into()));
    }
    let k = solve_k(reduced, &grid)?;
    let u = sol.u_outer.as_ref().unwrap_or(&sol.u);
    let scaled = scaled_density(u, &k, reduced)?;
    let z_eps = match cfg.z_eps {
        Some(z) => z,
        None => select_z_eps(&scaled.v, &sol.b, start)?,
    };
    let z: Vec<f64> = (0..=cfg.nz).map(|i| z_eps * i as f64 / cfg.nz as f64).collect();
    let x = invert_level_sets(&scaled.v, &sol.b, &z, start)?;
    let last = cfg.nz;
    let data = StripData {
        z: z.clone(),
        start,
        x0: x.row(0).to_vec(),
        neumann: (0..x.t.len()).map(|n| x.dz_at(n, last)).collect(),
        k: &scaled.k,
        nu: &scaled.nu,
    };
    let y = solve_quasilinear(&data, curve, &cfg.options)?;
    let b_win: Vec<f64> = x.edge(0);
    let x_eps = x.edge(last);
    let family = cfg
        .h_values
        .par_iter()
        .map(|&h| {
            let plus = solve_perturbed(h, &data, curve, &cfg.options)?;
            let minus = solve_perturbed(-h, &data, curve, &cfg.options)?;
            let bracket = bracket_validate(h, &b_win, &x_eps, &plus.y, &minus.y);
            Ok(FamilyMember { h, plus, minus, bracket })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HodographOutput { scaled, z_eps, start, x, y, family })
}
