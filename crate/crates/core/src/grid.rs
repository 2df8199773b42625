//! Uniform space-time grids, nodal fields and finite-difference helpers.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::Level;
use crate::numerics::fmt_sci;

/// Uniform tensor grid on `[x_min, x_max] x [t0, t_end]` with `nx + 1` by `nt + 1` nodes.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpaceTimeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub t0: f64,
    pub t_end: f64,
    pub nt: usize,
}

impl SpaceTimeGrid {
    pub fn new(x_min: f64, x_max: f64, nx: usize, t0: f64, t_end: f64, nt: usize) -> Result<Self> {
        if !(x_min < x_max) || !(t0 < t_end) {
            return Err(Error::InvalidInput(format!("degenerate grid [{x_min}, {x_max}] x [{t0}, {t_end}]")));
        }
        if nx < 8 || nt < 8 {
            return Err(Error::InvalidInput(format!("grid needs at least 8 cells per axis, got {nx} x {nt}")));
        }
        Ok(Self { x_min, x_max, nx, t0, t_end, nt })
    }

    /// Grid with prescribed steps; the upper ends are rounded up to whole cells.
    pub fn with_steps(x_min: f64, x_max: f64, dx: f64, t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        let nx = ((x_max - x_min) / dx - 1e-9).ceil().max(1.0) as usize;
        let nt = ((t_end - t0) / dt - 1e-9).ceil().max(1.0) as usize;
        Self::new(x_min, x_min + nx as f64 * dx, nx, t0, t0 + nt as f64 * (t_end - t0) / nt as f64, nt)
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.nt as f64
    }

    #[inline]
    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    #[inline]
    pub fn t(&self, n: usize) -> f64 {
        if n == self.nt {
            self.t_end
        } else {
            self.t0 + n as f64 * self.dt()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..=self.nx).map(|j| self.x(j)).collect()
    }

    pub fn ts(&self) -> Vec<f64> {
        (0..=self.nt).map(|n| self.t(n)).collect()
    }

    /// Index of the time level closest to `t`.
    pub fn nearest_t(&self, t: f64) -> usize {
        (((t - self.t0) / self.dt()).round().max(0.0) as usize).min(self.nt)
    }

    /// Same grid with both steps halved.
    pub fn refined(&self) -> Self {
        Self { nx: 2 * self.nx, nt: 2 * self.nt, ..*self }
    }

    pub fn contains(&self, x: f64, t: f64) -> bool {
        x >= self.x_min && x <= self.x_max && t >= self.t0 && t <= self.t_end
    }
}

/// What a field stores; used in dumps and plot data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum FieldLabel {
    /// Penalized survival field.
    W,
    /// Density.
    U,
    /// Scaled density `u / K`.
    V,
    /// Scaling function.
    K,
    /// Barrier-free survival baseline.
    W0,
    Other,
}

/// Nodal values stored time-major: `values[n * (nx + 1) + j]`.
#[derive(Clone, Debug)]
pub struct Field {
    pub grid: SpaceTimeGrid,
    pub label: FieldLabel,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: SpaceTimeGrid, label: FieldLabel) -> Self {
        Self { grid, label, values: vec![0.0; (grid.nx + 1) * (grid.nt + 1)] }
    }

    pub fn from_fn(grid: SpaceTimeGrid, label: FieldLabel, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid, label);
        for n in 0..=grid.nt {
            let t = grid.t(n);
            for (j, v) in out.slice_mut(n).iter_mut().enumerate() {
                *v = f(grid.x(j), t);
            }
        }
        out
    }

    #[inline]
    pub fn get(&self, n: usize, j: usize) -> f64 {
        self.values[n * (self.grid.nx + 1) + j]
    }

    #[inline]
    pub fn set(&mut self, n: usize, j: usize, v: f64) {
        self.values[n * (self.grid.nx + 1) + j] = v;
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        let w = self.grid.nx + 1;
        &self.values[n * w..(n + 1) * w]
    }

    pub fn slice_mut(&mut self, n: usize) -> &mut [f64] {
        let w = self.grid.nx + 1;
        &mut self.values[n * w..(n + 1) * w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Bilinear interpolation; errors outside the grid.
    pub fn interpolate(&self, x: f64, t: f64) -> Result<f64> {
        let g = &self.grid;
        if !g.contains(x, t) {
            return Err(Error::OutOfDomain { x, t });
        }
        let sx = ((x - g.x_min) / g.dx()).min(g.nx as f64);
        let st = ((t - g.t0) / g.dt()).min(g.nt as f64);
        let j = (sx.floor() as usize).min(g.nx - 1);
        let n = (st.floor() as usize).min(g.nt - 1);
        let (a, b) = (sx - j as f64, st - n as f64);
        let lo = (1.0 - a) * self.get(n, j) + a * self.get(n, j + 1);
        let hi = (1.0 - a) * self.get(n + 1, j) + a * self.get(n + 1, j + 1);
        Ok((1.0 - b) * lo + b * hi)
    }

    /// Linear interpolation along one time slice.
    pub fn slice_interpolate(&self, n: usize, x: f64) -> Result<f64> {
        let g = &self.grid;
        if x < g.x_min || x > g.x_max {
            return Err(Error::OutOfDomain { x, t: g.t(n) });
        }
        let s = ((x - g.x_min) / g.dx()).min(g.nx as f64);
        let j = (s.floor() as usize).min(g.nx - 1);
        let a = s - j as f64;
        let row = self.slice(n);
        Ok((1.0 - a) * row[j] + a * row[j + 1])
    }

    /// CSV dump: header `n,t,<x_0>,...,<x_nx>`, one row per time level.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let g = &self.grid;
        write!(w, "n,t")?;
        for j in 0..=g.nx {
            write!(w, ",{}", fmt_sci(g.x(j)))?;
        }
        writeln!(w)?;
        for n in 0..=g.nt {
            write!(w, "{},{}", n, fmt_sci(g.t(n)))?;
            for v in self.slice(n) {
                write!(w, ",{}", fmt_sci(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Central,
    Forward,
    Backward,
}

/// Derivative of order 1 or 2 at index `i` of a uniformly spaced sequence.
///
/// Central stencils use 3 points, one-sided ones 3 (first order) or 4
/// (second order) points; all are second-order accurate.
pub fn stencil_derivative(values: &[f64], h: f64, i: usize, order: u8, side: Side) -> Result<f64> {
    let len = values.len();
    let f = |k: isize| -> Result<f64> {
        let idx = i as isize + k;
        if idx < 0 || idx as usize >= len {
            Err(Error::StencilOverrun { index: i, len })
        } else {
            Ok(values[idx as usize])
        }
    };
    match (order, side) {
        (1, Side::Central) => Ok((f(1)? - f(-1)?) / (2.0 * h)),
        (2, Side::Central) => Ok((f(1)? - 2.0 * f(0)? + f(-1)?) / (h * h)),
        (1, Side::Forward) => Ok((-3.0 * f(0)? + 4.0 * f(1)? - f(2)?) / (2.0 * h)),
        (2, Side::Forward) => Ok((2.0 * f(0)? - 5.0 * f(1)? + 4.0 * f(2)? - f(3)?) / (h * h)),
        (1, Side::Backward) => Ok((3.0 * f(0)? - 4.0 * f(-1)? + f(-2)?) / (2.0 * h)),
        (2, Side::Backward) => Ok((2.0 * f(0)? - 5.0 * f(-1)? + 4.0 * f(-2)? - f(-3)?) / (h * h)),
        _ => Err(Error::InvalidInput(format!("derivative order {order} not supported"))),
    }
}

/// Whole-field finite difference along `axis`.
///
/// Where the requested stencil would leave the grid, the opposite one-sided
/// stencil is used instead.
pub fn fd_derivative(field: &Field, axis: Axis, order: u8, side: Side) -> Result<Field> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidInput(format!("derivative order {order} not supported")));
    }
    let g = field.grid;
    let mut out = Field::zeros(g, FieldLabel::Other);
    let pick = |i: usize, len: usize| -> Side {
        let reach = order as usize + 1;
        match side {
            Side::Central if i == 0 => Side::Forward,
            Side::Central if i + 1 == len => Side::Backward,
            Side::Forward if i + reach >= len => Side::Backward,
            Side::Backward if i < reach => Side::Forward,
            s => s,
        }
    };
    match axis {
        Axis::X => {
            let h = g.dx();
            for n in 0..=g.nt {
                let row = field.slice(n);
                let len = row.len();
                for j in 0..len {
                    let d = stencil_derivative(row, h, j, order, pick(j, len))?;
                    out.set(n, j, d);
                }
            }
        }
        Axis::T => {
            let h = g.dt();
            let len = g.nt + 1;
            let mut col = vec![0.0; len];
            for j in 0..=g.nx {
                for (n, c) in col.iter_mut().enumerate() {
                    *c = field.get(n, j);
                }
                for n in 0..len {
                    let d = stencil_derivative(&col, h, n, order, pick(n, len))?;
                    out.set(n, j, d);
                }
            }
        }
    }
    Ok(out)
}

/// Trapezoid integral of a nodal slice over `{x > from}`.
///
/// The cell containing `from` contributes the exact integral of the linear
/// interpolant over its part above `from`, so the result is additive in `from`.
pub fn integrate_mass(slice: &[f64], grid: &SpaceTimeGrid, from: Level) -> f64 {
    let h = grid.dx();
    let full = |a: usize| -> f64 { slice[a..].windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum() };
    let b = match from {
        Level::NegInf => return full(0),
        Level::At(b) => b,
    };
    if b <= grid.x_min {
        return full(0);
    }
    if b >= grid.x_max {
        return 0.0;
    }
    let s = (b - grid.x_min) / h;
    let j = (s.floor() as usize).min(grid.nx - 1);
    let a = s - j as f64;
    let ub = (1.0 - a) * slice[j] + a * slice[j + 1];
    0.5 * (1.0 - a) * h * (ub + slice[j + 1]) + full(j + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> SpaceTimeGrid {
        SpaceTimeGrid::new(-1.0, 2.0, 300, 0.0, 1.0, 100).unwrap()
    }

    #[test]
    fn rejects_small_grids() {
        assert!(SpaceTimeGrid::new(0.0, 1.0, 7, 0.0, 1.0, 10).is_err());
        assert!(SpaceTimeGrid::new(1.0, 1.0, 10, 0.0, 1.0, 10).is_err());
    }

    #[test]
    fn derivatives_of_quadratic_are_exact() {
        let g = grid();
        let f = Field::from_fn(g, FieldLabel::Other, |x, t| 3.0 * x * x - x + t * t);
        let dx = fd_derivative(&f, Axis::X, 1, Side::Central).unwrap();
        let dxx = fd_derivative(&f, Axis::X, 2, Side::Central).unwrap();
        let dt = fd_derivative(&f, Axis::T, 1, Side::Forward).unwrap();
        for n in [0, 50, 100] {
            for j in [0, 1, 150, 299, 300] {
                let x = g.x(j);
                assert!((dx.get(n, j) - (6.0 * x - 1.0)).abs() < 1e-9);
                assert!((dxx.get(n, j) - 6.0).abs() < 1e-6);
                assert!((dt.get(n, j) - 2.0 * g.t(n)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_sided_stencil_overrun_is_reported() {
        let v = [0.0, 1.0, 2.0];
        assert!(matches!(
            stencil_derivative(&v, 1.0, 2, 1, Side::Forward),
            Err(Error::StencilOverrun { index: 2, len: 3 })
        ));
        assert!((stencil_derivative(&v, 1.0, 0, 1, Side::Forward).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mass_of_linear_density_is_exact() {
        let g = grid();
        let row: Vec<f64> = g.xs().iter().map(|x| 2.0 - x).collect();
        // int_b^2 (2 - x) dx = (2 - b)^2 / 2
        for b in [-1.0, -0.123, 0.5, 1.999] {
            let m = integrate_mass(&row, &g, Level::At(b));
            assert!((m - 0.5 * (2.0 - b) * (2.0 - b)).abs() < 1e-12, "b={b}");
        }
        assert!((integrate_mass(&row, &g, Level::NegInf) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn interpolation_out_of_domain() {
        let f = Field::zeros(grid(), FieldLabel::U);
        assert!(matches!(f.interpolate(2.5, 0.5), Err(Error::OutOfDomain { .. })));
        assert!(f.interpolate(2.0, 1.0).is_ok());
    }

    proptest! {
        #[test]
        fn mass_is_additive(a in -1.0f64..2.0, c in -1.0f64..2.0, seed in 0u64..1000) {
            let g = SpaceTimeGrid::new(-1.0, 2.0, 40, 0.0, 1.0, 8).unwrap();
            let row: Vec<f64> = (0..=40).map(|j| (((j as u64 * 7919 + seed) % 97) as f64) / 97.0).collect();
            let (lo, hi) = if a < c { (a, c) } else { (c, a) };
            let whole = integrate_mass(&row, &g, Level::At(lo));
            let upper = integrate_mass(&row, &g, Level::At(hi));
            // piece between lo and hi by fine trapezoid of the interpolant
            let m = 20000;
            let piece: f64 = (0..m).map(|k| {
                let x0 = lo + (hi - lo) * k as f64 / m as f64;
                let x1 = lo + (hi - lo) * (k + 1) as f64 / m as f64;
                let f = |x: f64| {
                    let s = ((x - g.x_min) / g.dx()).min(40.0);
                    let j = (s.floor() as usize).min(39);
                    let w = s - j as f64;
                    (1.0 - w) * row[j] + w * row[j + 1]
                };
                0.5 * (x1 - x0) * (f(x0) + f(x1))
            }).sum();
            prop_assert!((whole - upper - piece).abs() < 1e-6);
        }
    }
}
