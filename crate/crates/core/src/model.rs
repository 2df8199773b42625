//! Diffusions, initial densities, survival curves and barriers.
//!
//! Everything downstream works in the reduced frame where the volatility is
//! identically `sqrt(2)`, so that the forward operator reads
//! `w_t - w_xx + mu w_x`. [`sigma_reduce`] performs that change of variables.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{fmt_sci, hermite_eval, lerp_table, pchip_slopes, segment_index, simpson, simpson_adaptive};

pub type SpaceFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type SpaceTimeFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A drift or volatility coefficient.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    /// Depends on space only.
    Space(SpaceFn),
    SpaceTime(SpaceTimeFn),
}

impl Coefficient {
    pub fn constant(c: f64) -> Self {
        Coefficient::Constant(c)
    }

    pub fn space(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Coefficient::Space(Arc::new(f))
    }

    pub fn space_time(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Coefficient::SpaceTime(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Space(f) => f(x),
            Coefficient::SpaceTime(f) => f(x, t),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Coefficient::Constant(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_time_independent(&self) -> bool {
        !matches!(self, Coefficient::SpaceTime(_))
    }

    /// Central-difference space derivative; exact zero for constants.
    pub fn dx(&self, x: f64, t: f64) -> f64 {
        match self {
            Coefficient::Constant(_) => 0.0,
            _ => {
                let h = 1e-5 * (1.0 + x.abs());
                (self.eval(x + h, t) - self.eval(x - h, t)) / (2.0 * h)
            }
        }
    }

    /// Central-difference time derivative; exact zero when time independent.
    pub fn dt(&self, x: f64, t: f64) -> f64 {
        match self {
            Coefficient::SpaceTime(f) => {
                let h = 1e-5 * (1.0 + t.abs());
                let lo = (t - h).max(0.0);
                (f(x, t + h) - f(x, lo)) / (t + h - lo)
            }
            _ => 0.0,
        }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Space(_) => write!(f, "Space(<fn>)"),
            Coefficient::SpaceTime(_) => write!(f, "SpaceTime(<fn>)"),
        }
    }
}

/// How the initial law of the process is given.
#[derive(Clone)]
pub enum DensityKind {
    /// Point mass.
    Delta { at: f64 },
    /// Piecewise-linear density through the knots, zero outside.
    Tabulated { x: Vec<f64>, values: Vec<f64> },
    /// Closed-form density supported in `[support_floor, upper]`.
    Analytic { f: SpaceFn, upper: f64 },
}

impl fmt::Debug for DensityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityKind::Delta { at } => write!(f, "Delta({at})"),
            DensityKind::Tabulated { x, .. } => write!(f, "Tabulated({} knots)", x.len()),
            DensityKind::Analytic { upper, .. } => write!(f, "Analytic(upper={upper})"),
        }
    }
}

const MASS_TOL: f64 = 1e-8;

/// Initial density of the diffusion.
#[derive(Clone, Debug)]
pub struct InitialDensity {
    kind: DensityKind,
    support_floor: f64,
}

impl InitialDensity {
    pub fn delta(at: f64) -> Self {
        Self { kind: DensityKind::Delta { at }, support_floor: at }
    }

    pub fn tabulated(x: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if x.len() < 2 || x.len() != values.len() {
            return Err(Error::InvalidInput("tabulated density needs matching knots (>=2)".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("tabulated density knots must ascend".into()));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput(format!("density value at knot {i} is negative or non-finite")));
        }
        let mass: f64 =
            x.windows(2).zip(values.windows(2)).map(|(xw, vw)| 0.5 * (xw[1] - xw[0]) * (vw[0] + vw[1])).sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidInput(format!("tabulated density has mass {mass}, expected 1")));
        }
        let first_pos = values.iter().position(|v| *v > 0.0).unwrap_or(0);
        let support_floor = x[first_pos.saturating_sub(1)];
        Ok(Self { kind: DensityKind::Tabulated { x, values }, support_floor })
    }

    pub fn analytic(f: impl Fn(f64) -> f64 + Send + Sync + 'static, support_floor: f64, upper: f64) -> Result<Self> {
        let f: SpaceFn = Arc::new(f);
        if !(upper > support_floor) {
            return Err(Error::InvalidInput("analytic density needs upper > floor".into()));
        }
        let g = f.clone();
        let mass = simpson_adaptive(move |x| g(x), support_floor, upper, 1e-12, 1 << 22)
            .ok_or_else(|| Error::QuadratureFailure("density mass did not converge".into()))?;
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidInput(format!("analytic density has mass {mass}, expected 1")));
        }
        let probe = simpson(|x| f(x).min(0.0).abs(), support_floor, upper, 4096);
        if probe > 0.0 {
            return Err(Error::InvalidInput("analytic density takes negative values".into()));
        }
        Ok(Self { kind: DensityKind::Analytic { f, upper }, support_floor })
    }

    /// `x e^{-x}` on `[0, inf)`, truncated where the tail drops below 1e-16.
    pub fn gamma2() -> Self {
        let upper = 45.0;
        Self {
            kind: DensityKind::Analytic { f: Arc::new(|x: f64| if x >= 0.0 { x * (-x).exp() } else { 0.0 }), upper },
            support_floor: 0.0,
        }
    }

    pub fn kind(&self) -> &DensityKind {
        &self.kind
    }

    pub fn support_floor(&self) -> f64 {
        self.support_floor
    }

    pub fn is_delta(&self) -> bool {
        matches!(self.kind, DensityKind::Delta { .. })
    }

    /// Upper end of the (effective) support.
    pub fn support_ceiling(&self) -> f64 {
        match &self.kind {
            DensityKind::Delta { at } => *at,
            DensityKind::Tabulated { x, values } => {
                let last = values.iter().rposition(|v| *v > 0.0).unwrap_or(x.len() - 1);
                x[(last + 1).min(x.len() - 1)]
            }
            DensityKind::Analytic { upper, .. } => *upper,
        }
    }

    /// Density value; `None` for a point mass.
    pub fn density(&self, x: f64) -> Option<f64> {
        match &self.kind {
            DensityKind::Delta { .. } => None,
            DensityKind::Tabulated { x: xs, values } => {
                if x < xs[0] || x > xs[xs.len() - 1] {
                    Some(0.0)
                } else {
                    Some(lerp_table(xs, values, x))
                }
            }
            DensityKind::Analytic { f, upper } => {
                if x < self.support_floor || x > *upper {
                    Some(0.0)
                } else {
                    Some(f(x))
                }
            }
        }
    }

    /// `P(X_0 > x)` evaluated at every node of an ascending vector.
    pub fn tail_on_nodes(&self, nodes: &[f64]) -> Vec<f64> {
        match &self.kind {
            DensityKind::Delta { at } => nodes.iter().map(|&x| if x < *at { 1.0 } else { 0.0 }).collect(),
            _ => {
                let n = nodes.len();
                let mut out = vec![0.0; n];
                let ceiling = self.support_ceiling();
                let last = nodes[n - 1];
                let mut acc = if last < ceiling { self.integral(last, ceiling) } else { 0.0 };
                out[n - 1] = acc;
                for j in (0..n - 1).rev() {
                    acc += self.integral(nodes[j], nodes[j + 1]);
                    out[j] = acc.min(1.0);
                }
                out
            }
        }
    }

    fn integral(&self, a: f64, b: f64) -> f64 {
        let lo = a.max(self.support_floor);
        let hi = b.min(self.support_ceiling());
        if hi <= lo {
            return 0.0;
        }
        match &self.kind {
            DensityKind::Delta { at } => {
                if a < *at && *at <= b {
                    1.0
                } else {
                    0.0
                }
            }
            DensityKind::Tabulated { x, values } => {
                // exact for the piecewise-linear interpolant
                let mut pts = vec![lo];
                pts.extend(x.iter().copied().filter(|v| *v > lo && *v < hi));
                pts.push(hi);
                pts.windows(2)
                    .map(|w| 0.5 * (w[1] - w[0]) * (lerp_table(x, values, w[0]) + lerp_table(x, values, w[1])))
                    .sum()
            }
            DensityKind::Analytic { f, .. } => {
                let panels = (((hi - lo) / 1e-3).ceil() as usize).clamp(8, 1 << 16);
                simpson(|x| f(x), lo, hi, panels)
            }
        }
    }

    /// Inverse CDF table `(u_levels, x_values)` for sampling; `None` for a point mass.
    pub(crate) fn quantile_table(&self, size: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.is_delta() {
            return None;
        }
        let lo = self.support_floor;
        let hi = self.support_ceiling();
        let xs: Vec<f64> = (0..=size).map(|i| lo + (hi - lo) * i as f64 / size as f64).collect();
        let tails = self.tail_on_nodes(&xs);
        let total = tails[0].max(f64::MIN_POSITIVE);
        let mut cdf: Vec<f64> = tails.iter().map(|t| (1.0 - t / total).clamp(0.0, 1.0)).collect();
        for i in 1..cdf.len() {
            if cdf[i] < cdf[i - 1] {
                cdf[i] = cdf[i - 1];
            }
        }
        Some((cdf, xs))
    }

    /// One-sided forward derivatives `(u', u'', u''')` at the support floor.
    pub fn floor_derivatives(&self, h: f64) -> Result<[f64; 3]> {
        if self.is_delta() {
            return Err(Error::InvalidInput("a point mass has no derivatives".into()));
        }
        let x0 = self.support_floor;
        let f = |k: f64| self.density(x0 + k * h).unwrap_or(0.0);
        let (f0, f1, f2, f3, f4) = (f(0.0), f(1.0), f(2.0), f(3.0), f(4.0));
        let d1 = (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h);
        let d2 = (2.0 * f0 - 5.0 * f1 + 4.0 * f2 - f3) / (h * h);
        let d3 = (-5.0 * f0 + 18.0 * f1 - 24.0 * f2 + 14.0 * f3 - 3.0 * f4) / (2.0 * h * h * h);
        Ok([d1, d2, d3])
    }
}

/// The diffusion `dX = mu(X,t) dt + sigma(X,t) dB` with its initial law.
#[derive(Clone, Debug)]
pub struct DiffusionSpec {
    pub mu: Coefficient,
    pub sigma: Coefficient,
    pub initial_density: InitialDensity,
    /// Spatial interval used for grid placement and coefficient checks.
    pub truncation_hint: (f64, f64),
    /// Declared lower bound for `sigma`.
    pub sigma_floor: f64,
}

impl DiffusionSpec {
    pub fn new(mu: Coefficient, sigma: Coefficient, initial: InitialDensity, truncation_hint: (f64, f64)) -> Self {
        Self { mu, sigma, initial_density: initial, truncation_hint, sigma_floor: 1e-8 }
    }

    /// Driftless diffusion with constant volatility.
    pub fn brownian(sigma: f64, initial: InitialDensity, truncation_hint: (f64, f64)) -> Self {
        Self::new(Coefficient::Constant(0.0), Coefficient::Constant(sigma), initial, truncation_hint)
    }

    /// Ornstein–Uhlenbeck: `dX = kappa (theta - X) dt + sigma dB`.
    pub fn ornstein_uhlenbeck(
        kappa: f64,
        theta: f64,
        sigma: f64,
        initial: InitialDensity,
        truncation_hint: (f64, f64),
    ) -> Self {
        Self::new(
            Coefficient::space(move |x| kappa * (theta - x)),
            Coefficient::Constant(sigma),
            initial,
            truncation_hint,
        )
    }

    pub fn with_sigma_floor(mut self, floor: f64) -> Self {
        self.sigma_floor = floor;
        self
    }

    /// Dense sampling of the coefficients over the truncation window and `[0, horizon]`.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        let (a, b) = self.truncation_hint;
        if !(a < b) {
            return Err(Error::InvalidInput("truncation hint must be an ascending interval".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::InvalidInput("sigma floor must be positive".into()));
        }
        for i in 0..=128 {
            let x = a + (b - a) * i as f64 / 128.0;
            for k in 0..=16 {
                let t = horizon * k as f64 / 16.0;
                let (m, s) = (self.mu.eval(x, t), self.sigma.eval(x, t));
                if !m.is_finite() || !s.is_finite() {
                    return Err(Error::InvalidInput(format!("non-finite coefficient at ({x}, {t})")));
                }
                if s < self.sigma_floor {
                    return Err(Error::InvalidInput(format!(
                        "sigma({x}, {t}) = {s} below declared floor {}",
                        self.sigma_floor
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Survival curves
// ---------------------------------------------------------------------------

/// Interpolation order of a survival curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveInterp {
    Linear,
    Cubic,
}

/// A validated sample of a survival probability curve in class P0.
#[derive(Clone, Debug)]
pub struct SurvivalCurve {
    t: Vec<f64>,
    p: Vec<f64>,
    pdot: Vec<f64>,
    interp: CurveInterp,
    strict_decrease: bool,
}

const P0_TOL: f64 = 1e-12;

/// Validates raw samples against the class P0 and builds the interpolant.
pub fn validate_p0(t: &[f64], p: &[f64], pdot: Option<&[f64]>, interp: CurveInterp) -> Result<SurvivalCurve> {
    if t.len() < 2 || t.len() != p.len() {
        return Err(Error::InvalidInput("survival curve needs at least two (t, p) samples".into()));
    }
    if t[0] != 0.0 {
        return Err(Error::P0Violation { index: 0, reason: format!("first knot at t={} instead of 0", t[0]) });
    }
    if let Some(i) = t.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput(format!("t not strictly ascending at index {}", i + 1)));
    }
    if (p[0] - 1.0).abs() > P0_TOL {
        return Err(Error::P0Violation { index: 0, reason: format!("p(0)={} differs from 1", p[0]) });
    }
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::P0Violation { index: i, reason: "non-finite value".into() });
    }
    if let Some(i) = p.windows(2).position(|w| w[1] > w[0]) {
        return Err(Error::P0Violation { index: i + 1, reason: "increase detected".into() });
    }
    let last = p.len() - 1;
    if p[last] <= 0.0 {
        return Err(Error::P0Violation { index: last, reason: format!("p(T)={} is not positive", p[last]) });
    }
    let pdot = match pdot {
        Some(d) => {
            if d.len() != t.len() || d.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("supplied pdot must be finite and match the knots".into()));
            }
            d.to_vec()
        }
        None => match interp {
            CurveInterp::Cubic => pchip_slopes(t, p),
            CurveInterp::Linear => {
                let s: Vec<f64> = (0..last).map(|i| (p[i + 1] - p[i]) / (t[i + 1] - t[i])).collect();
                (0..=last)
                    .map(|i| match i {
                        0 => s[0],
                        i if i == last => s[last - 1],
                        i => 0.5 * (s[i - 1] + s[i]),
                    })
                    .collect()
            }
        },
    };
    let strict_decrease = pdot.iter().all(|d| *d < 0.0);
    Ok(SurvivalCurve { t: t.to_vec(), p: p.to_vec(), pdot, interp, strict_decrease })
}

impl SurvivalCurve {
    /// Samples a closed-form curve and its derivative on `n + 1` uniform knots over `[0, horizon]`.
    pub fn from_fn(p: impl Fn(f64) -> f64, pdot: impl Fn(f64) -> f64, horizon: f64, n: usize) -> Result<Self> {
        let t: Vec<f64> = (0..=n).map(|i| horizon * i as f64 / n as f64).collect();
        let pv: Vec<f64> = t.iter().map(|&s| p(s)).collect();
        let dv: Vec<f64> = t.iter().map(|&s| pdot(s)).collect();
        validate_p0(&t, &pv, Some(&dv), CurveInterp::Cubic)
    }

    /// `p(t) = exp(-rate t)`.
    pub fn exponential(rate: f64, horizon: f64, n: usize) -> Result<Self> {
        Self::from_fn(|s| (-rate * s).exp(), |s| -rate * (-rate * s).exp(), horizon, n)
    }

    /// `p == 1`.
    pub fn constant_one(horizon: f64, n: usize) -> Result<Self> {
        Self::from_fn(|_| 1.0, |_| 0.0, horizon, n)
    }

    pub fn knots(&self) -> &[f64] {
        &self.t
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn slopes(&self) -> &[f64] {
        &self.pdot
    }

    pub fn interp(&self) -> CurveInterp {
        self.interp
    }

    pub fn horizon(&self) -> f64 {
        self.t[self.t.len() - 1]
    }

    /// Whether `pdot < 0` at every knot.
    pub fn is_strict_decrease(&self) -> bool {
        self.strict_decrease
    }

    pub fn p(&self, t: f64) -> f64 {
        match self.interp {
            CurveInterp::Linear => lerp_table(&self.t, &self.p, t),
            CurveInterp::Cubic => {
                let tc = t.clamp(self.t[0], self.horizon());
                hermite_eval(&self.t, &self.p, &self.pdot, tc).0
            }
        }
    }

    pub fn pdot(&self, t: f64) -> f64 {
        match self.interp {
            CurveInterp::Linear => lerp_table(&self.t, &self.pdot, t),
            CurveInterp::Cubic => {
                let tc = t.clamp(self.t[0], self.horizon());
                hermite_eval(&self.t, &self.p, &self.pdot, tc).1
            }
        }
    }

    /// Second derivative by divided differences of `pdot`.
    pub fn pddot(&self, t: f64) -> f64 {
        let i = segment_index(&self.t, t);
        let h = (self.t[i + 1] - self.t[i]).min(1e-3 * self.horizon().max(1e-12));
        let lo = (t - h).max(self.t[0]);
        let hi = (t + h).min(self.horizon());
        (self.pdot(hi) - self.pdot(lo)) / (hi - lo)
    }

    /// `max |pdot|` over the knots.
    pub fn sup_abs_slope(&self) -> f64 {
        self.pdot.iter().fold(0.0f64, |m, d| m.max(d.abs()))
    }

    /// The perturbed family `p(t) - h t`, revalidated in P0.
    pub fn tilted(&self, h: f64) -> Result<Self> {
        let p: Vec<f64> = self.t.iter().zip(&self.p).map(|(t, p)| p - h * t).collect();
        let d: Vec<f64> = self.pdot.iter().map(|d| d - h).collect();
        let c = validate_p0(&self.t, &p, Some(&d), self.interp)?;
        if self.strict_decrease && !c.strict_decrease {
            let i = c.pdot.iter().position(|d| *d >= 0.0).unwrap_or(0);
            return Err(Error::P0Violation { index: i, reason: format!("tilt h={h} destroys strict decrease") });
        }
        Ok(c)
    }

    /// Reads CSV with header `t,p[,pdot]`.
    pub fn read_csv(reader: impl Read, interp: CurveInterp) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Csv { row: 0, msg: e.to_string() })?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        let with_pdot = match cols.as_slice() {
            ["t", "p"] => false,
            ["t", "p", "pdot"] => true,
            _ => return Err(Error::Csv { row: 0, msg: format!("expected header t,p[,pdot], got {cols:?}") }),
        };
        let (mut t, mut p, mut d) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::Csv { row, msg: e.to_string() })?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .ok_or_else(|| Error::Csv { row, msg: "missing field".into() })?
                    .parse::<f64>()
                    .map_err(|e| Error::Csv { row, msg: e.to_string() })
            };
            let tv = num(0)?;
            if row == 1 && tv != 0.0 {
                return Err(Error::Csv { row, msg: format!("first row must have t=0, got {tv}") });
            }
            if let Some(&prev) = t.last() {
                if !(tv > prev) {
                    return Err(Error::Csv { row, msg: format!("t={tv} not strictly above previous {prev}") });
                }
            }
            t.push(tv);
            p.push(num(1)?);
            if with_pdot {
                d.push(num(2)?);
            }
        }
        validate_p0(&t, &p, with_pdot.then_some(d.as_slice()), interp)
    }

    pub fn read_csv_path(path: &Path, interp: CurveInterp) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, interp)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,p,pdot")?;
        for i in 0..self.t.len() {
            writeln!(w, "{},{},{}", fmt_sci(self.t[i]), fmt_sci(self.p[i]), fmt_sci(self.pdot[i]))?;
        }
        Ok(())
    }
}

/// Discrete infimum of `(p(s) - p(t)) / (t - s)` over knot pairs in `[t1, t2]`.
///
/// Every secant slope is a weighted mean of the adjacent-knot slopes it spans,
/// so the infimum over all pairs is attained by a neighbouring pair.
pub fn slope_floor(curve: &SurvivalCurve, t1: f64, t2: f64) -> Result<f64> {
    let idx: Vec<usize> = (0..curve.t.len()).filter(|&i| curve.t[i] >= t1 && curve.t[i] <= t2).collect();
    if t1 >= t2 || idx.len() < 2 {
        return Err(Error::EmptyWindow { t1, t2 });
    }
    Ok(idx
        .windows(2)
        .map(|w| (curve.p[w[0]] - curve.p[w[1]]) / (curve.t[w[1]] - curve.t[w[0]]))
        .fold(f64::INFINITY, f64::min))
}

// ---------------------------------------------------------------------------
// Barriers
// ---------------------------------------------------------------------------

/// A barrier value: finite level or the `-inf` sentinel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Level {
    NegInf,
    At(f64),
}

impl Level {
    pub fn is_finite(self) -> bool {
        matches!(self, Level::At(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Level::At(v) => Some(v),
            Level::NegInf => None,
        }
    }

    /// `f64::NEG_INFINITY` for the sentinel. Only for comparisons and output.
    pub fn as_f64(self) -> f64 {
        self.finite().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn max(self, other: Level) -> Level {
        match (self, other) {
            (Level::NegInf, o) => o,
            (s, Level::NegInf) => s,
            (Level::At(a), Level::At(b)) => Level::At(a.max(b)),
        }
    }

    pub fn shifted(self, d: f64) -> Level {
        match self {
            Level::At(v) => Level::At(v + d),
            Level::NegInf => Level::NegInf,
        }
    }
}

impl PartialOrd for Level {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        use std::cmp::Ordering::*;
        match (self, other) {
            (Level::NegInf, Level::NegInf) => Some(Equal),
            (Level::NegInf, _) => Some(Less),
            (_, Level::NegInf) => Some(Greater),
            (Level::At(a), Level::At(b)) => a.partial_cmp(b),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::NegInf => write!(f, "-inf"),
            Level::At(v) => write!(f, "{}", fmt_sci(*v)),
        }
    }
}

/// Time-sampled barrier.
///
/// Between two finite knots the barrier is linear. An open segment touching a
/// `-inf` knot is `-inf`. A jump is encoded by two knots sharing a time; the
/// value at such a time is the larger of the two.
#[derive(Clone, Debug, PartialEq)]
pub struct Boundary {
    t: Vec<f64>,
    b: Vec<Level>,
}

impl Boundary {
    pub fn new(t: Vec<f64>, b: Vec<Level>) -> Result<Self> {
        if t.is_empty() || t.len() != b.len() {
            return Err(Error::InvalidInput("boundary needs matching non-empty knots".into()));
        }
        for i in 1..t.len() {
            if t[i] < t[i - 1] {
                return Err(Error::InvalidInput(format!("boundary knots descend at index {i}")));
            }
            if i >= 2 && t[i] == t[i - 2] {
                return Err(Error::InvalidInput(format!("more than two knots share t={}", t[i])));
            }
        }
        if let Some(i) = b.iter().position(|l| matches!(l, Level::At(v) if !v.is_finite())) {
            return Err(Error::InvalidInput(format!("barrier value at knot {i} is not finite")));
        }
        Ok(Self { t, b })
    }

    pub fn constant(level: Level, t: &[f64]) -> Self {
        Self { t: t.to_vec(), b: vec![level; t.len()] }
    }

    pub fn from_fn(t: &[f64], f: impl Fn(f64) -> Level) -> Self {
        Self { t: t.to_vec(), b: t.iter().map(|&s| f(s)).collect() }
    }

    pub fn knots(&self) -> &[f64] {
        &self.t
    }

    pub fn levels(&self) -> &[Level] {
        &self.b
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Barrier value at `t` (clamped to the knot range).
    pub fn eval(&self, t: f64) -> Level {
        let n = self.t.len();
        if n == 1 || t <= self.t[0] {
            let mut v = self.b[0];
            if n > 1 && self.t[1] == self.t[0] {
                v = v.max(self.b[1]);
            }
            return v;
        }
        if t >= self.t[n - 1] {
            let mut v = self.b[n - 1];
            if self.t[n - 2] == self.t[n - 1] {
                v = v.max(self.b[n - 2]);
            }
            return v;
        }
        let i = segment_index(&self.t, t);
        if t == self.t[i] {
            let mut v = self.b[i];
            if i > 0 && self.t[i - 1] == t {
                v = v.max(self.b[i - 1]);
            }
            if self.t[i + 1] == t {
                v = v.max(self.b[i + 1]);
            }
            return v;
        }
        match (self.b[i], self.b[i + 1]) {
            (Level::At(a), Level::At(c)) => {
                let s = (t - self.t[i]) / (self.t[i + 1] - self.t[i]);
                Level::At(a + s * (c - a))
            }
            _ => Level::NegInf,
        }
    }

    pub fn map(&self, f: impl Fn(f64, Level) -> Level) -> Boundary {
        Boundary { t: self.t.clone(), b: self.t.iter().zip(&self.b).map(|(&t, &l)| f(t, l)).collect() }
    }

    pub fn all_neg_inf(&self) -> bool {
        self.b.iter().all(|l| !l.is_finite())
    }

    /// Finite values on `[t1, t2]`, or `None` if a `-inf` knot lies in the window.
    pub fn finite_window(&self, t1: f64, t2: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut ts = Vec::new();
        let mut bs = Vec::new();
        for (t, l) in self.t.iter().zip(&self.b) {
            if *t >= t1 && *t <= t2 {
                ts.push(*t);
                bs.push(l.finite()?);
            }
        }
        Some((ts, bs))
    }

    /// Writes CSV `t,b` with the literal token `-inf` for the sentinel.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,b")?;
        for (t, l) in self.t.iter().zip(&self.b) {
            writeln!(w, "{},{}", fmt_sci(*t), l)?;
        }
        Ok(())
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Csv { row: 0, msg: e.to_string() })?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "b"] {
            return Err(Error::Csv { row: 0, msg: "expected header t,b".into() });
        }
        let (mut t, mut b) = (Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::Csv { row, msg: e.to_string() })?;
            let tv: f64 = rec
                .get(0)
                .unwrap_or("")
                .parse()
                .map_err(|e: std::num::ParseFloatError| Error::Csv { row, msg: e.to_string() })?;
            let raw = rec.get(1).unwrap_or("");
            let lv = if raw == "-inf" {
                Level::NegInf
            } else {
                Level::At(raw.parse().map_err(|e: std::num::ParseFloatError| Error::Csv { row, msg: e.to_string() })?)
            };
            if let Some(&prev) = t.last() {
                if tv < prev {
                    return Err(Error::Csv { row, msg: format!("t={tv} below previous {prev}") });
                }
            }
            t.push(tv);
            b.push(lv);
        }
        Boundary::new(t, b).map_err(|e| Error::Csv { row: 0, msg: e.to_string() })
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Upper-semicontinuous envelope `b* = max(b, limsup b)`.
///
/// [`Boundary::eval`] already returns the larger of the two one-sided limits
/// at a duplicated time, and an open segment touching `-inf` stays `-inf`, so
/// every sampled barrier evaluates upper-semicontinuously. The envelope is the
/// canonical form: duplicated knots with equal values (no jump) are merged.
pub fn usc_envelope(boundary: &Boundary) -> Boundary {
    let mut t = Vec::with_capacity(boundary.t.len());
    let mut b = Vec::with_capacity(boundary.t.len());
    for (i, (&ti, &bi)) in boundary.t.iter().zip(&boundary.b).enumerate() {
        if i > 0 && boundary.t[i - 1] == ti && boundary.b[i - 1] == bi {
            continue;
        }
        t.push(ti);
        b.push(bi);
    }
    Boundary { t, b }
}

// ---------------------------------------------------------------------------
// Reduction to unit diffusion (sigma == sqrt 2)
// ---------------------------------------------------------------------------

#[derive(Clone)]
enum MapKind {
    Identity,
    /// `y = factor * x`.
    Linear {
        factor: f64,
    },
    /// Time-independent sigma tabulated on a fine grid.
    Table {
        x: Vec<f64>,
        y: Vec<f64>,
        dy: Vec<f64>,
    },
    General,
}

/// The space transform `y = Y(x,t) = int_0^x sqrt2 / sigma(z,t) dz` and its inverse.
#[derive(Clone)]
pub struct SpaceMap {
    sigma: Coefficient,
    kind: MapKind,
}

const MAP_TOL: f64 = 1e-10;

impl SpaceMap {
    fn build(sigma: &Coefficient, domain: (f64, f64)) -> Result<Self> {
        let kind = match sigma {
            Coefficient::Constant(s) if (*s - SQRT_2).abs() == 0.0 => MapKind::Identity,
            Coefficient::Constant(s) => MapKind::Linear { factor: SQRT_2 / s },
            Coefficient::Space(f) => {
                let (a, b) = (domain.0.min(0.0), domain.1.max(0.0));
                let n = (((b - a) / 1e-3).ceil() as usize).max(64);
                let x: Vec<f64> = (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect();
                let dy: Vec<f64> = x.iter().map(|&v| SQRT_2 / f(v)).collect();
                let i0 = x.iter().position(|v| *v >= 0.0).unwrap();
                // exact integral from 0 to x[i0], then cumulative Simpson per cell
                let mut y = vec![0.0; n + 1];
                y[i0] = simpson(|z| SQRT_2 / f(z), 0.0, x[i0], 8);
                for i in i0 + 1..=n {
                    y[i] = y[i - 1] + simpson(|z| SQRT_2 / f(z), x[i - 1], x[i], 8);
                }
                for i in (0..i0).rev() {
                    y[i] = y[i + 1] - simpson(|z| SQRT_2 / f(z), x[i], x[i + 1], 8);
                }
                MapKind::Table { x, y, dy }
            }
            Coefficient::SpaceTime(_) => MapKind::General,
        };
        Ok(Self { sigma: sigma.clone(), kind })
    }

    fn integral(&self, x: f64, t: f64) -> f64 {
        let s = &self.sigma;
        let n = ((x.abs() / 1e-3).ceil() as usize).clamp(16, 1 << 20);
        simpson(|z| SQRT_2 / s.eval(z, t), 0.0, x, n)
    }

    /// `y = Y(x, t)`.
    pub fn forward(&self, x: f64, t: f64) -> f64 {
        match &self.kind {
            MapKind::Identity => x,
            MapKind::Linear { factor } => factor * x,
            MapKind::Table { x: xs, y, dy } => {
                if x >= xs[0] && x <= xs[xs.len() - 1] {
                    hermite_eval(xs, y, dy, x).0
                } else {
                    self.integral(x, t)
                }
            }
            MapKind::General => self.integral(x, t),
        }
    }

    /// `x = X(y, t)`, the inverse of [`SpaceMap::forward`].
    pub fn inverse(&self, y: f64, t: f64) -> f64 {
        match &self.kind {
            MapKind::Identity => y,
            MapKind::Linear { factor } => y / factor,
            MapKind::Table { x: xs, y: ys, .. } if y >= ys[0] && y <= ys[ys.len() - 1] => {
                let i = segment_index(ys, y);
                let (x0, x1) = (xs[i], xs[i + 1]);
                self.newton_inverse(y, t, x0 + (x1 - x0) * (y - ys[i]) / (ys[i + 1] - ys[i]))
            }
            _ => {
                let s0 = self.sigma.eval(0.0, t);
                self.newton_inverse(y, t, y * s0 / SQRT_2)
            }
        }
    }

    fn newton_inverse(&self, y: f64, t: f64, guess: f64) -> f64 {
        let mut x = guess;
        for _ in 0..60 {
            let r = self.forward(x, t) - y;
            if r.abs() < MAP_TOL * 1e-2 {
                break;
            }
            x -= r * self.sigma.eval(x, t) / SQRT_2;
        }
        x
    }
}

/// A diffusion transformed to unit volatility `sqrt 2`, together with the maps.
#[derive(Clone)]
pub struct ReducedSpec {
    original: DiffusionSpec,
    reduced: DiffusionSpec,
    map: Arc<SpaceMap>,
}

impl fmt::Debug for ReducedSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReducedSpec").field("original", &self.original).field("reduced", &self.reduced).finish()
    }
}

impl ReducedSpec {
    pub fn original(&self) -> &DiffusionSpec {
        &self.original
    }

    /// The diffusion in reduced coordinates (`sigma == sqrt 2`).
    pub fn spec(&self) -> &DiffusionSpec {
        &self.reduced
    }

    pub fn y_of(&self, x: f64, t: f64) -> f64 {
        self.map.forward(x, t)
    }

    pub fn x_of(&self, y: f64, t: f64) -> f64 {
        self.map.inverse(y, t)
    }

    /// Reduced drift.
    pub fn mu(&self, y: f64, t: f64) -> f64 {
        self.reduced.mu.eval(y, t)
    }

    /// Whether the reduced drift is identically zero.
    pub fn is_driftless(&self) -> bool {
        self.reduced.mu.as_constant() == Some(0.0)
    }

    /// `b~(t) = Y(b(t), t)`.
    pub fn map_boundary(&self, b: &Boundary) -> Boundary {
        b.map(|t, l| match l {
            Level::At(v) => Level::At(self.y_of(v, t)),
            Level::NegInf => Level::NegInf,
        })
    }

    /// Maps a barrier from reduced coordinates back to the original ones.
    pub fn unmap_boundary(&self, b: &Boundary) -> Boundary {
        b.map(|t, l| match l {
            Level::At(v) => Level::At(self.x_of(v, t)),
            Level::NegInf => Level::NegInf,
        })
    }
}

/// Transforms `spec` to unit diffusion coefficient `sqrt 2`.
pub fn sigma_reduce(spec: &DiffusionSpec) -> Result<ReducedSpec> {
    let (a, b) = spec.truncation_hint;
    // dense floor check; the maps below assume it
    for i in 0..=512 {
        let x = a + (b - a) * i as f64 / 512.0;
        for k in 0..=8 {
            let t = k as f64 / 8.0;
            let s = spec.sigma.eval(x, t);
            if !(s >= spec.sigma_floor) || !s.is_finite() {
                return Err(Error::QuadratureFailure(format!(
                    "sigma({x}, {t}) = {s} below declared floor {}",
                    spec.sigma_floor
                )));
            }
        }
    }
    let map = Arc::new(SpaceMap::build(&spec.sigma, spec.truncation_hint)?);

    let mu = match (&map.kind, &spec.mu, &spec.sigma) {
        (MapKind::Identity, m, _) => m.clone(),
        (MapKind::Linear { factor }, Coefficient::Constant(m), _) => Coefficient::Constant(m * factor),
        (MapKind::Linear { factor }, m, _) => {
            let (m, f) = (m.clone(), *factor);
            if m.is_time_independent() {
                Coefficient::space(move |y| f * m.eval(y / f, 0.0))
            } else {
                Coefficient::space_time(move |y, t| f * m.eval(y / f, t))
            }
        }
        (_, m, s) => {
            let (m, s, mp) = (m.clone(), s.clone(), map.clone());
            let time_dep = !(m.is_time_independent() && s.is_time_independent());
            let drift = move |y: f64, t: f64| {
                let x = mp.inverse(y, t);
                let sig = s.eval(x, t);
                let mut v = SQRT_2 * m.eval(x, t) / sig - s.dx(x, t) / SQRT_2;
                if !s.is_time_independent() {
                    let n = ((x.abs() / 1e-3).ceil() as usize).clamp(16, 1 << 16);
                    v -= simpson(|z| SQRT_2 * s.dt(z, t) / s.eval(z, t).powi(2), 0.0, x, n);
                }
                v
            };
            if time_dep {
                Coefficient::space_time(drift)
            } else {
                Coefficient::space(move |y| drift(y, 0.0))
            }
        }
    };

    let initial = match spec.initial_density.kind() {
        _ if matches!(map.kind, MapKind::Identity) => spec.initial_density.clone(),
        DensityKind::Delta { at } => InitialDensity::delta(map.forward(*at, 0.0)),
        DensityKind::Tabulated { x, values } => {
            let y: Vec<f64> = x.iter().map(|&v| map.forward(v, 0.0)).collect();
            let vals: Vec<f64> = x.iter().zip(values).map(|(&xv, &u)| u * spec.sigma.eval(xv, 0.0) / SQRT_2).collect();
            let floor = map.forward(spec.initial_density.support_floor(), 0.0);
            InitialDensity { kind: DensityKind::Tabulated { x: y, values: vals }, support_floor: floor }
        }
        DensityKind::Analytic { f, upper } => {
            let (f, s, mp) = (f.clone(), spec.sigma.clone(), map.clone());
            let floor = map.forward(spec.initial_density.support_floor(), 0.0);
            let up = map.forward(*upper, 0.0);
            InitialDensity {
                kind: DensityKind::Analytic {
                    f: Arc::new(move |y| {
                        let x = mp.inverse(y, 0.0);
                        f(x) * s.eval(x, 0.0) / SQRT_2
                    }),
                    upper: up,
                },
                support_floor: floor,
            }
        }
    };

    let trunc = (map.forward(a, 0.0), map.forward(b, 0.0));
    let reduced = DiffusionSpec {
        mu,
        sigma: Coefficient::Constant(SQRT_2),
        initial_density: initial,
        truncation_hint: trunc,
        sigma_floor: SQRT_2,
    };
    Ok(ReducedSpec { original: spec.clone(), reduced, map })
}

// ---------------------------------------------------------------------------
// Compatibility conditions
// ---------------------------------------------------------------------------

/// Corner residual at `(x, t) = (support floor, 0)` in both coordinate frames.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CompatibilityResidual {
    pub order: u8,
    pub original: f64,
    pub reduced: f64,
}

/// Residuals of the corner compatibility conditions up to `order` (1 or 2).
pub fn compatibility_residuals(
    spec: &DiffusionSpec,
    curve: &SurvivalCurve,
    order: u8,
) -> Result<Vec<CompatibilityResidual>> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidInput(format!("compatibility order {order} not in {{1,2}}")));
    }
    let reduced = sigma_reduce(spec)?;
    let width = spec.truncation_hint.1 - spec.truncation_hint.0;
    let h0 = 1e-4 * width;
    let orig = spec.initial_density.floor_derivatives(h0)?;
    let red_width = reduced.reduced.truncation_hint.1 - reduced.reduced.truncation_hint.0;
    let red = reduced.reduced.initial_density.floor_derivatives(1e-4 * red_width)?;
    let pd0 = curve.pdot(0.0);
    let floor = spec.initial_density.support_floor();
    let s0 = spec.sigma.eval(floor, 0.0);

    let mut out = vec![CompatibilityResidual {
        order: 1,
        original: 2.0 * pd0 + s0 * s0 * orig[0],
        reduced: 2.0 * pd0 + 2.0 * red[0],
    }];
    if order == 2 {
        if pd0 == 0.0 {
            return Err(Error::DegenerateSlope);
        }
        let pdd0 = curve.pddot(0.0);
        let second = |d: [f64; 3]| {
            let bdot = d[1] / pd0;
            pdd0 + d[2] + bdot * d[1]
        };
        out.push(CompatibilityResidual { order: 2, original: second(orig), reduced: second(red) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_curve() -> SurvivalCurve {
        SurvivalCurve::exponential(1.0, 1.0, 100).unwrap()
    }

    #[test]
    fn exponential_curve_is_strict() {
        let c = exp_curve();
        assert!(c.is_strict_decrease());
        assert!((c.p(0.5) - (-0.5f64).exp()).abs() < 1e-9);
        assert!((c.pdot(0.37) + (-0.37f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn constant_curve_is_not_strict() {
        let c = SurvivalCurve::constant_one(1.0, 10).unwrap();
        assert!(!c.is_strict_decrease());
        let raw = validate_p0(&[0.0, 0.5, 1.0], &[1.0, 1.0, 1.0], None, CurveInterp::Cubic).unwrap();
        assert!(!raw.is_strict_decrease());
    }

    #[test]
    fn p0_violations_name_the_index() {
        let t = [0.0, 0.5, 1.0];
        match validate_p0(&t, &[0.9, 0.8, 0.7], None, CurveInterp::Linear) {
            Err(Error::P0Violation { index: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match validate_p0(&t, &[1.0, 0.8, 0.85], None, CurveInterp::Linear) {
            Err(Error::P0Violation { index: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match validate_p0(&t, &[1.0, 0.8, 0.0], None, CurveInterp::Linear) {
            Err(Error::P0Violation { index: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn slope_floor_examples() {
        let c = exp_curve();
        let l = slope_floor(&c, 0.0, 1.0).unwrap();
        assert!((l - (-1.0f64).exp()).abs() < 5e-3);
        let flat = SurvivalCurve::constant_one(1.0, 10).unwrap();
        assert_eq!(slope_floor(&flat, 0.0, 1.0).unwrap(), 0.0);
        let lin = validate_p0(&[0.0, 0.25, 0.5], &[1.0, 0.75, 0.5], None, CurveInterp::Linear).unwrap();
        assert!((slope_floor(&lin, 0.0, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(slope_floor(&c, 0.333, 0.335), Err(Error::EmptyWindow { .. })));
    }

    #[test]
    fn slope_floor_for_general_rate() {
        // inf of secant slopes of e^{-2t} on [0,1] is attained at the right end: 2 e^{-2}
        let c = SurvivalCurve::exponential(2.0, 1.0, 1000).unwrap();
        let l = slope_floor(&c, 0.0, 1.0).unwrap();
        assert!((l - 2.0 * (-2.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn sigma_reduce_constant_cases() {
        let trunc = (-3.0, 3.0);
        let id = sigma_reduce(&DiffusionSpec::brownian(SQRT_2, InitialDensity::delta(0.0), trunc)).unwrap();
        assert_eq!(id.y_of(1.3, 0.2), 1.3);
        assert_eq!(id.mu(0.7, 0.1), 0.0);

        let unit = sigma_reduce(&DiffusionSpec::brownian(1.0, InitialDensity::delta(0.0), trunc)).unwrap();
        assert!((unit.y_of(1.5, 0.0) - SQRT_2 * 1.5).abs() < 1e-14);
        assert!((unit.x_of(unit.y_of(-0.7, 0.3), 0.3) + 0.7).abs() < 1e-14);
        assert_eq!(unit.mu(0.3, 0.0), 0.0);

        let spec = DiffusionSpec::new(
            Coefficient::Constant(0.3),
            Coefficient::Constant(2.0),
            InitialDensity::delta(0.0),
            trunc,
        );
        let r = sigma_reduce(&spec).unwrap();
        assert!((r.y_of(2.0, 0.0) - 2.0 / SQRT_2).abs() < 1e-14);
        assert!((r.mu(0.1, 0.4) - 0.3 / SQRT_2).abs() < 1e-14);
    }

    #[test]
    fn sigma_reduce_space_dependent_round_trip() {
        let spec = DiffusionSpec::new(
            Coefficient::space(|x| 0.1 * x),
            Coefficient::space(|x| 1.0 + 0.3 * (x).sin().powi(2)),
            InitialDensity::delta(0.2),
            (-4.0, 4.0),
        );
        let r = sigma_reduce(&spec).unwrap();
        for k in 0..=40 {
            let x = -3.5 + 7.0 * k as f64 / 40.0;
            let y = r.y_of(x, 0.0);
            assert!((r.x_of(y, 0.0) - x).abs() < 1e-10, "x={x}");
        }
        // direct quadrature reference
        let y = r.y_of(1.7, 0.0);
        let ref_y = simpson(|z| SQRT_2 / (1.0 + 0.3 * z.sin().powi(2)), 0.0, 1.7, 20000);
        assert!((y - ref_y).abs() < 1e-10);
    }

    #[test]
    fn sigma_reduce_rejects_floor_violation() {
        let spec = DiffusionSpec::new(
            Coefficient::Constant(0.0),
            Coefficient::space(|x| x.abs()),
            InitialDensity::delta(0.5),
            (-1.0, 1.0),
        )
        .with_sigma_floor(0.1);
        assert!(matches!(sigma_reduce(&spec), Err(Error::QuadratureFailure(_))));
    }

    #[test]
    fn usc_envelope_of_downward_jump_takes_left_limit() {
        let t = vec![0.0, 0.25, 0.5, 0.5, 0.75, 1.0];
        let b = [0.0, 0.0, 0.0, -1.0, -1.0, -1.0].map(Level::At).to_vec();
        let raw = Boundary::new(t, b).unwrap();
        let env = usc_envelope(&raw);
        assert_eq!(env.eval(0.5), Level::At(0.0));
        for k in 0..=100 {
            let s = k as f64 / 100.0;
            assert!(env.eval(s) >= raw.eval(s));
        }
        assert_eq!(env.eval(0.6), Level::At(-1.0));
        assert_eq!(env.eval(0.4), Level::At(0.0));
        assert_eq!(usc_envelope(&env), env);
    }

    #[test]
    fn usc_envelope_of_neg_inf_run() {
        use Level::*;
        let t = vec![0.0, 0.3, 0.3, 0.45, 0.6, 0.6, 1.0];
        let b = vec![At(1.0), At(1.0), NegInf, NegInf, NegInf, At(0.5), At(0.5)];
        let bd = Boundary::new(t, b).unwrap();
        // enumerate one-sided limits at the run endpoints
        let eps = 1e-9;
        let left_03 = bd.eval(0.3 - eps);
        let right_03 = bd.eval(0.3 + eps);
        let left_06 = bd.eval(0.6 - eps);
        let right_06 = bd.eval(0.6 + eps);
        assert_eq!((left_03, right_03), (At(1.0), NegInf));
        assert_eq!((left_06, right_06), (NegInf, At(0.5)));
        let env = usc_envelope(&bd);
        assert_eq!(env.eval(0.3), left_03.max(right_03));
        assert_eq!(env.eval(0.3), At(1.0));
        assert_eq!(env.eval(0.45), NegInf);
        assert_eq!(env.eval(0.6), left_06.max(right_06));
        assert_eq!(usc_envelope(&env), env);
    }

    #[test]
    fn boundary_csv_round_trip_keeps_sentinel() {
        let bd = Boundary::new(vec![0.0, 0.5, 1.0], vec![Level::NegInf, Level::At(-0.25), Level::At(0.125)]).unwrap();
        let mut buf = Vec::new();
        bd.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",-inf"));
        assert_eq!(Boundary::read_csv(&buf[..]).unwrap(), bd);
    }

    #[test]
    fn survival_csv_rejects_non_monotone_t() {
        let text = "t,p\n0,1\n0.5,0.9\n0.4,0.8\n";
        match SurvivalCurve::read_csv(text.as_bytes(), CurveInterp::Cubic) {
            Err(Error::Csv { row: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn compatibility_gamma_density_exponential_curve() {
        let spec = DiffusionSpec::brownian(SQRT_2, InitialDensity::gamma2(), (-10.0, 30.0));
        let res = compatibility_residuals(&spec, &exp_curve(), 2).unwrap();
        // one-sided stencil at h0 = 4e-3 carries an O(h0^2) error
        assert!(res[0].original.abs() < 1e-4, "{res:?}");
        assert!(res[0].reduced.abs() < 1e-4);
        // u0'' = -2, u0''' = 3, bdot(0) = 2, pddot(0) = 1  =>  1 + 3 - 4 = 0
        assert!(res[1].reduced.abs() < 1e-3, "{res:?}");
    }

    #[test]
    fn compatibility_flat_curve_and_degenerate_slope() {
        let spec = DiffusionSpec::brownian(SQRT_2, InitialDensity::gamma2(), (-10.0, 30.0));
        let flat = SurvivalCurve::constant_one(1.0, 10).unwrap();
        let res = compatibility_residuals(&spec, &flat, 1).unwrap();
        assert!((res[0].reduced - 2.0).abs() < 1e-4);
        assert!(matches!(compatibility_residuals(&spec, &flat, 2), Err(Error::DegenerateSlope)));
    }

    #[test]
    fn compatibility_exponential_rate_matches_slope() {
        // u0'(0+) = c^2 = lambda for u0(x) = c^2 x e^{-c x}
        let lam: f64 = 1.7;
        let c = lam.sqrt();
        let u0 = InitialDensity::analytic(move |x| c * c * x * (-c * x).exp(), 0.0, 40.0).unwrap();
        let spec = DiffusionSpec::brownian(SQRT_2, u0, (-10.0, 30.0));
        let curve = SurvivalCurve::exponential(lam, 1.0, 200).unwrap();
        let res = compatibility_residuals(&spec, &curve, 1).unwrap();
        assert!(res[0].reduced.abs() < 1e-4, "{res:?}");
    }
}
