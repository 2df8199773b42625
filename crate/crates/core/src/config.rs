//! Run configuration: flat TOML sections with typed values, `--set` overrides
//! and construction of the model objects a run needs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::diagnostics::{RoundTripConfig, Tolerances};
use crate::forward::TimeScheme;
use crate::grid::SpaceTimeGrid;
use crate::hodograph::{HodographConfig, QuasilinearOptions};
use crate::inverse::{ExtractionRule, PenaltyConfig};
use crate::model::{
    Boundary, Coefficient, CurveInterp, DiffusionSpec, InitialDensity, Level, ReducedSpec, SurvivalCurve,
};
use crate::numerics::{lerp_table, normal_cdf, normal_pdf};
use crate::{Error, Result};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "IFPT_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    Brownian,
    Ou,
    Tabulated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    /// `x e^{-x}` on `x >= 0`.
    Gamma2,
    Delta,
    Tabulated,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSection {
    pub kind: ProcessKind,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub table_x: Vec<f64>,
    #[serde(default)]
    pub table_mu: Vec<f64>,
    #[serde(default)]
    pub table_sigma: Vec<f64>,
    pub initial: InitialKind,
    #[serde(default)]
    pub initial_at: f64,
    #[serde(default)]
    pub initial_x: Vec<f64>,
    #[serde(default)]
    pub initial_values: Vec<f64>,
    pub truncation: [f64; 2],
}

fn default_sigma() -> f64 {
    std::f64::consts::SQRT_2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    /// `e^{-rate t}`.
    Exponential,
    /// `1 - rate t`.
    Linear,
    ConstantOne,
    /// Closed-form survival of driftless Brownian motion from a point above a constant barrier.
    ConstantBarrier,
    Csv,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSection {
    pub kind: CurveKind,
    #[serde(default = "one")]
    pub rate: f64,
    /// Barrier level for `constant_barrier`, original coordinates.
    #[serde(default)]
    pub barrier: f64,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_knots")]
    pub knots: usize,
    #[serde(default = "default_interp")]
    pub interp: CurveInterp,
}

fn one() -> f64 {
    1.0
}

fn default_knots() -> usize {
    1000
}

fn default_interp() -> CurveInterp {
    CurveInterp::Cubic
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dx: f64,
    pub dt: f64,
    /// Defaults to the truncation interval.
    #[serde(default)]
    pub x_min: Option<f64>,
    #[serde(default)]
    pub x_max: Option<f64>,
    /// Defaults to the curve horizon.
    #[serde(default)]
    pub t_end: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseSection {
    #[serde(default = "default_schedule")]
    pub schedule: Vec<f64>,
    #[serde(default = "default_tol_cont")]
    pub tol_cont: f64,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_max_newton")]
    pub max_newton: usize,
    #[serde(default = "default_extraction")]
    pub extraction: ExtractionRule,
    /// Penalty magnitude; `sup |pdot|` when absent.
    #[serde(default)]
    pub m: Option<f64>,
}

fn default_schedule() -> Vec<f64> {
    vec![1.6e-2, 4e-3, 1e-3]
}
fn default_tol_cont() -> f64 {
    5e-3
}
fn default_newton_tol() -> f64 {
    1e-10
}
fn default_max_newton() -> usize {
    50
}
fn default_extraction() -> ExtractionRule {
    ExtractionRule::OuterProfile
}

impl Default for InverseSection {
    fn default() -> Self {
        Self {
            schedule: default_schedule(),
            tol_cont: default_tol_cont(),
            newton_tol: default_newton_tol(),
            max_newton: default_max_newton(),
            extraction: default_extraction(),
            m: None,
        }
    }
}

/// A barrier level in a config: a number or the token `"-inf"`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LevelValue {
    Number(f64),
    Token(String),
}

impl LevelValue {
    pub fn level(&self) -> Result<Level> {
        match self {
            LevelValue::Number(v) if *v == f64::NEG_INFINITY => Ok(Level::NegInf),
            LevelValue::Number(v) if v.is_finite() => Ok(Level::At(*v)),
            LevelValue::Number(v) => Err(Error::Config(format!("barrier level {v} is not finite or -inf"))),
            LevelValue::Token(s) if s == "-inf" => Ok(Level::NegInf),
            LevelValue::Token(s) => Err(Error::Config(format!("barrier level {s:?} is neither a number nor \"-inf\""))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSection {
    /// Constant barrier in original coordinates, used when `barrier_path` is absent.
    #[serde(default)]
    pub barrier: Option<LevelValue>,
    /// CSV `t,b` barrier in original coordinates.
    #[serde(default)]
    pub barrier_path: Option<PathBuf>,
    #[serde(default = "default_scheme")]
    pub scheme: TimeScheme,
    #[serde(default)]
    pub front_fixing: bool,
    /// Monte Carlo paths; 0 disables the Monte Carlo leg.
    #[serde(default)]
    pub mc_paths: usize,
    #[serde(default = "default_mc_steps")]
    pub mc_steps: usize,
    /// Tolerance of the forward survival against the configured curve.
    #[serde(default = "default_forward_tol")]
    pub tolerance: f64,
    /// Start of the window on which the forward error is measured.
    #[serde(default)]
    pub t_from: f64,
}

fn default_scheme() -> TimeScheme {
    TimeScheme::CrankNicolson
}
fn default_mc_steps() -> usize {
    1000
}
fn default_forward_tol() -> f64 {
    5e-3
}

impl Default for ForwardSection {
    fn default() -> Self {
        Self {
            barrier: None,
            barrier_path: None,
            scheme: default_scheme(),
            front_fixing: false,
            mc_paths: 0,
            mc_steps: default_mc_steps(),
            tolerance: default_forward_tol(),
            t_from: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HodographSection {
    #[serde(default)]
    pub z_eps: Option<f64>,
    #[serde(default = "default_nz")]
    pub nz: usize,
    #[serde(default = "default_h_values")]
    pub h_values: Vec<f64>,
    #[serde(default)]
    pub t_start: Option<f64>,
    /// Largest admissible `|h|`.
    #[serde(default = "default_h_max")]
    pub h_max: f64,
    /// Tolerance of `|Y - X|` and `|Y(0,.) - b|`, in cells.
    #[serde(default = "default_cells")]
    pub tolerance_cells: f64,
}

fn default_nz() -> usize {
    64
}
fn default_h_values() -> Vec<f64> {
    vec![4e-2, 2e-2, 1e-2]
}
fn default_h_max() -> f64 {
    0.1
}
fn default_cells() -> f64 {
    2.0
}

impl Default for HodographSection {
    fn default() -> Self {
        Self {
            z_eps: None,
            nz: default_nz(),
            h_values: default_h_values(),
            t_start: None,
            h_max: default_h_max(),
            tolerance_cells: default_cells(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "default_t1")]
    pub t1: f64,
    /// Defaults to the grid horizon.
    #[serde(default)]
    pub t2: Option<f64>,
    #[serde(default)]
    pub deltas: Option<Vec<f64>>,
    #[serde(default = "default_weak_times")]
    pub weak_times: usize,
    #[serde(default)]
    pub lag_min: Option<f64>,
    #[serde(default)]
    pub lag_max: Option<f64>,
    #[serde(default = "default_round_trip_tol")]
    pub round_trip_tol: f64,
    #[serde(default = "default_fb_tol")]
    pub fb_tol: f64,
    #[serde(default = "default_holder_min")]
    pub holder_min: f64,
}

fn default_t1() -> f64 {
    0.1
}
fn default_weak_times() -> usize {
    10
}
fn default_round_trip_tol() -> f64 {
    2e-2
}
fn default_fb_tol() -> f64 {
    5e-2
}
fn default_holder_min() -> f64 {
    0.45
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            t1: default_t1(),
            t2: None,
            deltas: None,
            weak_times: default_weak_times(),
            lag_min: None,
            lag_max: None,
            round_trip_tol: default_round_trip_tol(),
            fb_tol: default_fb_tol(),
            holder_min: default_holder_min(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Where artifacts go; not part of the resolved config or its hash.
    #[serde(default = "default_output", skip_serializing)]
    pub output_dir: PathBuf,
    /// Also write the full `w` and `u` fields (large).
    #[serde(default)]
    pub write_fields: bool,
    pub process: ProcessSection,
    /// Target survival curve; optional for `forward`, which then reports no error metric.
    #[serde(default)]
    pub curve: Option<CurveSection>,
    pub grid: GridSection,
    #[serde(default)]
    pub inverse: InverseSection,
    #[serde(default)]
    pub forward: ForwardSection,
    #[serde(default)]
    pub hodograph: HodographSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("ifpt-out")
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` (or `key=value` at top level) overrides.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (path, raw) =
            o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not of the form key=value")))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        let value = parse_value(raw.trim());
        match keys.as_slice() {
            [k] => {
                table.insert((*k).to_string(), value);
            }
            [s, k] => {
                let sec = table.entry((*s).to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                let toml::Value::Table(sec) = sec else {
                    return Err(Error::Config(format!("{s} is not a section")));
                };
                sec.insert((*k).to_string(), value);
            }
            _ => return Err(Error::Config(format!("override key {path:?} nests deeper than one section"))),
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside are resolved against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    let joined = base.join(&*q);
                    *q = std::path::absolute(&joined).unwrap_or(joined);
                }
            }
        };
        if let Some(c) = cfg.curve.as_mut() {
            fix(&mut c.path);
        }
        fix(&mut cfg.forward.barrier_path);
        Ok(cfg)
    }

    /// The fully resolved config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved config, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn diffusion(&self) -> Result<DiffusionSpec> {
        let p = &self.process;
        let initial = match p.initial {
            InitialKind::Gamma2 => InitialDensity::gamma2(),
            InitialKind::Delta => InitialDensity::delta(p.initial_at),
            InitialKind::Tabulated => InitialDensity::tabulated(p.initial_x.clone(), p.initial_values.clone())?,
        };
        let trunc = (p.truncation[0], p.truncation[1]);
        let spec = match p.kind {
            ProcessKind::Brownian => {
                DiffusionSpec::new(Coefficient::Constant(p.mu), Coefficient::Constant(p.sigma), initial, trunc)
            }
            ProcessKind::Ou => DiffusionSpec::ornstein_uhlenbeck(p.kappa, p.mean, p.sigma, initial, trunc),
            ProcessKind::Tabulated => {
                let n = p.table_x.len();
                if n < 2 || p.table_mu.len() != n || p.table_sigma.len() != n {
                    return Err(Error::Config(
                        "tabulated process needs matching table_x, table_mu, table_sigma".into(),
                    ));
                }
                if p.table_x.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("table_x must be strictly ascending".into()));
                }
                let (x, m, s) = (Arc::new(p.table_x.clone()), p.table_mu.clone(), p.table_sigma.clone());
                let x2 = Arc::clone(&x);
                DiffusionSpec::new(
                    Coefficient::Space(Arc::new(move |v| lerp_table(&x, &m, v))),
                    Coefficient::Space(Arc::new(move |v| lerp_table(&x2, &s, v))),
                    initial,
                    trunc,
                )
            }
        };
        spec.validate(self.horizon())?;
        Ok(spec)
    }

    pub fn horizon(&self) -> f64 {
        self.grid.t_end.or(self.curve.as_ref().map(|c| c.horizon)).unwrap_or(1.0)
    }

    pub fn survival_curve(&self) -> Result<SurvivalCurve> {
        let c = self.curve.as_ref().ok_or_else(|| Error::Config("this command needs a [curve] section".into()))?;
        let (h, n) = (c.horizon, c.knots);
        match c.kind {
            CurveKind::Exponential => SurvivalCurve::exponential(c.rate, h, n),
            CurveKind::Linear => {
                let r = c.rate;
                SurvivalCurve::from_fn(|t| 1.0 - r * t, |_| -r, h, n)
            }
            CurveKind::ConstantOne => SurvivalCurve::constant_one(h, n),
            CurveKind::ConstantBarrier => {
                let p = &self.process;
                if p.kind != ProcessKind::Brownian || p.mu != 0.0 || p.initial != InitialKind::Delta {
                    return Err(Error::Config(
                        "constant_barrier curve needs a driftless Brownian process from a point".into(),
                    ));
                }
                let gap = p.initial_at - c.barrier;
                if !(gap > 0.0) {
                    return Err(Error::Config("constant_barrier needs the barrier below the start".into()));
                }
                let s = p.sigma;
                SurvivalCurve::from_fn(
                    |t| if t <= 0.0 { 1.0 } else { 2.0 * normal_cdf(gap / (s * t.sqrt())) - 1.0 },
                    |t| {
                        if t <= 0.0 {
                            0.0
                        } else {
                            let a = gap / (s * t.sqrt());
                            -normal_pdf(a) * a / t
                        }
                    },
                    h,
                    n,
                )
            }
            CurveKind::Csv => {
                let path = c.path.as_ref().ok_or_else(|| Error::Config("csv curve needs curve.path".into()))?;
                SurvivalCurve::read_csv_path(path, c.interp)
            }
        }
    }

    /// Grid in reduced coordinates; the x-range defaults to the mapped truncation interval.
    pub fn grid(&self, reduced: &ReducedSpec) -> Result<SpaceTimeGrid> {
        let g = &self.grid;
        let (a, b) = reduced.spec().truncation_hint;
        let x_min = g.x_min.unwrap_or(a);
        let x_max = g.x_max.unwrap_or(b);
        SpaceTimeGrid::with_steps(x_min, x_max, g.dx, 0.0, self.horizon(), g.dt)
    }

    /// Forward barrier in original coordinates on the grid times.
    pub fn forward_barrier(&self, grid: &SpaceTimeGrid) -> Result<Boundary> {
        if let Some(path) = &self.forward.barrier_path {
            return Boundary::read_csv_path(path);
        }
        let level = match &self.forward.barrier {
            Some(v) => v.level()?,
            None => return Err(Error::Config("forward needs forward.barrier or forward.barrier_path".into())),
        };
        Ok(Boundary::constant(level, &[0.0, grid.t_end]))
    }

    pub fn penalty(&self) -> PenaltyConfig {
        let i = &self.inverse;
        PenaltyConfig {
            schedule: i.schedule.clone(),
            m: i.m,
            newton_tol: i.newton_tol,
            max_newton: i.max_newton,
            tol_cont: i.tol_cont,
            extraction: i.extraction,
        }
    }

    pub fn hodograph(&self) -> Result<HodographConfig> {
        let h = &self.hodograph;
        if let Some(bad) = h.h_values.iter().find(|v| !(**v > 0.0 && **v <= h.h_max)) {
            return Err(Error::Config(format!("h value {bad} outside (0, {}]", h.h_max)));
        }
        Ok(HodographConfig {
            z_eps: h.z_eps,
            nz: h.nz,
            h_values: h.h_values.clone(),
            t_start: h.t_start,
            options: QuasilinearOptions::default(),
        })
    }

    pub fn window(&self) -> (f64, f64) {
        (self.diagnostics.t1, self.diagnostics.t2.unwrap_or(self.horizon()))
    }

    pub fn round_trip(&self, reduced: &ReducedSpec) -> Result<RoundTripConfig> {
        let d = &self.diagnostics;
        let lag_range = match (d.lag_min, d.lag_max) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(Error::Config("set both diagnostics.lag_min and diagnostics.lag_max".into())),
        };
        Ok(RoundTripConfig {
            grid: self.grid(reduced)?,
            penalty: self.penalty(),
            mc_paths: self.forward.mc_paths,
            mc_steps: self.forward.mc_steps,
            seed: self.seed,
            window: self.window(),
            deltas: d.deltas.clone(),
            weak_times: d.weak_times,
            lag_range,
            tolerances: Tolerances { round_trip: d.round_trip_tol, fb_median: d.fb_tol, holder_min: d.holder_min },
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[process]
kind = "brownian"
initial = "gamma2"
truncation = [-8.5, 25.0]
[curve]
kind = "exponential"
[grid]
dx = 0.01
dt = 0.001
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_toml_str(BASE, &[]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.inverse.schedule, vec![1.6e-2, 4e-3, 1e-3]);
        assert_eq!(c.hodograph.h_values, vec![4e-2, 2e-2, 1e-2]);
        assert_eq!(c.process.sigma, std::f64::consts::SQRT_2);
        let r = crate::model::sigma_reduce(&c.diffusion().unwrap()).unwrap();
        let g = c.grid(&r).unwrap();
        assert_eq!((g.x_min, g.x_max, g.nt), (-8.5, 25.0, 1000));
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = format!("{BASE}\n[inverse]\nschedul = [0.1]\n");
        assert!(matches!(RunConfig::from_toml_str(&text, &[]), Err(Error::Config(_))));
        let text = format!("colour = 1\n{BASE}");
        assert!(matches!(RunConfig::from_toml_str(&text, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_are_typed() {
        let o = vec![
            "grid.dx=0.02".to_string(),
            "inverse.schedule=[0.1, 0.01]".to_string(),
            "forward.barrier=-inf".to_string(),
            "seed=11".to_string(),
        ];
        let c = RunConfig::from_toml_str(BASE, &o).unwrap();
        assert_eq!(c.grid.dx, 0.02);
        assert_eq!(c.inverse.schedule, vec![0.1, 0.01]);
        assert_eq!(c.seed, 11);
        assert!(matches!(c.forward.barrier.unwrap().level().unwrap(), Level::NegInf));
        assert!(RunConfig::from_toml_str(BASE, &["grid".to_string()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips_and_hash_ignores_output() {
        let c = RunConfig::from_toml_str(BASE, &[]).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back.to_toml(), c.to_toml());
        let mut d = c.clone();
        d.output_dir = PathBuf::from("elsewhere");
        assert_eq!(c.hash(), d.hash());
        d.seed = 4;
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn constant_barrier_curve_matches_reduced_closed_form() {
        let text = r#"
[process]
kind = "brownian"
initial = "delta"
truncation = [-1.5, 9.0]
[curve]
kind = "constant_barrier"
barrier = -1.0
[grid]
dx = 0.01
dt = 0.001
"#;
        let c = RunConfig::from_toml_str(text, &[]).unwrap();
        let curve = c.survival_curve().unwrap();
        for t in [0.1f64, 0.5, 1.0] {
            let exact = 2.0 * normal_cdf(1.0 / (2.0 * t).sqrt()) - 1.0;
            assert!((curve.p(t) - exact).abs() < 1e-12);
            // slope against a central difference of the closed form
            let h = 1e-5;
            let f = |s: f64| 2.0 * normal_cdf(1.0 / (2.0 * s).sqrt()) - 1.0;
            assert!((curve.pdot(t) - (f(t + h) - f(t - h)) / (2.0 * h)).abs() < 1e-6);
        }
    }
}
