//! Command runner behind the `ifpt` binary: runs one pipeline stage, writes
//! artifacts, `report.json`, `resolved_config.toml`, `manifest.json` and
//! `plotdata.csv` into the output directory.

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{hex, RunConfig};
use crate::diagnostics::{round_trip, DiagnosticReport, Relation, RoundTrip};
use crate::forward::{forward_mc, forward_pde_with, ForwardResult, PdeOptions};
use crate::grid::SpaceTimeGrid;
use crate::hodograph::{run_hodograph, HodographOutput};
use crate::inverse::{check_invariants, epsilon_continuation, InverseSolution};
use crate::model::{sigma_reduce, ReducedSpec, SurvivalCurve};
use crate::numerics::fmt_sci;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_DIAGNOSTIC: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Forward,
    Inverse,
    Hodograph,
    Diagnose,
    /// Diagnose plus the hodograph stage.
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Inverse => "inverse",
            Command::Hodograph => "hodograph",
            Command::Diagnose => "diagnose",
            Command::Verify => "verify",
        }
    }
}

/// Exit code for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_SOLVER
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub report: DiagnosticReport,
    pub output_dir: PathBuf,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.passed() {
            EXIT_OK
        } else {
            EXIT_DIAGNOSTIC
        }
    }
}

/// Files written so far, in order, with their role in `plotdata.csv` (if any).
struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, PathBuf)>,
    series: Vec<(String, PathBuf)>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), series: Vec::new() })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.files.push((name.to_string(), path.clone()));
        Ok(path)
    }

    fn series(&mut self, series: &str, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.write(name, f)?;
        self.series.push((series.to_string(), path));
        Ok(())
    }
}

/// Writes a long-format `series,t,value,se` table from `t`-indexed CSV artifacts.
///
/// Each artifact contributes its first column as `t`, its second as `value`
/// and a column named `se` when present.
pub fn emit_plotdata(artifacts: &[(&str, &Path)], out: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "series,t,value,se")?;
    for (series, path) in artifacts {
        let file = File::open(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = rdr.headers().map_err(|e| Error::Csv { row: 0, msg: e.to_string() })?.clone();
        if headers.len() < 2 {
            return Err(Error::Csv { row: 0, msg: format!("{} has fewer than two columns", path.display()) });
        }
        let se = headers.iter().position(|h| h == "se");
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv { row: i + 1, msg: e.to_string() })?;
            let se = se.and_then(|k| rec.get(k)).unwrap_or("");
            writeln!(w, "{},{},{},{}", series, &rec[0], &rec[1], se)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

struct Setup {
    reduced: ReducedSpec,
    grid: SpaceTimeGrid,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let spec = cfg.diffusion()?;
    let reduced = sigma_reduce(&spec)?;
    let grid = cfg.grid(&reduced)?;
    Ok(Setup { reduced, grid })
}

/// Runs `command` and writes every artifact. Errors are solver or validation
/// failures; diagnostic failures are reported through [`Outcome::exit_code`].
pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    let clock = Instant::now();
    let s = setup(cfg)?;
    let mut art = Artifacts::new(&cfg.output_dir)?;
    let hash = cfg.hash();
    let mut report =
        DiagnosticReport::new(format!("ifpt {} {} config {}", env!("CARGO_PKG_VERSION"), command.name(), hash));
    let mut extra = serde_json::Map::new();

    let curve = match command {
        Command::Forward => cfg.curve.as_ref().map(|_| cfg.survival_curve()).transpose()?,
        _ => Some(cfg.survival_curve()?),
    };
    if let Some(c) = &curve {
        art.series("target", "target_curve.csv", |w| c.write_csv(w))?;
    }

    match command {
        Command::Forward => forward_stage(cfg, &s, curve.as_ref(), &mut art, &mut report)?,
        Command::Inverse | Command::Hodograph => {
            let curve = curve.as_ref().expect("curve loaded");
            let sol = epsilon_continuation(curve, &s.reduced, &s.grid, &cfg.penalty())?;
            inverse_artifacts(cfg, &s, &sol, &mut art, &mut extra)?;
            report.holds("penalty_converged", sol.report.converged);
            report.holds("penalty_invariants", check_invariants(&sol, curve, &s.reduced).holds());
            if command == Command::Hodograph {
                hodograph_stage(cfg, &s, &sol, curve, &mut art, &mut report, &mut extra)?;
            }
        }
        Command::Diagnose | Command::Verify => {
            let curve = curve.as_ref().expect("curve loaded");
            let rt = round_trip(curve, &s.reduced, &cfg.round_trip(&s.reduced)?, &report.provenance)?;
            report.metrics.extend(rt.report.metrics.iter().cloned());
            inverse_artifacts(cfg, &s, &rt.solution, &mut art, &mut extra)?;
            diagnostic_artifacts(&rt, &mut art)?;
            if command == Command::Verify {
                if rt.solution.b.finite_window(cfg.window().0, cfg.window().1).is_some() {
                    hodograph_stage(cfg, &s, &rt.solution, curve, &mut art, &mut report, &mut extra)?;
                } else {
                    skip_hodograph(cfg, &s, &mut report);
                }
            }
        }
    }

    art.write("report.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &report).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    })?;
    let resolved = cfg.to_toml();
    art.write("resolved_config.toml", |w| Ok(w.write_all(resolved.as_bytes())?))?;
    let series: Vec<(&str, &Path)> = art.series.iter().map(|(n, p)| (n.as_str(), p.as_path())).collect();
    let plot = cfg.output_dir.join("plotdata.csv");
    emit_plotdata(&series, &plot)?;
    art.files.push(("plotdata.csv".into(), plot));

    let mut hashes = serde_json::Map::new();
    for (name, path) in &art.files {
        hashes.insert(name.clone(), json!(sha256_file(path)?));
    }
    let mut manifest = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": resolved,
        "config_sha256": hash,
        "seed": cfg.seed,
        "sigma_convention": "sqrt2",
        "grid": s.grid,
        "artifacts": hashes,
        "passed": report.passed(),
        "wall_time_s": clock.elapsed().as_secs_f64(),
    });
    manifest.as_object_mut().expect("object").extend(extra);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::fs::write(cfg.output_dir.join("manifest.json"), text + "\n")?;
    Ok(Outcome { report, output_dir: cfg.output_dir.clone() })
}

fn forward_stage(
    cfg: &RunConfig,
    s: &Setup,
    curve: Option<&SurvivalCurve>,
    art: &mut Artifacts,
    report: &mut DiagnosticReport,
) -> Result<()> {
    let f = &cfg.forward;
    let original = cfg.forward_barrier(&s.grid)?;
    let reduced_b = s.reduced.map_boundary(&original);
    art.write("barrier.csv", |w| original.write_csv(w))?;
    let opts = PdeOptions { scheme: f.scheme, front_fixing: f.front_fixing, ..PdeOptions::default() };
    let pde = forward_pde_with(&s.reduced, &reduced_b, &s.grid, &opts)?;
    art.series("forward_pde", "forward_pde.csv", |w| pde.write_csv(w))?;
    let t2 = s.grid.t_end;
    if let Some(c) = curve {
        report.check("forward_pde_error", pde.sup_error(|t| c.p(t), f.t_from, t2), Relation::AtMost, f.tolerance);
    }
    if f.mc_paths > 0 {
        let mc = forward_mc(s.reduced.original(), &original, f.mc_paths, f.mc_steps, cfg.seed)?;
        art.series("forward_mc", "forward_mc.csv", |w| mc.write_csv(w))?;
        let se = max_se(&mc);
        if let Some(c) = curve {
            report.check(
                "forward_mc_error",
                mc.sup_error(|t| c.p(t), f.t_from, t2),
                Relation::AtMost,
                f.tolerance + 3.0 * se,
            );
        }
        report.check(
            "pde_mc_agreement",
            mc.sup_error(|t| pde.p_at(t), f.t_from, t2),
            Relation::AtMost,
            f.tolerance + 3.0 * se,
        );
    }
    Ok(())
}

fn max_se(r: &ForwardResult) -> f64 {
    r.standard_errors.as_ref().map_or(0.0, |s| s.iter().fold(0.0, |m: f64, v| m.max(*v)))
}

fn inverse_artifacts(
    cfg: &RunConfig,
    s: &Setup,
    sol: &InverseSolution,
    art: &mut Artifacts,
    extra: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let original = s.reduced.unmap_boundary(&sol.b);
    art.series("boundary", "boundary.csv", |w| original.write_csv(w))?;
    art.write("convergence.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &sol.report).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    })?;
    if cfg.write_fields {
        art.write("field_w.csv", |w| sol.w.write_csv(w))?;
        art.write("field_u.csv", |w| sol.u.write_csv(w))?;
    }
    extra.insert("epsilon_final".into(), json!(sol.epsilon_final));
    extra.insert("penalty_m".into(), json!(sol.m));
    Ok(())
}

fn diagnostic_artifacts(rt: &RoundTrip, art: &mut Artifacts) -> Result<()> {
    art.series("round_trip_pde", "round_trip_pde.csv", |w| rt.pde.write_csv(w))?;
    if let Some(mc) = &rt.mc {
        art.series("round_trip_mc", "round_trip_mc.csv", |w| mc.write_csv(w))?;
    }
    let fb = &rt.fb_outer;
    art.series("fb_residual", "fb_residual.csv", |w| {
        writeln!(w, "t,absolute,relative")?;
        for i in 0..fb.t.len() {
            writeln!(w, "{},{},{}", fmt_sci(fb.t[i]), fmt_sci(fb.absolute[i]), fmt_sci(fb.relative[i]))?;
        }
        Ok(())
    })?;
    if let Some(weak) = &rt.weak {
        art.write("weak_bounds.csv", |w| {
            writeln!(w, "t,delta,inf,sup,target,straddle")?;
            for r in &weak.rows {
                let (t, d, i, s, g) =
                    (fmt_sci(r.t), fmt_sci(r.delta), fmt_sci(r.inf), fmt_sci(r.sup), fmt_sci(r.target));
                writeln!(w, "{t},{d},{i},{s},{g},{}", r.straddle)?;
            }
            Ok(())
        })?;
    }
    if let Some(h) = &rt.holder {
        art.write("holder.csv", |w| {
            writeln!(w, "lag,modulus")?;
            for (l, m) in h.lags.iter().zip(&h.modulus) {
                writeln!(w, "{},{}", fmt_sci(*l), fmt_sci(*m))?;
            }
            Ok(())
        })?;
    }
    art.series("sign_changes", "sign_changes.csv", |w| {
        writeln!(w, "t,count")?;
        for (t, c) in rt.signs.t.iter().zip(&rt.signs.count) {
            writeln!(w, "{},{c}", fmt_sci(*t))?;
        }
        Ok(())
    })
}

/// Sup over window times `t >= t1` of `|Y - X|` and `|Y(0,.) - b|`.
fn strip_errors(out: &HodographOutput, t1: f64) -> (f64, f64) {
    let y = &out.y.y;
    let mut edge: f64 = 0.0;
    for (n, &t) in out.x.t.iter().enumerate() {
        if t >= t1 - 1e-12 {
            edge = edge.max((y.get(n, 0) - out.x.get(n, 0)).abs());
        }
    }
    (y.sup_diff(&out.x, t1), edge)
}

fn hodograph_stage(
    cfg: &RunConfig,
    s: &Setup,
    sol: &InverseSolution,
    curve: &SurvivalCurve,
    art: &mut Artifacts,
    report: &mut DiagnosticReport,
    extra: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let out = run_hodograph(sol, curve, &s.reduced, &cfg.hodograph()?)?;
    let tol = cfg.hodograph.tolerance_cells * s.grid.dx();
    let (t1, _) = cfg.window();
    let (sup, edge) = strip_errors(&out, t1);
    report.check("hodograph_consistency", sup, Relation::AtMost, tol);
    report.check("hodograph_boundary", edge, Relation::AtMost, tol);
    report.holds("hodograph_band", out.y.band_margin >= 0.0);
    for m in &out.family {
        report.holds(&format!("bracket_strict_h{}", m.h), m.bracket.strict);
    }
    let hs: Vec<f64> = out.family.iter().map(|m| m.h).collect();
    let widths = out.widths();
    let mut order: Vec<usize> = (0..hs.len()).collect();
    order.sort_by(|a, b| hs[*a].total_cmp(&hs[*b]));
    report.holds("bracket_width_monotone", order.windows(2).all(|p| widths[p[0]] <= widths[p[1]]));

    let brackets: Vec<_> = out.family.iter().map(|m| &m.bracket).collect();
    art.write("brackets.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &brackets).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    })?;
    art.write("hodograph_x.csv", |w| out.x.write_csv(w))?;
    art.write("hodograph_y.csv", |w| out.y.y.write_csv(w))?;
    let b = out.x.edge(0);
    let last = out.x.z.len() - 1;
    let x_eps = out.x.edge(last);
    art.write("brackets.csv", |w| {
        writeln!(w, "h,t,chain,lower,middle,upper")?;
        for m in &out.family {
            for (n, &t) in out.x.t.iter().enumerate() {
                let (h, t) = (fmt_sci(m.h), fmt_sci(t));
                let (lo, mid, hi) = (m.minus.y.get(n, 0), b[n], m.plus.y.get(n, 0));
                writeln!(w, "{h},{t},boundary,{},{},{}", fmt_sci(lo), fmt_sci(mid), fmt_sci(hi))?;
                let (lo, mid, hi) = (m.minus.y.get(n, last), x_eps[n], m.plus.y.get(n, last));
                writeln!(w, "{h},{t},edge,{},{},{}", fmt_sci(lo), fmt_sci(mid), fmt_sci(hi))?;
            }
        }
        Ok(())
    })?;
    art.series("strip_boundary", "strip_boundary.csv", |w| {
        writeln!(w, "t,y0")?;
        for (n, &t) in out.x.t.iter().enumerate() {
            writeln!(w, "{},{}", fmt_sci(t), fmt_sci(out.y.y.get(n, 0)))?;
        }
        Ok(())
    })?;
    extra.insert("z_eps".into(), json!(out.z_eps));
    extra.insert("h_values".into(), json!(hs));
    extra.insert("bracket_widths".into(), json!(widths));
    extra.insert("band".into(), json!(out.y.band));
    extra.insert("neumann_bandwidth".into(), json!(s.grid.dx()));
    extra.insert("hodograph_start".into(), json!(out.x.t[0]));
    Ok(())
}

fn skip_hodograph(cfg: &RunConfig, s: &Setup, report: &mut DiagnosticReport) {
    let why = "barrier is -inf on the window";
    let tol = cfg.hodograph.tolerance_cells * s.grid.dx();
    report.skip("hodograph_consistency", Relation::AtMost, tol, why);
    report.skip("hodograph_boundary", Relation::AtMost, tol, why);
    report.skip("bracket_width_monotone", Relation::Holds, 1.0, why);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plotdata_of_nothing_is_a_header() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plot.csv");
        emit_plotdata(&[], &out).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "series,t,value,se\n");
    }

    #[test]
    fn plotdata_reads_value_and_optional_se() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "t,b\n0,-inf\n1,0.5\n").unwrap();
        std::fs::write(&b, "t,p_hat,se\n0,1,0\n").unwrap();
        let out = dir.path().join("plot.csv");
        emit_plotdata(&[("bd", &a), ("mc", &b)], &out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text, "series,t,value,se\nbd,0,-inf,\nbd,1,0.5,\nmc,0,1,0\n");
    }

    #[test]
    fn plotdata_missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.csv");
        let err = emit_plotdata(&[("x", &missing)], &dir.path().join("p.csv")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        assert_eq!(exit_code(&err), EXIT_SOLVER);
    }
}
