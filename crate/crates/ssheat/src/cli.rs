//! Command-line front end. Every subcommand validates its flags before any
//! computation, writes JSON records (with the tool version and a config
//! echo) or CSV trajectories, and maps failures to exit codes:
//! 0 success, 1 a validation check out of tolerance, 2 usage, 3
//! computational failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::branch::{
    bifurcation_table, build_atlas_seeded, dim1_branches, find_am, find_mu_m, pair_for, singular_branch,
    singular_opts, tail_law, Atlas, BranchKind, BranchPoint, Family, PairFamily,
};
use crate::constants::{iota_bound, mu_zero, ProblemParams};
use crate::error::{Error, Result};
use crate::inverted::{classify_asymptotics, energy_H, solve_inverted, InvertOptions, Mode};
use crate::pde::{
    duhamel_residual, heat_semigroup_homogeneous, leading_growth_exponent,
    selfsimilar_evolution_error, weak_form, Bump,
};
use crate::profile::{
    count_zeros_odd, count_zeros_profile, default_r_max, estimate_L, estimate_l1_odd, integrate_odd_profile,
    integrate_profile,
};
use crate::trajectory::Trajectory;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser, Serialize)]
#[command(name = "ssheat", version, about = "Self-similar solutions of u_t = Δu + |u|^α u")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, clap::Args, Serialize)]
pub struct Dims {
    /// Space dimension N ≥ 1.
    #[arg(long)]
    pub n: u32,
    /// Exponent α with 0 < α and (N − 2)α < 4.
    #[arg(long)]
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchChoice {
    Even,
    Odd,
    Am,
    Mum,
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Selfsim,
    Duhamel,
    Semigroup,
    Distributional,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Derived constants, μ₀ and (with --mu) the zero-gap bound.
    Thresholds {
        #[command(flatten)]
        dims: Dims,
        #[arg(long)]
        mu: Option<f64>,
    },
    /// Regular profile f(0) = a (or odd profile g'(0) = b with --odd, N = 1).
    Profile {
        #[command(flatten)]
        dims: Dims,
        #[arg(long, required_unless_present = "odd")]
        a: Option<f64>,
        #[arg(long, requires = "b")]
        odd: bool,
        #[arg(long)]
        b: Option<f64>,
        #[arg(long)]
        rmax: Option<f64>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Solution of the inverted equation with w(0) = μ.
    Invert {
        #[command(flatten)]
        dims: Dims,
        #[arg(long)]
        mu: f64,
        #[arg(long)]
        smax: Option<f64>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        classify: bool,
    },
    /// One branch search.
    Branch {
        #[command(flatten)]
        dims: Dims,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long)]
        m: usize,
        #[arg(long, value_enum, default_value_t = BranchChoice::Even)]
        kind: BranchChoice,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Sweep of all branch kinds; writes atlas.json and bifurcation.csv.
    Atlas {
        #[command(flatten)]
        dims: Dims,
        #[arg(long)]
        mmax: usize,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Rows of the bifurcation table.
        #[arg(long, default_value_t = 400)]
        samples: usize,
        /// Scheduling order of the parallel searches; results do not depend on it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cross-check atlas branches against the evolution equation.
    Validate {
        #[command(flatten)]
        dims: Dims,
        #[arg(long)]
        from_atlas: PathBuf,
        #[arg(long, value_enum)]
        check: Check,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Usage problems found after parsing.
fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

enum Failure {
    Usage(String),
    Compute(Error),
    Checks(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Compute(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Compute(Error::Io(e.to_string()))
    }
}

/// Parse `args` and run; output goes to `out`, diagnostics to `err`.
pub fn run_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cfg = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            // One line: the message up to clap's usage block.
            let text = e.to_string();
            let line: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let _ = writeln!(err, "{}", line.join(" "));
            return 2;
        }
    };
    run(&cfg, out, err)
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match dispatch(cfg, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "usage error: {m}");
            2
        }
        Err(Failure::Compute(e)) => {
            let _ = writeln!(err, "{}: {e}", e.name());
            3
        }
        Err(Failure::Checks(m)) => {
            let _ = writeln!(err, "checks failed: {m}");
            1
        }
    }
}

fn params(d: &Dims) -> std::result::Result<ProblemParams, Failure> {
    let p = ProblemParams::new(d.n, d.alpha).map_err(|e| usage(e.to_string()))?;
    p.require_subcritical().map_err(|e| usage(e.to_string()))?;
    Ok(p)
}

fn positive(name: &str, v: f64) -> std::result::Result<(), Failure> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(usage(format!("--{name} must be positive and finite, got {v}")))
    }
}

fn record(cfg: &RunConfig, payload: Value) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("version".into(), json!(VERSION));
    obj.insert("config".into(), serde_json::to_value(&cfg.command).unwrap_or(Value::Null));
    match payload {
        Value::Object(m) => obj.extend(m),
        other => {
            obj.insert("result".into(), other);
        }
    }
    Value::Object(obj)
}

fn emit_json(out: &mut dyn Write, v: &Value) -> std::result::Result<(), Failure> {
    writeln!(out, "{}", serde_json::to_string_pretty(v).expect("JSON values serialize"))?;
    Ok(())
}

/// Write `bytes` to `path` through a temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::result::Result<(), Failure> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory CSV");
    for r in rows {
        w.write_record(&r).expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

fn emit_csv(out: &mut dyn Write, path: Option<&PathBuf>, bytes: &[u8]) -> std::result::Result<(), Failure> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => {
            out.write_all(bytes)?;
            Ok(())
        }
    }
}

fn dispatch(cfg: &RunConfig, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    match &cfg.command {
        Command::Thresholds { dims, mu } => {
            let p = params(dims)?;
            if let Some(m) = mu {
                positive("mu", *m)?;
            }
            let c = p.constants();
            let mu0 = match mu_zero(p) {
                Ok(v) => Some(v),
                Err(Error::NonIntegrable { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let iota = match mu {
                Some(m) => Some(iota_bound(p, *m)?),
                None => None,
            };
            let v = json!({
                "beta": c.beta,
                "gamma": c.gamma,
                "lambda1": c.lambda1,
                "lambda2": c.lambda2,
                "b_window": c.b_window,
                "regime": c.regime,
                "mu_frd1": c.mu_frd1,
                "mu_frd8": c.mu_frd8,
                "mu0": mu0,
                "iota": iota,
            });
            emit_json(out, &record(cfg, v))
        }
        Command::Profile { dims, a, odd, b, rmax, tol, csv } => {
            let p = params(dims)?;
            positive("tol", *tol)?;
            if let Some(r) = rmax {
                positive("rmax", *r)?;
            }
            if *odd && p.n != 1 {
                return Err(usage("--odd profiles exist only for --n 1"));
            }
            let r_max = rmax.unwrap_or_else(|| default_r_max(&p));
            let (traj, zeros, limit) = if *odd {
                let b = b.expect("clap enforces --b with --odd");
                let t = integrate_odd_profile(b, &p, r_max, *tol)?;
                let z = if t.is_trivial() { 0 } else { count_zeros_odd(&t)? };
                let l = if t.is_trivial() { 0.0 } else { estimate_l1_odd(&t, f64::INFINITY)?.value };
                (t, z, l)
            } else {
                let a = a.expect("clap enforces --a");
                let t = integrate_profile(a, &p, r_max, *tol)?;
                let z = if t.is_trivial() { 0 } else { count_zeros_profile(&t)? };
                let l = if t.is_trivial() { 0.0 } else { estimate_L(&t, f64::INFINITY)?.value };
                (t, z, l)
            };
            let bytes = trajectory_csv(&traj, &["r", "f", "fprime"], None);
            emit_csv(out, csv.as_ref(), &bytes)?;
            if csv.is_some() {
                let v = json!({ "zeros": zeros, "limit": limit, "r_max": traj.x_max(), "csv": csv });
                emit_json(out, &record(cfg, v))?;
            }
            Ok(())
        }
        Command::Invert { dims, mu, smax, tol, csv, classify } => {
            let p = params(dims)?;
            positive("tol", *tol)?;
            if !(mu.is_finite() && *mu >= 1.0) {
                return Err(usage(format!("--mu must be at least 1, got {mu}")));
            }
            if p.n == 1 {
                return Err(usage("the inverted equation is solved for --n ≥ 2"));
            }
            let mut opts = InvertOptions::for_params(&p);
            opts.tol = *tol;
            if let Some(s) = smax {
                positive("smax", *s)?;
                opts.s_max = *s;
            }
            let sol = solve_inverted(*mu, &p, &opts)?;
            let bytes = trajectory_csv(&sol.traj, &["s", "w", "wprime", "H"], Some(&|s| energy_H(&sol, s).unwrap_or(f64::NAN)));
            emit_csv(out, csv.as_ref(), &bytes)?;
            if *classify {
                let c = classify_asymptotics(&sol)?;
                let v = json!({
                    "mode": c.mode,
                    "ltilde": c.ltilde.value,
                    "ltilde1": c.ltilde1.map(|l| l.value),
                    "uncertainty": c.ltilde.uncertainty,
                    "regime": c.regime,
                    "zeros": sol.tally.count,
                });
                emit_json(out, &record(cfg, v))?;
            }
            Ok(())
        }
        Command::Branch { dims, mu, m, kind, tol } => {
            let p = params(dims)?;
            positive("tol", *tol)?;
            positive("mu", *mu)?;
            let points: Vec<BranchPoint> = match kind {
                BranchChoice::Even | BranchChoice::Odd if p.n == 1 => {
                    let all = dim1_branches(*mu, *m, &p, *tol)?;
                    let want = |k: BranchKind| match kind {
                        BranchChoice::Even => matches!(k, BranchKind::Dim1CPlus | BranchKind::Dim1CMinus),
                        _ => matches!(k, BranchKind::Dim1DPlus | BranchKind::Dim1DMinus),
                    };
                    all.into_iter().filter(|b| want(b.kind)).collect()
                }
                BranchChoice::Even | BranchChoice::Odd => {
                    let fam = if *kind == BranchChoice::Even { PairFamily::Even } else { PairFamily::Odd };
                    let (lo, hi) = pair_for(fam, *mu, *m, &p, *tol)?;
                    vec![lo, hi]
                }
                BranchChoice::Am => vec![find_am(*m, &p, None, *tol)?],
                BranchChoice::Mum => vec![find_mu_m(*m, &p, *tol)?.0],
                BranchChoice::Singular => vec![singular_branch(*m, &p, *tol)?.point],
            };
            emit_json(out, &record(cfg, json!({ "branches": points })))
        }
        Command::Atlas { dims, mmax, mu, tol, out: dir, samples, seed } => {
            let p = params(dims)?;
            positive("tol", *tol)?;
            positive("mu", *mu)?;
            if *samples == 0 {
                return Err(usage("--samples must be at least 1"));
            }
            if !dir.is_dir() {
                return Err(usage(format!("output directory {} does not exist", dir.display())));
            }
            let atlas = build_atlas_seeded(&p, *mmax, *mu, *tol, *seed)?;
            let a_max = atlas
                .thresholds
                .iter()
                .chain(atlas.pairs.iter().filter(|b| b.shoot > 0.0))
                .map(|b| b.shoot.abs())
                .fold(4.0, f64::max)
                * 1.25;
            let table = bifurcation_table(Family::Regular, &p, a_max, *samples, *tol)?;
            let rec = record(cfg, serde_json::to_value(&atlas).expect("atlas serializes"));
            let text = serde_json::to_string_pretty(&rec).expect("JSON values serialize");
            let csv_path = dir.join("bifurcation.csv");
            let bytes = csv_bytes(
                &["a", "L", "N"],
                table.iter().map(|r| vec![num(r.a), num(r.limit), r.zeros.to_string()]),
            );
            write_atomic(&dir.join("atlas.json"), format!("{text}\n").as_bytes())?;
            write_atomic(&csv_path, &bytes)?;
            let v = json!({
                "atlas": dir.join("atlas.json"),
                "table": csv_path,
                "thresholds": atlas.thresholds.len(),
                "pairs": atlas.pairs.len(),
                "mu_thresholds": atlas.mu_thresholds.len(),
                "singular": atlas.singular.len(),
                "failures": atlas.failures.len(),
            });
            emit_json(out, &record(cfg, v))
        }
        Command::Validate { dims, from_atlas, check, csv } => {
            let p = params(dims)?;
            let text = fs::read_to_string(from_atlas)
                .map_err(|e| usage(format!("cannot read {}: {e}", from_atlas.display())))?;
            let atlas: Atlas = serde_json::from_str(&text)
                .map_err(|e| usage(format!("{} is not an atlas: {e}", from_atlas.display())))?;
            if atlas.n != p.n || atlas.alpha != p.alpha {
                return Err(usage(format!(
                    "atlas is for (N, α) = ({}, {}), not ({}, {})",
                    atlas.n, atlas.alpha, p.n, p.alpha
                )));
            }
            let rows = validate(&atlas, &p, *check)?;
            let bytes = csv_bytes(
                &["kind", "m", "shoot", "metric", "value", "tolerance", "pass"],
                rows.iter().map(|r| {
                    vec![
                        r.kind.map(|k| format!("{k:?}")).unwrap_or_default(),
                        r.m.to_string(),
                        num(r.shoot),
                        r.metric.clone(),
                        num(r.value),
                        num(r.tolerance),
                        r.pass.to_string(),
                    ]
                }),
            );
            if let Some(path) = csv {
                write_atomic(path, &bytes)?;
            }
            let failed = rows.iter().filter(|r| !r.pass).count();
            emit_json(out, &record(cfg, json!({ "checks": rows, "failed": failed })))?;
            if failed > 0 {
                return Err(Failure::Checks(format!("{failed} of {} outside tolerance", rows.len())));
            }
            Ok(())
        }
    }
}

fn trajectory_csv(traj: &Trajectory, header: &[&str], extra: Option<&dyn Fn(f64) -> f64>) -> Vec<u8> {
    csv_bytes(
        header,
        traj.grid.iter().zip(&traj.values).zip(&traj.derivs).map(|((x, y), d)| {
            let mut row = vec![num(*x), num(*y), num(*d)];
            if let Some(f) = extra {
                row.push(num(f(*x)));
            }
            row
        }),
    )
}

/// One line of a validation report.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub kind: Option<BranchKind>,
    pub m: usize,
    pub shoot: f64,
    pub metric: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn row(bp: &BranchPoint, metric: &str, value: f64, tolerance: f64) -> CheckRow {
    CheckRow {
        kind: Some(bp.kind),
        m: bp.m,
        shoot: bp.shoot,
        metric: metric.into(),
        value,
        tolerance,
        pass: value.abs() <= tolerance,
    }
}

fn regular_profile(bp: &BranchPoint, p: &ProblemParams, r_max: f64) -> Result<Trajectory> {
    match bp.kind {
        BranchKind::BPlus | BranchKind::BMinus | BranchKind::Dim1DPlus | BranchKind::Dim1DMinus => {
            Err(Error::DomainMismatch("odd profiles are not radial solutions".into()))
        }
        _ => integrate_profile(bp.shoot, p, r_max, 1e-11),
    }
}

/// Tolerances: 1e−2 relative for the evolution and the integral form, 1e−6
/// for the semigroup, 1e−6 relative (regular) or 1e−3 absolute (singular)
/// for the weak form.
pub fn validate(atlas: &Atlas, p: &ProblemParams, check: Check) -> Result<Vec<CheckRow>> {
    let radial: Vec<&BranchPoint> = atlas
        .pairs
        .iter()
        .chain(&atlas.thresholds)
        .filter(|b| !matches!(b.kind, BranchKind::BPlus | BranchKind::BMinus | BranchKind::Dim1DPlus | BranchKind::Dim1DMinus))
        .collect();
    let mut rows = Vec::new();
    match check {
        Check::Semigroup => {
            let expect = atlas.mu_target / mu_zero(*p)?;
            for t in [0.25, 1.0, 4.0] {
                let v = heat_semigroup_homogeneous(atlas.mu_target, t, p)?;
                rows.push(CheckRow {
                    kind: None,
                    m: 0,
                    shoot: t,
                    metric: "semigroup_relative".into(),
                    value: (v - expect) / expect,
                    tolerance: 1e-6,
                    pass: ((v - expect) / expect).abs() <= 1e-6,
                });
            }
        }
        Check::Selfsim => {
            for bp in radial {
                let f = regular_profile(bp, p, 80.0)?;
                let dr = (0.1 * bp.shoot.abs().powf(-p.alpha / 2.0)).min(0.01);
                let dt = (0.2 * dr).min(1e-3);
                let err = match selfsimilar_evolution_error(&f, 1.0, 2.0, 10.0, dr, dt) {
                    Ok(e) => e,
                    Err(Error::BlowupDetected(_)) => f64::INFINITY,
                    Err(e) => return Err(e),
                };
                rows.push(row(bp, "selfsim_relative", err, 1e-2));
                let lam = leading_growth_exponent(&f, 12.0, 0.002)?;
                rows.push(CheckRow { pass: true, ..row(bp, "growth_exponent", lam, f64::INFINITY) });
            }
        }
        Check::Duhamel => {
            for bp in radial {
                let f = regular_profile(bp, p, 80.0)?;
                let sup = f.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
                let r = duhamel_residual(&f, 1.0, &[0.0, 0.5, 1.0, 2.0, 4.0])?;
                rows.push(row(bp, "duhamel_relative", r / sup, 1e-2));
            }
        }
        Check::Distributional => {
            for bp in radial {
                let f = regular_profile(bp, p, 20.0)?;
                for (c, w) in [(0.0, 2.0), (3.0, 1.5)] {
                    let r = weak_form(&f, Bump::new(c, w)?, None)?;
                    rows.push(row(bp, &format!("weak_form_relative_bump_{c}_{w}"), r.relative(), 1e-6));
                }
            }
            for bp in &atlas.singular {
                let opts = singular_opts(p, atlas.tol);
                let sol = solve_inverted(bp.shoot, p, &opts)?;
                let c = classify_asymptotics(&sol)?;
                if c.mode != Mode::Slow {
                    return Err(Error::Undetermined(format!("singular branch m = {} is not slow on re-solve", bp.m)));
                }
                let tail = tail_law(&sol, &c);
                let r = weak_form(&sol.traj, Bump::new(0.0, 2.0)?, Some(tail))?;
                rows.push(row(bp, "weak_form_bump_0_2", r.residual, 1e-3));
            }
        }
    }
    Ok(rows)
}

/// Entry point of the binary.
pub fn main_with_env() -> i32 {
    if let Ok(v) = std::env::var("SSHEAT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("usage error: SSHEAT_THREADS must be a positive integer, got {v:?}");
                return 2;
            }
        }
    }
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let code = run_args(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock());
    code
}
