//! Command-line front end: `run`, `preset`, `list-presets`, `convergence`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::diagnostics::{convergence_order, ConvergenceProblem};
use crate::experiments::{
    load_spec_file, preset, registry, run_experiment, with_overrides, ExperimentSpec, RunSummary,
};
use crate::integrators::Scheme;
use crate::model::ModelParams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_INTEGRATOR: i32 = 2;

const SCHEMA_HELP: &str = "\
config sections and keys:
  [grid]        L (half-length), N (even, >= 8)
  [model]       variant = \"signed\" | \"modular\" | \"paired\", alpha | alpha_m + alpha_k, sign = 1 | -1, nonlinear
  [initial.<i>] kind = \"ground_state\" (scale, shift) | \"soliton\" (c, scale, shift)
                     | \"bump\" (A, center, p = 2 | 4) | \"rational\" (A) | \"theorem\" (lam, m, theta = \"zero\" | \"pi\")
  [integrator]  scheme = \"midpoint\" | \"etdrk4\", dt, fp_tol, fp_max_iters, contour_points, contour_radius, dealias
  [run]         name, t_end, observe_every, snapshot_times, weighted_m, fit, peaks
overrides: --set section.key=value (e.g. --set integrator.dt=1e-3)";

#[derive(Debug, Parser)]
#[command(
    name = "gkdv",
    version,
    about = "Pseudospectral solver for generalized KdV equations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a TOML config (or a manifest.json from an earlier run).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dotted override, e.g. integrator.dt=1e-3
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run registered presets; several names go to subdirectories of --out.
    Preset {
        #[arg(long = "name", required = true)]
        names: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Number of presets run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the preset registry.
    ListPresets,
    /// Measure the temporal order of a scheme on the soliton problem.
    Convergence {
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        /// Power as a decimal or as m/k.
        #[arg(long)]
        alpha: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = VariantArg::Signed)]
        variant: VariantArg,
        /// Step sizes (geometric); defaults depend on the scheme.
        #[arg(long, value_delimiter = ',')]
        dt: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Midpoint,
    Etdrk4,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Midpoint => Scheme::Midpoint,
            SchemeArg::Etdrk4 => Scheme::Etdrk4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Signed,
    Modular,
}

/// Default step sizes for the order study.
pub fn default_dts(scheme: Scheme) -> Vec<f64> {
    match scheme {
        Scheme::Midpoint => vec![0.02, 0.01, 0.005, 0.0025],
        Scheme::Etdrk4 => vec![0.04, 0.02, 0.01, 0.005],
    }
}

/// Parses `"0.5"` or `"7/9"`; the rational form is kept for the signed variant.
pub fn parse_alpha(text: &str) -> Result<(f64, Option<(u64, u64)>), String> {
    if let Some((m, k)) = text.split_once('/') {
        let m: u64 = m.trim().parse().map_err(|_| format!("bad numerator in {text}"))?;
        let k: u64 = k.trim().parse().map_err(|_| format!("bad denominator in {text}"))?;
        if m == 0 || k == 0 {
            return Err(format!("alpha {text} must be positive"));
        }
        Ok((m as f64 / k as f64, Some((m, k))))
    } else {
        let a: f64 = text.trim().parse().map_err(|_| format!("bad alpha {text}"))?;
        if !(a.is_finite() && a > 0.0) {
            return Err(format!("alpha {text} must be positive"));
        }
        let rational = (a.fract() == 0.0).then_some((a as u64, 1));
        Ok((a, rational))
    }
}

/// Entry point; returns the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = writeln!(err, "{text}\n{SCHEMA_HELP}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    match cli.command {
        Command::Run {
            config,
            out: dir,
            overrides,
        } => match load_spec_file(&config, &overrides) {
            Ok(spec) => run_one(&spec, &dir, out, err),
            Err(e) => invalid(err, e),
        },
        Command::Preset {
            names,
            out: dir,
            overrides,
            jobs,
        } => run_presets(&names, &dir, &overrides, jobs, out, err),
        Command::ListPresets => {
            for e in registry() {
                let _ = writeln!(out, "{:<26} {}", e.name, e.description);
            }
            EXIT_OK
        }
        Command::Convergence {
            scheme,
            alpha,
            out: dir,
            variant,
            dt,
        } => convergence(scheme.into(), &alpha, variant, &dt, &dir, out, err),
    }
}

fn invalid(err: &mut dyn Write, e: impl std::fmt::Display) -> i32 {
    let _ = writeln!(err, "error: {e}\n{SCHEMA_HELP}");
    EXIT_INVALID
}

fn report(summary: &RunSummary, dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    if let Some(f) = &summary.failure {
        let _ = writeln!(
            err,
            "{}: integrator failure at t = {}: {}",
            summary.name, f.t, f.message
        );
        return EXIT_INTEGRATOR;
    }
    let _ = writeln!(
        out,
        "{}: reached t = {} in {} steps ({:.1} s) -> {}",
        summary.name,
        summary.t_final,
        summary.steps,
        summary.wall_time_s,
        dir.display()
    );
    for s in &summary.solutions {
        let _ = writeln!(
            out,
            "  {} ({}): mass drift {:.2e}, energy drift {:.2e}, sup {:.6} -> {:.6}",
            s.label,
            s.variant.as_str(),
            s.mass_drift.max,
            s.energy_drift.max,
            s.initial_sup,
            s.final_sup
        );
    }
    if let Some(d) = &summary.max_difference {
        let _ = writeln!(out, "  max |u - v|_inf = {:.3e} at t = {}", d.linf, d.t);
    }
    EXIT_OK
}

fn run_one(spec: &ExperimentSpec, dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match run_experiment(spec, dir) {
        Ok(summary) => report(&summary, dir, out, err),
        Err(e) => invalid(err, e),
    }
}

fn run_presets(
    names: &[String],
    dir: &Path,
    overrides: &[String],
    jobs: usize,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    // resolve everything before computing anything
    let mut specs = Vec::with_capacity(names.len());
    for name in names {
        match preset(name).and_then(|s| with_overrides(&s, overrides)) {
            Ok(s) => specs.push(s),
            Err(e) => return invalid(err, e),
        }
    }
    let dirs: Vec<PathBuf> = if specs.len() == 1 {
        vec![dir.to_path_buf()]
    } else {
        names.iter().map(|n| dir.join(n)).collect()
    };
    let jobs = jobs.clamp(1, specs.len());
    let results: Vec<_> = if jobs == 1 {
        specs.iter().zip(&dirs).map(|(s, d)| run_experiment(s, d)).collect()
    } else {
        let slots = std::sync::Mutex::new((0..specs.len()).map(|_| None).collect::<Vec<_>>());
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= specs.len() {
                        break;
                    }
                    let r = run_experiment(&specs[i], &dirs[i]);
                    slots.lock().expect("result lock")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("result lock")
            .into_iter()
            .map(|r| r.expect("every preset ran"))
            .collect()
    };
    let mut code = EXIT_OK;
    for (r, d) in results.iter().zip(&dirs) {
        let c = match r {
            Ok(summary) => report(summary, d, out, err),
            Err(e) => invalid(err, e),
        };
        code = code.max(c);
    }
    code
}

fn convergence(
    scheme: Scheme,
    alpha: &str,
    variant: VariantArg,
    dts: &[f64],
    dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let (a, rational) = match parse_alpha(alpha) {
        Ok(v) => v,
        Err(e) => return invalid(err, e),
    };
    let params = match (variant, rational) {
        (VariantArg::Modular, _) => ModelParams::modular(a),
        (VariantArg::Signed, Some((m, k))) => ModelParams::signed(m, k),
        (VariantArg::Signed, None) => {
            return invalid(
                err,
                format!("signed variant needs alpha as m/k with odd m, k (got {alpha})"),
            );
        }
    };
    if let Err(e) = params.validate() {
        return invalid(err, e);
    }
    let dts = if dts.is_empty() {
        default_dts(scheme)
    } else {
        dts.to_vec()
    };
    let problem = match ConvergenceProblem::soliton(a, params) {
        Ok(p) => p,
        Err(e) => return invalid(err, e),
    };
    let study = match convergence_order(&problem, scheme, &dts) {
        Ok(s) => s,
        Err(crate::diagnostics::DiagnosticsError::Evolve(e)) => {
            let _ = writeln!(err, "integrator failure at t = {}: {}", e.t, e.source);
            return EXIT_INTEGRATOR;
        }
        Err(e) => return invalid(err, e),
    };
    let path = dir.join("convergence.json");
    let written = std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&path, serde_json::to_string_pretty(&study).expect("study serializes")));
    if let Err(e) = written {
        return invalid(err, format!("{}: {e}", path.display()));
    }
    for (dt, e) in study.dts.iter().zip(&study.errors) {
        let _ = writeln!(out, "dt = {dt:<10} error = {e:.3e}");
    }
    match study.slope {
        Some(s) => {
            let _ = writeln!(out, "{} slope = {s:.3}", scheme.as_str());
        }
        None => {
            let _ = writeln!(out, "{} EXACT (errors at roundoff)", scheme.as_str());
        }
    }
    EXIT_OK
}
