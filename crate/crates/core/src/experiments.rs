//! Declarative experiment specifications, the preset registry, and the run
//! driver that writes diagnostics, snapshots and summaries to disk.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{DiagnosticRecord, RecordOptions, SolitonFit};
use crate::grid::{FieldState, PeriodicGrid};
use crate::integrators::{observation_times, IntegratorConfig, Propagator};
use crate::model::{bump, rational_decay, rescaled_soliton, superpose, theorem_datum, ModelParams, Phase, Variant};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown preset `{name}`; available: {}", available.join(", "))]
    UnknownPreset { name: String, available: Vec<String> },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "L")]
    pub half_length: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

/// Which equation(s) to evolve; `paired` runs the signed (`u`) and modular
/// (`v`) variants side by side from the same samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantChoice {
    Signed,
    Modular,
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: VariantChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_m: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_k: Option<u64>,
    #[serde(default = "one")]
    pub sign: f64,
    #[serde(default = "yes")]
    pub nonlinear: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn two() -> u32 {
    2
}

impl ModelSpec {
    fn rational(variant: VariantChoice, m: u64, k: u64) -> Self {
        Self {
            variant,
            alpha: None,
            alpha_m: Some(m),
            alpha_k: Some(k),
            sign: 1.0,
            nonlinear: true,
        }
    }

    /// Resolved power `α`.
    pub fn alpha(&self) -> Result<f64, ConfigError> {
        let from_ratio = match (self.alpha_m, self.alpha_k) {
            (Some(m), Some(k)) => {
                if m == 0 || k == 0 {
                    return Err(ConfigError::invalid(
                        "model.alpha_m",
                        "alpha_m and alpha_k must be positive",
                    ));
                }
                Some(m as f64 / k as f64)
            }
            (None, None) => None,
            (Some(_), None) => return Err(ConfigError::invalid("model.alpha_k", "alpha_m given without alpha_k")),
            (None, Some(_)) => return Err(ConfigError::invalid("model.alpha_m", "alpha_k given without alpha_m")),
        };
        match (self.alpha, from_ratio) {
            (Some(a), Some(r)) if (a - r).abs() > 1e-12 * r => Err(ConfigError::invalid(
                "model.alpha",
                format!("alpha {a} disagrees with alpha_m/alpha_k = {r}"),
            )),
            (_, Some(r)) => Ok(r),
            (Some(a), None) => Ok(a),
            (None, None) => Err(ConfigError::invalid(
                "model.alpha",
                "alpha or alpha_m/alpha_k is required",
            )),
        }
    }

    /// Parameters for each evolved solution, signed first.
    pub fn params(&self) -> Result<Vec<ModelParams>, ConfigError> {
        let alpha = self.alpha()?;
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(ConfigError::invalid(
                "model.sign",
                format!("sign must be 1 or -1, got {}", self.sign),
            ));
        }
        let rational = self.alpha_m.zip(self.alpha_k);
        let make = |variant: Variant| {
            let p = ModelParams {
                variant,
                alpha,
                sign: self.sign,
                nonlinear: self.nonlinear,
                alpha_rational: rational,
            };
            p.validate()
                .map_err(|e| ConfigError::invalid("model.alpha", e.to_string()))?;
            Ok(p)
        };
        match self.variant {
            VariantChoice::Signed => Ok(vec![make(Variant::Signed)?]),
            VariantChoice::Modular => Ok(vec![make(Variant::Modular)?]),
            VariantChoice::Paired => Ok(vec![make(Variant::Signed)?, make(Variant::Modular)?]),
        }
    }
}

/// One additive term of the initial data. Shifts follow `f(x - shift)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialTerm {
    /// `scale·Q(x - shift)`
    GroundState {
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `scale·Q_c(x - shift)`
    Soliton {
        c: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `A·exp(-(x - center)^p)`
    Bump {
        #[serde(rename = "A")]
        amplitude: f64,
        #[serde(default)]
        center: f64,
        #[serde(default = "two")]
        p: u32,
    },
    /// `A/√(1+x²)`
    Rational {
        #[serde(rename = "A")]
        amplitude: f64,
    },
    /// `±2λ⟨x⟩^{-m}`
    Theorem {
        lam: f64,
        m: f64,
        #[serde(default)]
        theta: Phase,
    },
}

impl InitialTerm {
    fn sample(&self, grid: &PeriodicGrid, alpha: f64, field: &str) -> Result<FieldState, ConfigError> {
        let bad = |e: crate::model::ModelError| ConfigError::invalid(field, e.to_string());
        let scaled = |s: f64, mut f: FieldState| {
            if s != 1.0 {
                f.values.iter_mut().for_each(|v| *v *= s);
            }
            f
        };
        Ok(match *self {
            InitialTerm::GroundState { scale, shift } => {
                scaled(scale, rescaled_soliton(grid, alpha, 1.0, shift).map_err(bad)?)
            }
            InitialTerm::Soliton { c, scale, shift } => {
                scaled(scale, rescaled_soliton(grid, alpha, c, shift).map_err(bad)?)
            }
            InitialTerm::Bump { amplitude, center, p } => bump(grid, amplitude, center, p).map_err(bad)?,
            InitialTerm::Rational { amplitude } => rational_decay(grid, amplitude),
            InitialTerm::Theorem { lam, m, theta } => {
                if !(m > 0.0 && lam.is_finite()) {
                    return Err(ConfigError::invalid(field, "theorem datum needs m > 0 and finite lam"));
                }
                theorem_datum(grid, lam, m, theta)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub t_end: f64,
    #[serde(default = "one")]
    pub observe_every: f64,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_m: Option<f64>,
    #[serde(default)]
    pub fit: bool,
    #[serde(default)]
    pub peaks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub grid: GridSpec,
    pub model: ModelSpec,
    /// Terms keyed by their index in the config (`[initial.1]`, `[initial.2]`, ...).
    pub initial: BTreeMap<String, InitialTerm>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    pub run: RunSpec,
}

/// Grid, parameters and initial samples built from a validated spec.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub grid: PeriodicGrid,
    pub params: Vec<ModelParams>,
    pub initial: FieldState,
}

impl ExperimentSpec {
    pub fn name(&self) -> &str {
        &self.run.name
    }

    /// Initial terms in ascending index order.
    pub fn terms(&self) -> Result<Vec<(&str, &InitialTerm)>, ConfigError> {
        let mut out = Vec::with_capacity(self.initial.len());
        for (key, term) in &self.initial {
            let idx: u64 = key
                .parse()
                .map_err(|_| ConfigError::invalid(format!("initial.{key}"), "initial terms must be numbered"))?;
            out.push((idx, key.as_str(), term));
        }
        out.sort_by_key(|e| e.0);
        Ok(out.into_iter().map(|(_, k, t)| (k, t)).collect())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.grid;
        if g.n % 2 == 1 {
            return Err(ConfigError::invalid("grid.N", "N must be even"));
        }
        if g.n < 8 {
            return Err(ConfigError::invalid("grid.N", "N must be at least 8"));
        }
        if !(g.half_length.is_finite() && g.half_length > 0.0) {
            return Err(ConfigError::invalid("grid.L", "L must be positive and finite"));
        }
        self.model.params()?;
        if self.initial.is_empty() {
            return Err(ConfigError::invalid("initial", "at least one initial term is required"));
        }
        self.terms()?;
        self.integrator
            .validate()
            .map_err(|e| ConfigError::invalid("integrator", e.to_string()))?;
        let r = &self.run;
        if r.name.is_empty()
            || !r.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || r.name.starts_with('.')
        {
            return Err(ConfigError::invalid(
                "run.name",
                "name must be nonempty and use only letters, digits, '-', '_' or '.'",
            ));
        }
        if !(r.t_end.is_finite() && r.t_end > 0.0) {
            return Err(ConfigError::invalid("run.t_end", "t_end must be positive"));
        }
        if !(r.observe_every.is_finite() && r.observe_every >= self.integrator.dt) {
            return Err(ConfigError::invalid(
                "run.observe_every",
                "observe_every must be at least dt",
            ));
        }
        if let Some(t) = r.snapshot_times.iter().find(|t| !(**t >= 0.0 && **t <= r.t_end)) {
            return Err(ConfigError::invalid(
                "run.snapshot_times",
                format!("{t} is outside [0, t_end]"),
            ));
        }
        if let Some(m) = r.weighted_m {
            if !(m.is_finite() && m > 0.0) {
                return Err(ConfigError::invalid("run.weighted_m", "weighted_m must be positive"));
            }
        }
        Ok(())
    }

    /// Builds the grid and initial samples.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        self.validate()?;
        let grid = PeriodicGrid::new(self.grid.half_length, self.grid.n)
            .map_err(|e| ConfigError::invalid("grid", e.to_string()))?;
        let params = self.model.params()?;
        let alpha = params[0].alpha;
        let fields = self
            .terms()?
            .into_iter()
            .map(|(k, t)| t.sample(&grid, alpha, &format!("initial.{k}")))
            .collect::<Result<Vec<_>, _>>()?;
        let initial = superpose(&fields).map_err(|e| ConfigError::invalid("initial", e.to_string()))?;
        initial
            .ensure_finite()
            .map_err(|e| ConfigError::invalid("initial", e.to_string()))?;
        Ok(Resolved { grid, params, initial })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes to TOML")
    }

    fn record_options(&self) -> RecordOptions {
        RecordOptions {
            fit: self.run.fit,
            peaks: self.run.peaks,
            weighted_m: self.run.weighted_m,
            ..Default::default()
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_table(text: &str) -> Result<toml::Table, ConfigError> {
    text.parse::<toml::Table>().map_err(|e| ConfigError::Parse {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    })
}

fn spec_from_table(table: toml::Table) -> Result<ExperimentSpec, ConfigError> {
    let spec: ExperimentSpec =
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse {
                line: None,
                message: e.message().to_string(),
            })?;
    spec.validate()?;
    Ok(spec)
}

/// Parses and validates a TOML config; unknown keys are rejected.
pub fn load_spec(text: &str) -> Result<ExperimentSpec, ConfigError> {
    load_spec_with_overrides(text, &[])
}

/// Parses a config, applies `key.path=value` overrides, then validates.
pub fn load_spec_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentSpec, ConfigError> {
    let mut table = parse_table(text)?;
    if overrides.is_empty() {
        // typed parse first so errors carry the offending line
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        spec.validate()?;
        return Ok(spec);
    }
    apply_overrides(&mut table, overrides)?;
    spec_from_table(table)
}

/// Applies overrides to an already-built spec and re-validates.
pub fn with_overrides(spec: &ExperimentSpec, overrides: &[String]) -> Result<ExperimentSpec, ConfigError> {
    if overrides.is_empty() {
        spec.validate()?;
        return Ok(spec.clone());
    }
    let mut table = toml::Table::try_from(spec).expect("spec serializes to TOML");
    apply_overrides(&mut table, overrides)?;
    spec_from_table(table)
}

fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::invalid(item.as_str(), "override must look like section.key=value"))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::invalid(
                key,
                "override key must be a dotted path like integrator.dt",
            ));
        }
        let mut cur = &mut *table;
        for seg in &path[..path.len() - 1] {
            let entry = cur
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::invalid(key, format!("`{seg}` is not a section")))?;
        }
        cur.insert(path[path.len() - 1].to_string(), parse_override_value(raw.trim()));
    }
    Ok(())
}

/// `manifest.json` contents: the resolved spec plus the code version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub spec: ExperimentSpec,
}

pub fn load_manifest(text: &str) -> Result<ExperimentSpec, ConfigError> {
    let m: Manifest = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: Some(e.line()),
        message: e.to_string(),
    })?;
    m.spec.validate()?;
    Ok(m.spec)
}

/// Loads a TOML config, or a `manifest.json` from an earlier run.
pub fn load_spec_file(path: &Path, overrides: &[String]) -> Result<ExperimentSpec, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "json") {
        with_overrides(&load_manifest(&text)?, overrides)
    } else {
        load_spec_with_overrides(&text, overrides)
    }
}

// ---------------------------------------------------------------------------
// Preset registry

/// A named preset with a one-line description.
#[derive(Debug, Clone)]
pub struct PresetEntry {
    pub name: String,
    pub description: String,
    pub spec: ExperimentSpec,
}

#[derive(Clone, Copy)]
struct Power {
    tag: &'static str,
    m: u64,
    k: u64,
}

const A19: Power = Power { tag: "a19", m: 1, k: 9 };
const A13: Power = Power { tag: "a13", m: 1, k: 3 };
const A59: Power = Power { tag: "a59", m: 5, k: 9 };
const A79: Power = Power { tag: "a79", m: 7, k: 9 };
const A1: Power = Power { tag: "a1", m: 1, k: 1 };
const A3: Power = Power { tag: "a3", m: 3, k: 1 };

impl Power {
    fn label(self) -> String {
        if self.k == 1 {
            format!("{}", self.m)
        } else {
            format!("{}/{}", self.m, self.k)
        }
    }
}

/// Default grid for a run length: `L = 128π, N = 2^13` up to `t = 200`,
/// `L = 512π, N = 2^15` beyond.
pub fn default_grid(t_end: f64) -> GridSpec {
    if t_end <= 200.0 {
        GridSpec {
            half_length: 128.0 * PI,
            n: 1 << 13,
        }
    } else {
        GridSpec {
            half_length: 512.0 * PI,
            n: 1 << 15,
        }
    }
}

/// `L = 1600π, N = 2^16`, wide enough that fast radiation does not wrap
/// back onto the leading soliton within `t = 200`.
pub fn large_grid() -> GridSpec {
    GridSpec {
        half_length: 1600.0 * PI,
        n: 1 << 16,
    }
}

fn snapshots_for(t_end: f64) -> Vec<f64> {
    let mut s = vec![0.0];
    for t in [10.0, 25.0, 50.0, 100.0, 150.0, 200.0, 300.0, 400.0, 500.0] {
        if t <= t_end {
            s.push(t);
        }
    }
    s
}

fn gs(shift: f64) -> InitialTerm {
    InitialTerm::GroundState { scale: 1.0, shift }
}

fn neg_gs(shift: f64) -> InitialTerm {
    InitialTerm::GroundState { scale: -1.0, shift }
}

fn sol(c: f64, shift: f64) -> InitialTerm {
    InitialTerm::Soliton { c, scale: 1.0, shift }
}

fn gauss(amplitude: f64, center: f64, p: u32) -> InitialTerm {
    InitialTerm::Bump { amplitude, center, p }
}

fn build(name: &str, model: ModelSpec, terms: &[InitialTerm], t_end: f64, grid: GridSpec) -> ExperimentSpec {
    ExperimentSpec {
        grid,
        model,
        initial: terms
            .iter()
            .enumerate()
            .map(|(i, t)| ((i + 1).to_string(), *t))
            .collect(),
        integrator: IntegratorConfig::default(),
        run: RunSpec {
            name: name.to_string(),
            t_end,
            observe_every: if t_end <= 200.0 { 0.5 } else { 1.0 },
            snapshot_times: snapshots_for(t_end),
            weighted_m: None,
            fit: true,
            peaks: true,
        },
    }
}

fn paired(p: Power) -> ModelSpec {
    ModelSpec::rational(VariantChoice::Paired, p.m, p.k)
}

/// All registered presets. Bare family names are aliases of the first power listed.
pub fn registry() -> Vec<PresetEntry> {
    let mut out: Vec<PresetEntry> = Vec::new();
    let mut add = |name: String, description: String, spec: ExperimentSpec| {
        out.push(PresetEntry {
            name,
            description,
            spec,
        });
    };
    let schamel = ModelSpec {
        variant: VariantChoice::Modular,
        alpha: Some(0.5),
        alpha_m: None,
        alpha_k: None,
        sign: 1.0,
        nonlinear: true,
    };
    for (name, a) in [("schamel-gauss-pos", 6.0), ("schamel-gauss-neg", -6.0)] {
        add(
            name.into(),
            format!("Schamel equation (modular, alpha=1/2), Gaussian {a}·exp(-x²), t=200"),
            build(name, schamel, &[gauss(a, 0.0, 2)], 200.0, large_grid()),
        );
    }
    // (family, powers, description, terms, t_end)
    type Family = (&'static str, Vec<Power>, &'static str, Vec<InitialTerm>, f64);
    let families: Vec<Family> = vec![
        (
            "soliton-travel",
            vec![A19, A79],
            "soliton Q(x+25), signed vs modular",
            vec![gs(-25.0)],
            50.0,
        ),
        (
            "neg-soliton",
            vec![A19, A79, A1, A3],
            "negative soliton -Q(x+25)",
            vec![neg_gs(-25.0)],
            50.0,
        ),
        (
            "two-soliton",
            vec![A19, A79],
            "two-soliton collision Q(x+45)+Q_0.9(x+5)",
            vec![gs(-45.0), sol(0.9, -5.0)],
            500.0,
        ),
        (
            "soliton-gauss",
            vec![A19, A79],
            "soliton and Gaussian Q(x+45)+3.5·exp(-x²)",
            vec![gs(-45.0), gauss(3.5, 0.0, 2)],
            200.0,
        ),
        (
            "two-gauss-breather",
            vec![A19, A79],
            "opposite Gaussians -2.5·exp(-(x-50)²)+1.5·exp(-x²), breathers in the modular radiation",
            vec![gauss(-2.5, 50.0, 2), gauss(1.5, 0.0, 2)],
            500.0,
        ),
        (
            "gauss-neg-longrun",
            vec![A19, A13, A59],
            "negative Gaussian -6·exp(-x²), long run",
            vec![gauss(-6.0, 0.0, 2)],
            500.0,
        ),
    ];
    for (family, powers, desc, terms, t_end) in families {
        for (i, p) in powers.iter().enumerate() {
            let name = format!("{family}-{}", p.tag);
            let description = format!("{desc}, alpha={}, t={t_end}", p.label());
            if i == 0 {
                add(
                    family.into(),
                    description.clone(),
                    build(family, paired(*p), &terms, t_end, default_grid(t_end)),
                );
            }
            add(
                name.clone(),
                description,
                build(&name, paired(*p), &terms, t_end, default_grid(t_end)),
            );
        }
    }
    // opposite-sign soliton pairs
    for (p, c_ahead) in [(A19, 0.9), (A79, 0.75)] {
        let name = format!("neg-pos-soliton-{}", p.tag);
        let terms = [neg_gs(-100.0), sol(0.75, -60.0)];
        let desc = format!(
            "fast negative soliton behind a positive one, -Q(x+100)+Q_0.75(x+60), alpha={}, t=200",
            p.label()
        );
        if p.tag == "a19" {
            add(
                "neg-pos-soliton".into(),
                desc.clone(),
                build("neg-pos-soliton", paired(p), &terms, 200.0, default_grid(200.0)),
            );
        }
        add(
            name.clone(),
            desc,
            build(&name, paired(p), &terms, 200.0, default_grid(200.0)),
        );
        let name = format!("neg-ahead-soliton-{}", p.tag);
        add(
            name.clone(),
            format!(
                "negative soliton ahead of a positive one, -Q(x-100)+Q_{c_ahead}(x), alpha={}, t=200",
                p.label()
            ),
            build(
                &name,
                paired(p),
                &[neg_gs(100.0), sol(c_ahead, 0.0)],
                200.0,
                default_grid(200.0),
            ),
        );
    }
    // Gaussians of both signs; lower amplitude for the integer powers
    for (p, a) in [(A19, 6.0), (A79, 6.0), (A1, 3.0), (A3, 3.0)] {
        for (sgn, tag) in [(1.0, "pos"), (-1.0, "neg")] {
            let name = format!("gauss-{tag}-{}", p.tag);
            let desc = format!("Gaussian {}·exp(-x²), alpha={}, t=200", sgn * a, p.label());
            let spec = build(&name, paired(p), &[gauss(sgn * a, 0.0, 2)], 200.0, default_grid(200.0));
            if p.tag == "a19" && tag == "pos" {
                add(
                    "gauss".into(),
                    desc.clone(),
                    ExperimentSpec {
                        run: RunSpec {
                            name: "gauss".into(),
                            ..spec.run.clone()
                        },
                        ..spec.clone()
                    },
                );
            }
            add(name, desc, spec);
        }
    }
    for p in [A19, A79] {
        for (sgn, tag) in [(1.0, "pos"), (-1.0, "neg")] {
            let name = format!("supergauss-{tag}-{}", p.tag);
            let desc = format!("super-Gaussian {}·exp(-x⁴), alpha={}, t=100", sgn * 6.0, p.label());
            let spec = build(
                &name,
                paired(p),
                &[gauss(sgn * 6.0, 0.0, 4)],
                100.0,
                default_grid(100.0),
            );
            if p.tag == "a19" && tag == "pos" {
                add(
                    "supergauss".into(),
                    desc.clone(),
                    ExperimentSpec {
                        run: RunSpec {
                            name: "supergauss".into(),
                            ..spec.run.clone()
                        },
                        ..spec.clone()
                    },
                );
            }
            add(name, desc, spec);
        }
    }
    let rational_grid = large_grid();
    let rational = |name: String, p: Power, a: f64, t_end: f64| {
        let desc = format!("slowly decaying {a}/√(1+x²) on L=1600π, alpha={}, t={t_end}", p.label());
        let spec = build(
            &name,
            paired(p),
            &[InitialTerm::Rational { amplitude: a }],
            t_end,
            rational_grid,
        );
        (name, desc, spec)
    };
    let mut rationals = Vec::new();
    for (p, a) in [(A19, 1.0), (A79, 1.0), (A1, 1.0), (A3, 1.5)] {
        if p.tag == "a19" {
            rationals.push(rational("rational".into(), p, a, 200.0));
        }
        rationals.push(rational(format!("rational-pos-{}", p.tag), p, a, 200.0));
    }
    for p in [A19, A79, A1, A3] {
        rationals.push(rational(format!("rational-neg-{}", p.tag), p, -2.0, 200.0));
    }
    rationals.push(rational("rational-neg-longrun-a19".into(), A19, -2.0, 500.0));
    for (n, d, s) in rationals {
        add(n, d, s);
    }
    out
}

pub fn preset_names() -> Vec<String> {
    registry().into_iter().map(|e| e.name).collect()
}

pub fn preset(name: &str) -> Result<ExperimentSpec, ConfigError> {
    registry()
        .into_iter()
        .find(|e| e.name == name)
        .map(|e| e.spec)
        .ok_or_else(|| ConfigError::UnknownPreset {
            name: name.to_string(),
            available: preset_names(),
        })
}

// ---------------------------------------------------------------------------
// Running

/// `‖u - v‖` at one observation of a paired run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifferenceRecord {
    pub t: f64,
    pub linf: f64,
    pub l2: f64,
}

impl DifferenceRecord {
    pub fn between(u: &FieldState, v: &FieldState, grid: &PeriodicGrid) -> Self {
        let (mut linf, mut sq) = (0.0_f64, 0.0);
        for (a, b) in u.values.iter().zip(&v.values) {
            let d = a - b;
            linf = linf.max(d.abs());
            sq += d * d;
        }
        Self {
            t: u.t,
            linf,
            l2: (grid.dx() * sq).sqrt(),
        }
    }
}

/// Relative drift of one conserved quantity, final and worst over the run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Drift {
    #[serde(rename = "final")]
    pub last: f64,
    pub max: f64,
}

impl Drift {
    fn update(&mut self, value: f64) {
        self.last = value;
        self.max = self.max.max(value);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSummary {
    /// `u` for the signed (or only) solution, `v` for the modular one of a pair.
    pub label: String,
    pub variant: Variant,
    /// `|M(t) - M(0)|/M(0)`
    pub mass_drift: Drift,
    /// `|∫u(t) - ∫u(0)|/max(1, |∫u(0)|)`
    pub integral_drift: Drift,
    /// `|E(t) - E(0)|/max(1, |E(0)|)`
    pub energy_drift: Drift,
    pub initial_sup: f64,
    pub final_sup: f64,
    pub final_fit: Option<SolitonFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub t: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub version: String,
    pub completed: bool,
    pub failure: Option<Failure>,
    pub t_final: f64,
    pub steps: u64,
    pub wall_time_s: f64,
    pub solutions: Vec<SolutionSummary>,
    pub max_difference: Option<DifferenceRecord>,
}

/// Receives the products of a run as they are computed.
pub trait RunSink {
    /// Diagnostics for solution `index` (0 = `u`, 1 = `v`).
    fn record(&mut self, index: usize, record: &DiagnosticRecord) -> std::io::Result<()>;
    fn difference(&mut self, record: &DifferenceRecord) -> std::io::Result<()>;
    /// Snapshot requested at `t`; one state per solution.
    fn snapshot(&mut self, t: f64, grid: &PeriodicGrid, states: &[&FieldState]) -> std::io::Result<()>;
}

/// Keeps everything in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub records: Vec<Vec<DiagnosticRecord>>,
    pub differences: Vec<DifferenceRecord>,
    pub snapshots: Vec<(f64, Vec<FieldState>)>,
}

impl RunSink for MemorySink {
    fn record(&mut self, index: usize, record: &DiagnosticRecord) -> std::io::Result<()> {
        if self.records.len() <= index {
            self.records.resize(index + 1, Vec::new());
        }
        self.records[index].push(record.clone());
        Ok(())
    }

    fn difference(&mut self, record: &DifferenceRecord) -> std::io::Result<()> {
        self.differences.push(*record);
        Ok(())
    }

    fn snapshot(&mut self, t: f64, _grid: &PeriodicGrid, states: &[&FieldState]) -> std::io::Result<()> {
        self.snapshots.push((t, states.iter().map(|s| (*s).clone()).collect()));
        Ok(())
    }
}

/// Streams NDJSON and CSV files into a run directory.
pub struct FileSink {
    dir: PathBuf,
    diagnostics: Vec<BufWriter<File>>,
    difference: Option<BufWriter<File>>,
}

pub const DIAGNOSTICS_FILES: [&str; 2] = ["diagnostics.ndjson", "diagnostics_v.ndjson"];
pub const DIFFERENCE_FILE: &str = "difference.ndjson";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// `snapshot_t<time>.csv`, the time in shortest round-trip decimal form.
pub fn snapshot_file_name(t: f64) -> String {
    format!("snapshot_t{t}.csv")
}

impl FileSink {
    pub fn create(dir: &Path, solutions: usize) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let diagnostics = DIAGNOSTICS_FILES[..solutions]
            .iter()
            .map(|f| File::create(dir.join(f)).map(BufWriter::new))
            .collect::<Result<Vec<_>, _>>()?;
        let difference = if solutions > 1 {
            Some(BufWriter::new(File::create(dir.join(DIFFERENCE_FILE))?))
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            diagnostics,
            difference,
        })
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        for w in &mut self.diagnostics {
            w.flush()?;
        }
        if let Some(w) = &mut self.difference {
            w.flush()?;
        }
        Ok(())
    }
}

fn write_json_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

impl RunSink for FileSink {
    fn record(&mut self, index: usize, record: &DiagnosticRecord) -> std::io::Result<()> {
        write_json_line(&mut self.diagnostics[index], record)
    }

    fn difference(&mut self, record: &DifferenceRecord) -> std::io::Result<()> {
        match &mut self.difference {
            Some(w) => write_json_line(w, record),
            None => Ok(()),
        }
    }

    fn snapshot(&mut self, t: f64, grid: &PeriodicGrid, states: &[&FieldState]) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(snapshot_file_name(t)))?);
        w.write_all(if states.len() > 1 { b"x,u,v\n" } else { b"x,u\n" })?;
        for (j, x) in grid.nodes().iter().enumerate() {
            write!(w, "{x:.16e}")?;
            for s in states {
                write!(w, ",{:.16e}", s.values[j])?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

struct Tracker {
    initial: FieldState,
    mass0: f64,
    integral0: f64,
    energy0: f64,
    summary: SolutionSummary,
}

impl Tracker {
    fn new(label: &str, params: &ModelParams, first: &DiagnosticRecord, initial: &FieldState) -> Self {
        Self {
            initial: initial.clone(),
            mass0: first.mass,
            integral0: first.integral,
            energy0: first.energy,
            summary: SolutionSummary {
                label: label.to_string(),
                variant: params.variant,
                mass_drift: Drift::default(),
                integral_drift: Drift::default(),
                energy_drift: Drift::default(),
                initial_sup: first.sup_norm,
                final_sup: first.sup_norm,
                final_fit: first.fit,
            },
        }
    }

    fn update(&mut self, r: &DiagnosticRecord) {
        let s = &mut self.summary;
        let dm = (r.mass - self.mass0).abs();
        s.mass_drift.update(if self.mass0 > 0.0 { dm / self.mass0 } else { dm });
        s.integral_drift
            .update((r.integral - self.integral0).abs() / self.integral0.abs().max(1.0));
        s.energy_drift
            .update((r.energy - self.energy0).abs() / self.energy0.abs().max(1.0));
        s.final_sup = r.sup_norm;
        s.final_fit = r.fit;
    }
}

const LABELS: [&str; 2] = ["u", "v"];

/// Runs `spec`, streaming products into `sink`. Integrator failures end the
/// run early and are reported in the summary rather than as an error.
pub fn execute(spec: &ExperimentSpec, sink: &mut dyn RunSink) -> Result<RunSummary, RunError> {
    let started = Instant::now();
    let Resolved { grid, params, initial } = spec.resolve()?;
    let io = |source: std::io::Error| RunError::Io {
        path: spec.run.name.clone(),
        source,
    };
    let t_end = spec.run.t_end;
    let observe = observation_times(0.0, t_end, spec.run.observe_every, spec.integrator.dt)
        .map_err(|e| ConfigError::invalid("run.observe_every", e.to_string()))?;
    let mut requested = observe.clone();
    requested.extend_from_slice(&spec.run.snapshot_times);
    let opts = spec.record_options();

    let mut summary = RunSummary {
        name: spec.run.name.clone(),
        version: VERSION.to_string(),
        completed: false,
        failure: None,
        t_final: 0.0,
        steps: 0,
        wall_time_s: 0.0,
        solutions: Vec::new(),
        max_difference: None,
    };

    let mut props = Vec::with_capacity(params.len());
    for p in &params {
        match Propagator::new(&initial, p, &grid, &spec.integrator, t_end, &requested) {
            Ok(prop) => props.push(prop),
            Err(e) => {
                summary.failure = Some(Failure {
                    t: e.t,
                    message: e.to_string(),
                });
                summary.wall_time_s = started.elapsed().as_secs_f64();
                return Ok(summary);
            }
        }
    }
    let mut trackers: Vec<Tracker> = Vec::new();
    'run: loop {
        let mut states = Vec::with_capacity(props.len());
        let mut requested_here: Vec<f64> = Vec::new();
        let mut step = 0;
        for prop in props.iter_mut() {
            match prop.next_observation() {
                None => break 'run,
                Some(Err(e)) => {
                    summary.failure = Some(Failure {
                        t: e.t,
                        message: e.to_string(),
                    });
                    break 'run;
                }
                Some(Ok(obs)) => {
                    requested_here = obs.requested.to_vec();
                    step = obs.step;
                    states.push(obs.state.clone());
                }
            }
        }
        summary.steps = step;
        summary.t_final = states[0].t;
        if requested_here.iter().any(|t| observe.contains(t)) {
            for (i, (state, p)) in states.iter().zip(&params).enumerate() {
                let init = trackers.get(i).map(|t| &t.initial).unwrap_or(&initial);
                let rec = DiagnosticRecord::compute(state, init, p, &grid, &opts)
                    .map_err(|e| ConfigError::invalid("run", e.to_string()))?;
                if trackers.len() <= i {
                    trackers.push(Tracker::new(LABELS[i], p, &rec, &initial));
                }
                trackers[i].update(&rec);
                sink.record(i, &rec).map_err(io)?;
            }
            if states.len() == 2 {
                let d = DifferenceRecord::between(&states[0], &states[1], &grid);
                if summary.max_difference.is_none_or(|m| d.linf > m.linf) {
                    summary.max_difference = Some(d);
                }
                sink.difference(&d).map_err(io)?;
            }
        }
        for t in requested_here.iter().filter(|t| spec.run.snapshot_times.contains(t)) {
            let refs: Vec<&FieldState> = states.iter().collect();
            sink.snapshot(*t, &grid, &refs).map_err(io)?;
        }
    }
    summary.completed = summary.failure.is_none();
    summary.solutions = trackers.into_iter().map(|t| t.summary).collect();
    summary.wall_time_s = started.elapsed().as_secs_f64();
    Ok(summary)
}

/// Runs `spec` into `output_dir`: manifest, diagnostics, snapshots, and summary.
pub fn run_experiment(spec: &ExperimentSpec, output_dir: &Path) -> Result<RunSummary, RunError> {
    spec.validate()?;
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| RunError::Io { path, source }
    };
    fs::create_dir_all(output_dir).map_err(io(output_dir))?;
    let manifest = Manifest {
        version: VERSION.to_string(),
        spec: spec.clone(),
    };
    let manifest_path = output_dir.join(MANIFEST_FILE);
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(io(&manifest_path))?;
    let solutions = spec.model.params()?.len();
    let mut sink = FileSink::create(output_dir, solutions).map_err(io(output_dir))?;
    let result = execute(spec, &mut sink);
    sink.flush().map_err(io(output_dir))?;
    let summary = result?;
    let summary_path = output_dir.join(SUMMARY_FILE);
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(io(&summary_path))?;
    Ok(summary)
}
