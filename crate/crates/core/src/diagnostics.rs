//! Conserved quantities, weighted norms, soliton fitting and peak tracking.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FieldState, GridError, PeriodicGrid, Transformer};
use crate::integrators::{evolve, EvolveError, IntegratorConfig, Scheme};
use crate::model::{ground_state_peak, rescaled_soliton_value, ModelError, ModelParams};

/// Peaks below this magnitude are not fitted.
pub const FIT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("no extremum above {threshold:e} to fit")]
    NoPeak { threshold: f64 },
    #[error("degenerate dt list: {0}")]
    DegenerateDtList(String),
    #[error("fields are on different grids")]
    GridMismatch,
    #[error("weight power must be positive, got {0}")]
    BadWeight(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
}

/// A detected extremum: position and signed height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak(pub f64, pub f64);

impl Peak {
    pub fn x(&self) -> f64 {
        self.0
    }

    pub fn height(&self) -> f64 {
        self.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolitonFit {
    pub c: f64,
    #[serde(rename = "x")]
    pub peak_x: f64,
    pub sign: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedNorms {
    pub m: f64,
    pub winf_u: f64,
    pub wl2_d1: f64,
    pub wl2_d2: f64,
    pub wl2_d3: f64,
    pub wl2_d4: f64,
    pub winf_drift: f64,
}

impl WeightedNorms {
    /// `‖⟨x⟩^m ∂^j u‖_{L²}` for `j = 1..=4`.
    pub fn wl2(&self) -> [f64; 4] {
        [self.wl2_d1, self.wl2_d2, self.wl2_d3, self.wl2_d4]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub t: f64,
    pub mass: f64,
    pub integral: f64,
    pub energy: f64,
    #[serde(rename = "sup")]
    pub sup_norm: f64,
    #[serde(rename = "min")]
    pub min_val: f64,
    #[serde(rename = "max")]
    pub max_val: f64,
    pub peaks: Vec<Peak>,
    pub fit: Option<SolitonFit>,
    pub weighted: Option<WeightedNorms>,
}

/// Which optional diagnostics to compute for a record.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RecordOptions {
    pub fit: bool,
    pub peaks: bool,
    pub weighted_m: Option<f64>,
    /// Fit window half-width; `10/√c` when unset.
    pub fit_window: Option<f64>,
    /// Absolute peak threshold; `0.05·sup` when unset.
    pub peak_threshold: Option<f64>,
    /// Minimum peak separation; `5Δx` when unset.
    pub min_separation: Option<f64>,
}

impl DiagnosticRecord {
    pub fn compute(
        state: &FieldState,
        initial: &FieldState,
        params: &ModelParams,
        grid: &PeriodicGrid,
        opts: &RecordOptions,
    ) -> Result<Self, DiagnosticsError> {
        let (min_val, max_val) = state
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let sup_norm = min_val.abs().max(max_val.abs());
        let peaks = if opts.peaks {
            let threshold = opts.peak_threshold.unwrap_or(0.05 * sup_norm);
            if threshold > 0.0 {
                detect_peaks(state, grid, threshold, opts.min_separation.unwrap_or(5.0 * grid.dx()))
            } else {
                Vec::new()
            }
        } else {
            Vec::new()
        };
        let fit = if opts.fit {
            match fit_soliton(state, grid, params.alpha, opts.fit_window) {
                Ok(f) => Some(f),
                Err(DiagnosticsError::NoPeak { .. }) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let weighted = match opts.weighted_m {
            Some(m) => Some(weighted_norms(state, initial, m, grid)?),
            None => None,
        };
        Ok(Self {
            t: state.t,
            mass: mass(state, grid),
            integral: integral(state, grid),
            energy: energy(state, params, grid)?,
            sup_norm,
            min_val,
            max_val,
            peaks,
            fit,
            weighted,
        })
    }
}

/// `∫u² dx` by the uniform rule.
pub fn mass(state: &FieldState, grid: &PeriodicGrid) -> f64 {
    grid.dx() * state.values.iter().map(|v| v * v).sum::<f64>()
}

/// `∫u dx` by the uniform rule.
pub fn integral(state: &FieldState, grid: &PeriodicGrid) -> f64 {
    grid.dx() * state.values.iter().sum::<f64>()
}

/// `½∫u_x² - sign/((α+1)(α+2))·∫G(u)` with `G = u^{α+2}` or `|u|^{α+2}`.
pub fn energy(state: &FieldState, params: &ModelParams, grid: &PeriodicGrid) -> Result<f64, DiagnosticsError> {
    let nl = params.nonlinearity()?;
    let ux = grid.spectral_derivative(state, 1)?;
    let dx = grid.dx();
    let kinetic = 0.5 * dx * ux.values.iter().map(|v| v * v).sum::<f64>();
    let a = params.alpha;
    let potential = dx * state.values.iter().map(|&u| nl.energy_density(u)).sum::<f64>() / ((a + 1.0) * (a + 2.0));
    Ok(kinetic - params.sign * potential)
}

/// Signed displacement `x - x0` wrapped into `[-L, L)`.
fn periodic_offset(x: f64, x0: f64, half_length: f64) -> f64 {
    let period = 2.0 * half_length;
    let d = (x - x0 + half_length).rem_euclid(period) - half_length;
    if d >= half_length {
        d - period
    } else {
        d
    }
}

fn wrap_position(x: f64, half_length: f64) -> f64 {
    (x + half_length).rem_euclid(2.0 * half_length) - half_length
}

/// Trigonometric interpolant of a real field and its first two derivatives.
struct Interpolant {
    coeffs: Vec<Complex64>,
    wavenumbers: Vec<f64>,
    half_length: f64,
    scale: f64,
}

impl Interpolant {
    fn new(state: &FieldState, grid: &PeriodicGrid) -> Self {
        let mut tr = Transformer::new(grid);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); grid.half_len()];
        tr.forward(&state.values, &mut coeffs);
        Self {
            coeffs,
            wavenumbers: grid.half_wavenumbers(),
            half_length: grid.half_length(),
            scale: 1.0 / grid.len() as f64,
        }
    }

    /// `(u, u', u'')` at `x`; the Nyquist mode enters as a cosine.
    fn eval(&self, x: f64) -> (f64, f64, f64) {
        let s = x + self.half_length;
        let last = self.coeffs.len() - 1;
        let mut u = self.coeffs[0].re;
        let (mut du, mut d2u) = (0.0, 0.0);
        for k in 1..last {
            let kk = self.wavenumbers[k];
            let term = self.coeffs[k] * Complex64::from_polar(1.0, kk * s);
            u += 2.0 * term.re;
            du += -2.0 * kk * term.im;
            d2u += -2.0 * kk * kk * term.re;
        }
        let kn = self.wavenumbers[last];
        let cn = self.coeffs[last].re;
        u += cn * (kn * s).cos();
        du += -cn * kn * (kn * s).sin();
        d2u += -cn * kn * kn * (kn * s).cos();
        (u * self.scale, du * self.scale, d2u * self.scale)
    }
}

/// Location and value of the extremum of the interpolant near node `j`.
fn refine_extremum(interp: &Interpolant, state: &FieldState, grid: &PeriodicGrid, j: usize) -> (f64, f64) {
    let node_x = grid.nodes()[j];
    let node_u = state.values[j];
    let dx = grid.dx();
    let mut x = node_x + parabolic_offset(state, j) * dx;
    for _ in 0..8 {
        let (_, d1, d2) = interp.eval(x);
        if d2 == 0.0 {
            break;
        }
        let step = d1 / d2;
        x -= step;
        if (x - node_x).abs() > dx || step.abs() < 1e-14 * dx {
            break;
        }
    }
    if (x - node_x).abs() > dx {
        return (node_x, node_u);
    }
    let (u, _, _) = interp.eval(x);
    if u.abs() >= node_u.abs() && u.signum() == node_u.signum() {
        (wrap_position(x, grid.half_length()), u)
    } else {
        (node_x, node_u)
    }
}

/// Vertex offset (in units of Δx) of the parabola through nodes `j-1, j, j+1`.
fn parabolic_offset(state: &FieldState, j: usize) -> f64 {
    let n = state.len();
    let a = state.values[(j + n - 1) % n].abs();
    let b = state.values[j].abs();
    let c = state.values[(j + 1) % n].abs();
    let denom = a - 2.0 * b + c;
    if denom == 0.0 {
        0.0
    } else {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    }
}

/// Fits `±Q_c(x - x_p)` to the largest `|u|` extremum, `c = (h/Q(0))^α`.
///
/// The extremum is refined on the trigonometric interpolant so that `h` and `x_p`
/// are not limited by the node spacing.
pub fn fit_soliton(
    state: &FieldState,
    grid: &PeriodicGrid,
    alpha: f64,
    window_halfwidth: Option<f64>,
) -> Result<SolitonFit, DiagnosticsError> {
    grid.check_len(state.len())?;
    let (j, umax) =
        state.values.iter().enumerate().fold(
            (0, 0.0_f64),
            |(bj, bv), (j, &v)| if v.abs() > bv.abs() { (j, v) } else { (bj, bv) },
        );
    if umax.abs() <= FIT_THRESHOLD {
        return Err(DiagnosticsError::NoPeak {
            threshold: FIT_THRESHOLD,
        });
    }
    let interp = Interpolant::new(state, grid);
    let (peak_x, peak_u) = refine_extremum(&interp, state, grid, j);
    let h = peak_u.abs();
    let sign = peak_u.signum();
    let c = (h / ground_state_peak(alpha)).powf(alpha);
    let window = window_halfwidth.unwrap_or(10.0 / c.sqrt());
    let residual = grid
        .nodes()
        .iter()
        .zip(&state.values)
        .filter_map(|(&x, &u)| {
            let d = periodic_offset(x, peak_x, grid.half_length());
            (d.abs() <= window).then(|| (u - sign * rescaled_soliton_value(d, alpha, c, 0.0)).abs())
        })
        .fold(0.0_f64, f64::max)
        / h;
    Ok(SolitonFit {
        c,
        peak_x,
        sign,
        residual,
    })
}

/// Strict local maxima of `|u|` above `threshold`, thinned greedily (taller
/// kept) to be at least `min_separation` apart, sorted by position descending.
pub fn detect_peaks(state: &FieldState, grid: &PeriodicGrid, threshold: f64, min_separation: f64) -> Vec<Peak> {
    let n = state.len();
    let v = &state.values;
    let dx = grid.dx();
    let mut candidates: Vec<Peak> = (0..n)
        .filter(|&j| {
            let a = v[j].abs();
            a > threshold && a > v[(j + n - 1) % n].abs() && a > v[(j + 1) % n].abs()
        })
        .map(|j| {
            let off = parabolic_offset(state, j);
            let a = v[(j + n - 1) % n];
            let b = v[j];
            let c = v[(j + 1) % n];
            // value of the parabola through (-1, a), (0, b), (1, c) at its vertex
            let h = b + 0.25 * (c - a) * off;
            Peak(wrap_position(grid.nodes()[j] + off * dx, grid.half_length()), h)
        })
        .collect();
    candidates.sort_by(|p, q| q.1.abs().total_cmp(&p.1.abs()));
    let mut kept: Vec<Peak> = Vec::new();
    for p in candidates {
        if kept
            .iter()
            .all(|k| periodic_offset(p.0, k.0, grid.half_length()).abs() >= min_separation)
        {
            kept.push(p);
        }
    }
    kept.sort_by(|p, q| q.0.total_cmp(&p.0));
    kept
}

/// Polynomially weighted observables with `⟨x⟩ = (1+x²)^{1/2}`.
pub fn weighted_norms(
    state: &FieldState,
    initial: &FieldState,
    m: f64,
    grid: &PeriodicGrid,
) -> Result<WeightedNorms, DiagnosticsError> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(DiagnosticsError::BadWeight(m));
    }
    grid.check_len(state.len())?;
    if initial.len() != state.len() {
        return Err(DiagnosticsError::GridMismatch);
    }
    let weight: Vec<f64> = grid.nodes().iter().map(|&x| (1.0 + x * x).powf(m / 2.0)).collect();
    let sup_weighted = |values: &dyn Fn(usize) -> f64| {
        (0..state.len())
            .map(|j| (weight[j] * values(j)).abs())
            .fold(0.0_f64, f64::max)
    };
    let winf_u = sup_weighted(&|j| state.values[j]);
    let winf_drift = sup_weighted(&|j| state.values[j] - initial.values[j]);
    let mut wl2 = [0.0; 4];
    for (order, slot) in (1..=4u32).zip(wl2.iter_mut()) {
        let d = grid.spectral_derivative(state, order)?;
        *slot = (grid.dx() * d.values.iter().zip(&weight).map(|(v, w)| (v * w).powi(2)).sum::<f64>()).sqrt();
    }
    Ok(WeightedNorms {
        m,
        winf_u,
        wl2_d1: wl2[0],
        wl2_d2: wl2[1],
        wl2_d3: wl2[2],
        wl2_d4: wl2[3],
        winf_drift,
    })
}

/// Initial value problem for a self-convergence study.
#[derive(Debug, Clone)]
pub struct ConvergenceProblem {
    pub grid: PeriodicGrid,
    pub params: ModelParams,
    pub initial: FieldState,
    pub t_end: f64,
    pub base: IntegratorConfig,
}

impl ConvergenceProblem {
    /// Focusing soliton `Q` for power `alpha` on `L = 32π`, `N = 4096`, to `t = 1`.
    pub fn soliton(alpha: f64, params: ModelParams) -> Result<Self, DiagnosticsError> {
        let grid = PeriodicGrid::new(32.0 * std::f64::consts::PI, 4096)?;
        let initial = crate::model::ground_state(&grid, alpha);
        Ok(Self {
            grid,
            params,
            initial,
            t_end: 1.0,
            base: IntegratorConfig::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub scheme: Scheme,
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub reference_dt: f64,
    /// Least-squares slope of `log(error)` against `log(dt)`; `None` when exact.
    pub slope: Option<f64>,
    /// All errors at roundoff level; the slope is meaningless then.
    pub exact: bool,
}

/// Refinement factor between the finest listed step and the reference run.
pub const REFERENCE_REFINEMENT: f64 = 8.0;

/// Measures the order of `scheme` by self-convergence. Errors are sup-norm
/// differences at `t_end` from a run with step `min(dt)/8`.
pub fn convergence_order(
    problem: &ConvergenceProblem,
    scheme: Scheme,
    dt_list: &[f64],
) -> Result<ConvergenceStudy, DiagnosticsError> {
    check_dt_list(dt_list)?;
    let run = |dt: f64| -> Result<FieldState, DiagnosticsError> {
        let cfg = IntegratorConfig {
            scheme,
            dt,
            ..problem.base
        };
        let span = problem.t_end - problem.initial.t;
        Ok(evolve(
            &problem.initial,
            &problem.params,
            &problem.grid,
            &cfg,
            problem.t_end,
            span.max(dt),
            |_| {},
        )?)
    };
    let dt_min = dt_list.iter().copied().fold(f64::INFINITY, f64::min);
    let reference_dt = dt_min / REFERENCE_REFINEMENT;
    let reference = run(reference_dt)?;
    let mut errors = Vec::with_capacity(dt_list.len());
    for &dt in dt_list {
        let u = run(dt)?;
        errors.push(
            u.values
                .iter()
                .zip(&reference.values)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())),
        );
    }
    let scale = reference.sup_norm().max(1.0);
    let exact = errors.iter().all(|&e| e <= 1e-12 * scale);
    let slope = if exact {
        None
    } else {
        Some(log_log_slope(dt_list, &errors))
    };
    Ok(ConvergenceStudy {
        scheme,
        dts: dt_list.to_vec(),
        errors,
        reference_dt,
        slope,
        exact,
    })
}

fn check_dt_list(dts: &[f64]) -> Result<(), DiagnosticsError> {
    let bad = |m: &str| Err(DiagnosticsError::DegenerateDtList(m.to_string()));
    if dts.len() < 3 {
        return bad("need at least three step sizes");
    }
    if dts.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return bad("step sizes must be positive");
    }
    let ratio = dts[1] / dts[0];
    if (ratio - 1.0).abs() < 1e-9 {
        return bad("step sizes must differ");
    }
    if dts.windows(2).any(|w| ((w[1] / w[0]) / ratio - 1.0).abs() > 1e-9) {
        return bad("step sizes must form a geometric sequence");
    }
    Ok(())
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
