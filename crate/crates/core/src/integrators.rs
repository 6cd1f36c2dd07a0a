//! Time integration of the Fourier semi-discretization
//! `û_t = L û + N(û)`, with `L = -(iκ)³` diagonal and
//! `N(û) = -sign·(iκ)·FFT(F(u))`.
//!
//! Two schemes are provided: the implicit midpoint rule solved by fixed-point
//! iteration (linear part treated implicitly inside the iteration), and
//! Cox–Matthews ETDRK4 with weights evaluated by contour averaging.
//! State is carried on the half spectrum of the real transform.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FieldState, GridError, PeriodicGrid, Transformer};
use crate::model::{ModelError, ModelParams, Nonlinearity};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("fixed-point iteration did not converge in {iterations} iterations (last update {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("solution became non-finite")]
    NonFinite,
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("ETDRK4 coefficients were built for a different grid or step")]
    CoefficientMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("integration failed at t = {t}: {source}")]
pub struct EvolveError {
    pub t: f64,
    #[source]
    pub source: StepError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Midpoint,
    Etdrk4,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Midpoint => "midpoint",
            Scheme::Etdrk4 => "etdrk4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub fp_tol: f64,
    pub fp_max_iters: usize,
    pub contour_points: usize,
    pub contour_radius: f64,
    pub dealias: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Etdrk4,
            dt: 5e-3,
            fp_tol: 1e-12,
            fp_max_iters: 100,
            contour_points: 32,
            contour_radius: 1.0,
            dealias: false,
        }
    }
}

impl IntegratorConfig {
    pub fn midpoint(dt: f64) -> Self {
        Self {
            scheme: Scheme::Midpoint,
            dt,
            ..Self::default()
        }
    }

    pub fn etdrk4(dt: f64) -> Self {
        Self {
            scheme: Scheme::Etdrk4,
            dt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), StepError> {
        let bad = |msg: String| Err(StepError::InvalidConfig(msg));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.fp_tol.is_finite() && self.fp_tol > 0.0) {
            return bad(format!("fp_tol must be positive, got {}", self.fp_tol));
        }
        if self.fp_max_iters < 1 {
            return bad("fp_max_iters must be at least 1".into());
        }
        if self.contour_points < 8 {
            return bad(format!(
                "contour_points must be at least 8, got {}",
                self.contour_points
            ));
        }
        if !(self.contour_radius.is_finite() && self.contour_radius > 0.0) {
            return bad(format!("contour_radius must be positive, got {}", self.contour_radius));
        }
        Ok(())
    }
}

/// ETDRK4 weights for one diagonal entry of `L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtdWeights {
    pub e: Complex64,
    pub e2: Complex64,
    pub qh: Complex64,
    pub f1: Complex64,
    pub f2: Complex64,
    pub f3: Complex64,
}

/// Weights for `L`-entry `lambda` and step `h`, the φ-type ones averaged over
/// `points` nodes of the circle `|w - λh| = radius`.
pub fn etdrk4_weights(lambda: Complex64, h: f64, points: usize, radius: f64) -> EtdWeights {
    let z = lambda * h;
    let m = points as f64;
    let node = |j: usize, offset: f64| z + Complex64::from_polar(radius, 2.0 * PI * (j as f64 + offset) / m);
    // when the circle comes close to the removable singularity at w = 0, turn it
    // so that the direction of the origin falls midway between two nodes
    let offset = if z != ZERO && z.norm() < 2.0 * radius {
        ((-z).arg() * m / (2.0 * PI) - 0.5).rem_euclid(1.0)
    } else {
        0.5
    };

    let (mut qh, mut f1, mut f2, mut f3) = (ZERO, ZERO, ZERO, ZERO);
    for j in 0..points {
        let w = node(j, offset);
        let ew = w.exp();
        let w3 = w * w * w;
        qh += ((w / 2.0).exp() - 1.0) / w;
        f1 += (-4.0 - w + ew * (4.0 - 3.0 * w + w * w)) / w3;
        f2 += 2.0 * (2.0 + w + ew * (w - 2.0)) / w3;
        f3 += (-4.0 - 3.0 * w - w * w + ew * (4.0 - w)) / w3;
    }
    let s = h / m;
    EtdWeights {
        e: z.exp(),
        e2: (z / 2.0).exp(),
        qh: qh * s,
        f1: f1 * s,
        f2: f2 * s,
        f3: f3 * s,
    }
}

/// Per-mode ETDRK4 weights over the half spectrum, tied to a grid and step.
#[derive(Debug, Clone, PartialEq)]
pub struct Etdrk4Coefficients {
    pub dt: f64,
    pub e: Vec<Complex64>,
    pub e2: Vec<Complex64>,
    pub qh: Vec<Complex64>,
    pub f1: Vec<Complex64>,
    pub f2: Vec<Complex64>,
    pub f3: Vec<Complex64>,
    half_length: f64,
    n: usize,
}

impl Etdrk4Coefficients {
    pub fn matches(&self, grid: &PeriodicGrid) -> bool {
        self.n == grid.len() && self.half_length == grid.half_length()
    }

    pub fn iter_weights(&self) -> impl Iterator<Item = EtdWeights> + '_ {
        (0..self.e.len()).map(move |j| EtdWeights {
            e: self.e[j],
            e2: self.e2[j],
            qh: self.qh[j],
            f1: self.f1[j],
            f2: self.f2[j],
            f3: self.f3[j],
        })
    }
}

/// Diagonal of `L = -(iκ)³` on the half spectrum (Nyquist entry zero).
pub fn linear_symbol(grid: &PeriodicGrid) -> Vec<Complex64> {
    grid.derivative_symbol(3)
        .expect("order 3 is supported")
        .into_iter()
        .map(|d| -d)
        .collect()
}

pub fn precompute_etdrk4(
    grid: &PeriodicGrid,
    dt: f64,
    config: &IntegratorConfig,
) -> Result<Etdrk4Coefficients, StepError> {
    IntegratorConfig { dt, ..*config }.validate()?;
    let lin = linear_symbol(grid);
    let n = lin.len();
    let mut c = Etdrk4Coefficients {
        dt,
        e: Vec::with_capacity(n),
        e2: Vec::with_capacity(n),
        qh: Vec::with_capacity(n),
        f1: Vec::with_capacity(n),
        f2: Vec::with_capacity(n),
        f3: Vec::with_capacity(n),
        half_length: grid.half_length(),
        n: grid.len(),
    };
    for &l in &lin {
        let w = etdrk4_weights(l, dt, config.contour_points, config.contour_radius);
        c.e.push(w.e);
        c.e2.push(w.e2);
        c.qh.push(w.qh);
        c.f1.push(w.f1);
        c.f2.push(w.f2);
        c.f3.push(w.f3);
    }
    Ok(c)
}

/// Midpoint factors for step `h`: the Cayley transform `(1 + hL/2)/(1 - hL/2)`,
/// normalized to unit modulus because `L` is imaginary, and `h/(1 - hL/2)`.
fn cayley_factors(linear: &[Complex64], h: f64) -> (f64, Vec<Complex64>, Vec<Complex64>) {
    let mut cayley = Vec::with_capacity(linear.len());
    let mut gain = Vec::with_capacity(linear.len());
    for &l in linear {
        let z = l * (h / 2.0);
        let c = (1.0 + z) / (1.0 - z);
        cayley.push(c / c.norm());
        gain.push(h / (1.0 - z));
    }
    (h, cayley, gain)
}

/// Evaluates `N(v) = -sign·(iκ)·FFT(F(IFFT v))` with owned workspace.
struct NonlinearOperator {
    nl: Nonlinearity,
    factor: Vec<Complex64>,
    tr: Transformer,
    phys: Vec<f64>,
    flux: Vec<f64>,
}

impl NonlinearOperator {
    fn new(grid: &PeriodicGrid, params: &ModelParams, dealias: bool) -> Result<Self, StepError> {
        let nl = params.nonlinearity()?;
        let n = grid.len();
        let cutoff = n / 3;
        let factor = grid
            .derivative_symbol(1)?
            .into_iter()
            .enumerate()
            .map(|(j, d)| if dealias && j > cutoff { ZERO } else { -nl.sign() * d })
            .collect();
        Ok(Self {
            nl,
            factor,
            tr: Transformer::new(grid),
            phys: vec![0.0; n],
            flux: vec![0.0; n],
        })
    }

    fn apply(&mut self, v: &[Complex64], out: &mut [Complex64]) {
        if !self.nl.enabled() {
            out.iter_mut().for_each(|o| *o = ZERO);
            return;
        }
        self.tr.inverse(v, &mut self.phys);
        self.nl.flux_into(&self.phys, &mut self.flux);
        self.tr.forward(&self.flux, out);
        for (o, f) in out.iter_mut().zip(&self.factor) {
            *o *= f;
        }
    }
}

/// Unnormalized-coefficient l² norm of a half spectrum as if it were the full one.
fn full_l2(v: &[Complex64]) -> f64 {
    let last = v.len() - 1;
    let interior: f64 = v[1..last].iter().map(|c| c.norm_sqr()).sum();
    (v[0].norm_sqr() + 2.0 * interior + v[last].norm_sqr()).sqrt()
}

fn all_finite(v: &[Complex64]) -> bool {
    v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

/// Single-scheme stepper owning its workspace and cached coefficients.
pub struct Integrator<'g> {
    grid: &'g PeriodicGrid,
    config: IntegratorConfig,
    op: NonlinearOperator,
    linear: Vec<Complex64>,
    tr: Transformer,
    coeffs: Option<Etdrk4Coefficients>,
    short: Option<Etdrk4Coefficients>,
    cayley: Option<(f64, Vec<Complex64>, Vec<Complex64>)>,
    bufs: [Vec<Complex64>; 7],
    last_iterations: usize,
}

impl<'g> Integrator<'g> {
    pub fn new(grid: &'g PeriodicGrid, params: &ModelParams, config: &IntegratorConfig) -> Result<Self, StepError> {
        config.validate()?;
        let op = NonlinearOperator::new(grid, params, config.dealias)?;
        let half = grid.half_len();
        let coeffs = match config.scheme {
            Scheme::Etdrk4 => Some(precompute_etdrk4(grid, config.dt, config)?),
            Scheme::Midpoint => None,
        };
        Ok(Self {
            grid,
            config: *config,
            op,
            linear: linear_symbol(grid),
            tr: Transformer::new(grid),
            coeffs,
            short: None,
            cayley: None,
            bufs: std::array::from_fn(|_| vec![ZERO; half]),
            last_iterations: 0,
        })
    }

    /// As [`Integrator::new`] but reusing already built coefficients.
    pub fn with_coefficients(
        grid: &'g PeriodicGrid,
        params: &ModelParams,
        config: &IntegratorConfig,
        coeffs: Etdrk4Coefficients,
    ) -> Result<Self, StepError> {
        if !coeffs.matches(grid) {
            return Err(StepError::CoefficientMismatch);
        }
        let config = IntegratorConfig {
            scheme: Scheme::Etdrk4,
            dt: coeffs.dt,
            ..*config
        };
        config.validate()?;
        let half = grid.half_len();
        Ok(Self {
            grid,
            config,
            op: NonlinearOperator::new(grid, params, config.dealias)?,
            linear: linear_symbol(grid),
            tr: Transformer::new(grid),
            coeffs: Some(coeffs),
            short: None,
            cayley: None,
            bufs: std::array::from_fn(|_| vec![ZERO; half]),
            last_iterations: 0,
        })
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.config
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.grid
    }

    /// Fixed-point iterations used by the most recent midpoint step.
    pub fn last_iterations(&self) -> usize {
        self.last_iterations
    }

    pub fn forward(&mut self, state: &FieldState) -> Result<Vec<Complex64>, StepError> {
        self.grid.check_len(state.len())?;
        state.ensure_finite()?;
        let mut v = vec![ZERO; self.grid.half_len()];
        self.tr.forward(&state.values, &mut v);
        Ok(v)
    }

    pub fn inverse(&mut self, v: &[Complex64], t: f64) -> FieldState {
        let mut out = vec![0.0; self.grid.len()];
        self.tr.inverse(v, &mut out);
        FieldState::new(out, t)
    }

    /// One step of size `dt` on physical samples.
    pub fn step(&mut self, state: &FieldState) -> Result<FieldState, StepError> {
        let mut v = self.forward(state)?;
        let h = self.config.dt;
        self.step_spectral(&mut v, h)?;
        Ok(self.inverse(&v, state.t + h))
    }

    /// Advances the half spectrum `v` by `h` in place.
    pub fn step_spectral(&mut self, v: &mut [Complex64], h: f64) -> Result<(), StepError> {
        match self.config.scheme {
            Scheme::Midpoint => self.midpoint(v, h),
            Scheme::Etdrk4 => self.etdrk4(v, h),
        }
    }

    fn midpoint(&mut self, v: &mut [Complex64], h: f64) -> Result<(), StepError> {
        if self.cayley.as_ref().map(|c| c.0) != Some(h) {
            self.cayley = Some(cayley_factors(&self.linear, h));
        }
        let (_, cayley, gain) = self.cayley.as_ref().expect("just built");
        let [w, next, mid, nl, rhs0, _, _] = &mut self.bufs;
        // w = C v + h (1 - hL/2)^{-1} N((w + v)/2), C = (1 + hL/2)/(1 - hL/2)
        for j in 0..v.len() {
            rhs0[j] = cayley[j] * v[j];
            w[j] = v[j];
        }
        let tol = self.config.fp_tol * (1.0 + full_l2(v));
        let mut residual = f64::INFINITY;
        for iter in 1..=self.config.fp_max_iters {
            for j in 0..v.len() {
                mid[j] = (w[j] + v[j]) * 0.5;
            }
            self.op.apply(mid, nl);
            let mut diff = 0.0;
            for j in 0..v.len() {
                next[j] = rhs0[j] + gain[j] * nl[j];
                let d = (next[j] - w[j]).norm_sqr();
                diff += if j == 0 || j == v.len() - 1 { d } else { 2.0 * d };
            }
            std::mem::swap(w, next);
            residual = diff.sqrt();
            if !residual.is_finite() {
                return Err(StepError::NonFinite);
            }
            if residual <= tol {
                self.last_iterations = iter;
                v.copy_from_slice(w);
                return Ok(());
            }
        }
        self.last_iterations = self.config.fp_max_iters;
        Err(StepError::NonConvergence {
            iterations: self.config.fp_max_iters,
            residual,
        })
    }

    fn etdrk4(&mut self, v: &mut [Complex64], h: f64) -> Result<(), StepError> {
        let main_dt = self.coeffs.as_ref().map(|c| c.dt);
        let coeffs = if main_dt == Some(h) {
            self.coeffs.as_ref().expect("checked above")
        } else {
            if self.short.as_ref().map(|c| c.dt) != Some(h) {
                self.short = Some(precompute_etdrk4(self.grid, h, &self.config)?);
            }
            self.short.as_ref().expect("just built")
        };
        let [nv, na, nb, nc, a, b, c] = &mut self.bufs;
        let n = v.len();

        self.op.apply(v, nv);
        for j in 0..n {
            a[j] = coeffs.e2[j] * v[j] + coeffs.qh[j] * nv[j];
        }
        self.op.apply(a, na);
        for j in 0..n {
            b[j] = coeffs.e2[j] * v[j] + coeffs.qh[j] * na[j];
        }
        self.op.apply(b, nb);
        for j in 0..n {
            c[j] = coeffs.e2[j] * a[j] + coeffs.qh[j] * (2.0 * nb[j] - nv[j]);
        }
        self.op.apply(c, nc);
        for j in 0..n {
            v[j] = coeffs.e[j] * v[j] + coeffs.f1[j] * nv[j] + coeffs.f2[j] * (na[j] + nb[j]) + coeffs.f3[j] * nc[j];
        }
        if all_finite(v) {
            Ok(())
        } else {
            Err(StepError::NonFinite)
        }
    }
}

/// One implicit-midpoint step of `config.dt`.
pub fn step_midpoint(
    state: &FieldState,
    params: &ModelParams,
    grid: &PeriodicGrid,
    config: &IntegratorConfig,
) -> Result<FieldState, StepError> {
    let config = IntegratorConfig {
        scheme: Scheme::Midpoint,
        ..*config
    };
    Integrator::new(grid, params, &config)?.step(state)
}

/// One ETDRK4 step of `coeffs.dt`.
pub fn step_etdrk4(
    state: &FieldState,
    coeffs: &Etdrk4Coefficients,
    params: &ModelParams,
    grid: &PeriodicGrid,
    dealias: bool,
) -> Result<FieldState, StepError> {
    let config = IntegratorConfig {
        dealias,
        ..IntegratorConfig::etdrk4(coeffs.dt)
    };
    Integrator::with_coefficients(grid, params, &config, coeffs.clone())?.step(state)
}

/// One scheduled observation of a running [`Propagator`].
#[derive(Debug)]
pub struct Observation<'a> {
    pub state: &'a FieldState,
    /// Requested times that were mapped onto this step.
    pub requested: &'a [f64],
    pub step: u64,
}

/// Fixed-step time loop that lands on `t_end` and stops at requested times
/// (nearest step). The last step is shortened when `t_end - t0` is not a
/// multiple of `dt`.
pub struct Propagator<'g> {
    integrator: Integrator<'g>,
    v: Vec<Complex64>,
    t0: f64,
    dt: f64,
    t_end: f64,
    n_full: u64,
    tail: f64,
    step: u64,
    stops: Vec<(u64, Vec<f64>)>,
    next_stop: usize,
    current: FieldState,
    failed: bool,
}

impl<'g> Propagator<'g> {
    pub fn new(
        state0: &FieldState,
        params: &ModelParams,
        grid: &'g PeriodicGrid,
        config: &IntegratorConfig,
        t_end: f64,
        requested: &[f64],
    ) -> Result<Self, EvolveError> {
        let at_start = |source: StepError| EvolveError { t: state0.t, source };
        let t0 = state0.t;
        if !(t_end.is_finite() && t_end >= t0) {
            return Err(at_start(StepError::InvalidConfig(format!(
                "t_end {t_end} must not precede the initial time {t0}"
            ))));
        }
        let mut integrator = Integrator::new(grid, params, config).map_err(at_start)?;
        let v = integrator.forward(state0).map_err(at_start)?;
        let dt = config.dt;
        let span = t_end - t0;
        let n_full = (span / dt + 1e-9).floor() as u64;
        let mut tail = span - n_full as f64 * dt;
        if tail < 0.0 {
            // the floor tolerance pushed one step past t_end; last step lands on t_end anyway
            tail = 0.0;
        } else if tail <= 1e-9 * dt {
            tail = 0.0;
        }
        if n_full == 0 && tail == 0.0 && span > 0.0 {
            tail = span;
        }
        let mut p = Self {
            integrator,
            v,
            t0,
            dt,
            t_end,
            n_full,
            tail,
            step: 0,
            stops: Vec::new(),
            next_stop: 0,
            current: state0.clone(),
            failed: false,
        };
        let mut times: Vec<f64> = requested.iter().copied().filter(|t| t.is_finite()).collect();
        times.push(t0);
        times.push(t_end);
        times.sort_by(|a, b| a.total_cmp(b));
        times.dedup();
        for t in times {
            let s = p.nearest_step(t);
            match p.stops.last_mut() {
                Some((last, list)) if *last == s => list.push(t),
                _ => p.stops.push((s, vec![t])),
            }
        }
        Ok(p)
    }

    pub fn total_steps(&self) -> u64 {
        self.n_full + u64::from(self.tail > 0.0)
    }

    pub fn time_of(&self, step: u64) -> f64 {
        if step >= self.total_steps() {
            self.t_end
        } else {
            self.t0 + step as f64 * self.dt
        }
    }

    /// Step index whose time is nearest to `t`.
    pub fn nearest_step(&self, t: f64) -> u64 {
        let total = self.total_steps();
        if t <= self.t0 {
            return 0;
        }
        if t >= self.t_end {
            return total;
        }
        let s = ((t - self.t0) / self.dt).round().max(0.0) as u64;
        if s >= self.n_full {
            let last_full = self.t0 + self.n_full as f64 * self.dt;
            if self.tail > 0.0 && t - last_full > self.tail / 2.0 {
                return total;
            }
            return self.n_full.min(total);
        }
        s
    }

    pub fn current(&self) -> &FieldState {
        &self.current
    }

    pub fn integrator(&self) -> &Integrator<'g> {
        &self.integrator
    }

    /// Steps to the next scheduled stop; `None` once the schedule is exhausted.
    pub fn next_observation(&mut self) -> Option<Result<Observation<'_>, EvolveError>> {
        if self.failed || self.next_stop >= self.stops.len() {
            return None;
        }
        let target = self.stops[self.next_stop].0;
        let moved = self.step < target;
        while self.step < target {
            let h = if self.step < self.n_full { self.dt } else { self.tail };
            if let Err(source) = self.integrator.step_spectral(&mut self.v, h) {
                self.failed = true;
                let t = self.time_of(self.step);
                return Some(Err(EvolveError { t, source }));
            }
            self.step += 1;
        }
        if moved {
            let t = self.time_of(self.step);
            self.current = self.integrator.inverse(&self.v, t);
            if let Err(e) = self.current.ensure_finite() {
                self.failed = true;
                return Some(Err(EvolveError { t, source: e.into() }));
            }
        }
        let (step, requested) = &self.stops[self.next_stop];
        self.next_stop += 1;
        Some(Ok(Observation {
            state: &self.current,
            requested,
            step: *step,
        }))
    }

    /// Runs the remaining schedule and returns the final state.
    pub fn finish(mut self) -> Result<FieldState, EvolveError> {
        while let Some(obs) = self.next_observation() {
            obs?;
        }
        Ok(self.current)
    }
}

/// Evolves `state0` to `t_end`, calling `observer` at the start, every
/// `observe_every` (nearest step) and at `t_end`.
pub fn evolve<F>(
    state0: &FieldState,
    params: &ModelParams,
    grid: &PeriodicGrid,
    config: &IntegratorConfig,
    t_end: f64,
    observe_every: f64,
    mut observer: F,
) -> Result<FieldState, EvolveError>
where
    F: FnMut(&FieldState),
{
    let times = observation_times(state0.t, t_end, observe_every, config.dt)
        .map_err(|source| EvolveError { t: state0.t, source })?;
    let mut prop = Propagator::new(state0, params, grid, config, t_end, &times)?;
    while let Some(obs) = prop.next_observation() {
        observer(obs?.state);
    }
    Ok(prop.current)
}

/// `t0, t0 + Δ, t0 + 2Δ, …` strictly before `t_end`, then `t_end`.
pub fn observation_times(t0: f64, t_end: f64, every: f64, dt: f64) -> Result<Vec<f64>, StepError> {
    if !(every.is_finite() && every >= dt * (1.0 - 1e-12)) {
        return Err(StepError::InvalidConfig(format!(
            "observe_every {every} must be at least dt {dt}"
        )));
    }
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t = t0 + k as f64 * every;
        if t >= t_end - 1e-9 * every {
            break;
        }
        out.push(t);
        k += 1;
    }
    out.push(t_end);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::model::{ground_state, ground_state_value};
    use proptest::prelude::*;

    fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
    }

    /// Taylor series of the weights around z = 0, independent of the contour route.
    fn taylor_weights(z: Complex64, h: f64) -> (Complex64, Complex64, Complex64, Complex64) {
        // φ_k(z) = Σ_j z^j/(j+k)!
        let phi = |k: u32, z: Complex64| {
            let mut term = Complex64::new(1.0, 0.0);
            let mut fact = (1..=k).map(f64::from).product::<f64>();
            let mut sum = Complex64::new(1.0 / fact, 0.0);
            for j in 1..60 {
                term *= z;
                fact *= f64::from(j + k);
                sum += term / fact;
            }
            sum
        };
        let qh = phi(1, z / 2.0) * (h / 2.0);
        let f1 = (phi(1, z) - 3.0 * phi(2, z) + 4.0 * phi(3, z)) * h;
        let f2 = (2.0 * phi(2, z) - 4.0 * phi(3, z)) * h;
        let f3 = (-phi(2, z) + 4.0 * phi(3, z)) * h;
        (qh, f1, f2, f3)
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::default().validate().is_ok());
        let bad = [
            IntegratorConfig {
                dt: 0.0,
                ..Default::default()
            },
            IntegratorConfig {
                fp_tol: -1.0,
                ..Default::default()
            },
            IntegratorConfig {
                fp_max_iters: 0,
                ..Default::default()
            },
            IntegratorConfig {
                contour_points: 4,
                ..Default::default()
            },
            IntegratorConfig {
                contour_radius: 0.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(StepError::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn zero_mode_limits() {
        let h = 0.01;
        let w = etdrk4_weights(ZERO, h, 32, 1.0);
        let rel = |a: Complex64, b: f64| (a - b).norm() / b;
        assert!(rel(w.qh, h / 2.0) <= 1e-12);
        assert!(rel(w.f1, h / 6.0) <= 1e-12);
        assert!(rel(w.f2, h / 3.0) <= 1e-12);
        assert!(rel(w.f3, h / 6.0) <= 1e-12);
        assert_eq!(w.e, Complex64::new(1.0, 0.0));
    }

    #[test]
    fn weights_match_taylor_oracle_near_zero() {
        let h = 0.02;
        for y in [1e-6, 1e-3, 0.1, 0.7, 2.0] {
            let lam = Complex64::new(0.0, y / h);
            let w = etdrk4_weights(lam, h, 32, 1.0);
            let (qh, f1, f2, f3) = taylor_weights(Complex64::new(0.0, y), h);
            for (a, b) in [(w.qh, qh), (w.f1, f1), (w.f2, f2), (w.f3, f3)] {
                assert!((a - b).norm() <= 1e-13 * h, "y={y}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn weight_sum_identity() {
        // f1 + 2 f2 + f3 = L^{-1}(e^{LΔt} - 1), κ = 1
        let g = make_grid(PI, 16).unwrap();
        let dt = 0.01;
        let c = precompute_etdrk4(&g, dt, &IntegratorConfig::etdrk4(dt)).unwrap();
        let l = linear_symbol(&g)[1];
        assert!((l - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        let direct = ((l * dt).exp() - 1.0) / l;
        let sum = c.f1[1] + 2.0 * c.f2[1] + c.f3[1];
        assert!((sum - direct).norm() <= 1e-10);
    }

    #[test]
    fn contour_resolution_self_consistency() {
        let g = make_grid(32.0 * PI, 1024).unwrap();
        let base = IntegratorConfig::etdrk4(1e-2);
        let c32 = precompute_etdrk4(&g, 1e-2, &base).unwrap();
        let c64 = precompute_etdrk4(
            &g,
            1e-2,
            &IntegratorConfig {
                contour_points: 64,
                ..base
            },
        )
        .unwrap();
        let mut worst = 0.0_f64;
        for (a, b) in c32.iter_weights().zip(c64.iter_weights()) {
            for (p, q) in [(a.qh, b.qh), (a.f1, b.f1), (a.f2, b.f2), (a.f3, b.f3)] {
                worst = worst.max((p - q).norm());
            }
        }
        assert!(worst <= 1e-10, "{worst:e}");
        assert!(c32.iter_weights().all(|w| [w.e, w.e2, w.qh, w.f1, w.f2, w.f3]
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite())));
    }

    #[test]
    fn contour_avoids_origin() {
        // M = 10 puts a node exactly on w = 0 for z = i with the default offset;
        // the rule is coarse at M = 10, the check is that the pole is avoided
        let w = etdrk4_weights(Complex64::new(0.0, 1.0), 1.0, 10, 1.0);
        let (qh, f1, f2, f3) = taylor_weights(Complex64::new(0.0, 1.0), 1.0);
        for (a, b) in [(w.qh, qh), (w.f1, f1), (w.f2, f2), (w.f3, f3)] {
            assert!((a - b).norm() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn contour_through_origin_at_default_resolution() {
        // |z| equal or close to the radius, on and off the imaginary axis
        let cases = [
            Complex64::new(0.0, 1.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(0.0, 0.98),
            Complex64::new(0.0, 1.5),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.6, 0.8),
        ];
        for z in cases {
            let w = etdrk4_weights(z, 1.0, 32, 1.0);
            let (qh, f1, f2, f3) = taylor_weights(z, 1.0);
            for (a, b) in [(w.qh, qh), (w.f1, f1), (w.f2, f2), (w.f3, f3)] {
                assert!((a - b).norm() <= 1e-12, "z = {z}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let g = make_grid(8.0, 64).unwrap();
        let p = ModelParams::signed(1, 1);
        let cfg = IntegratorConfig::midpoint(1e-2);
        let mut integ = Integrator::new(&g, &p, &cfg).unwrap();
        let out = integ.step(&g.zeros(0.0)).unwrap();
        assert_eq!(integ.last_iterations(), 1);
        assert!(out.values.iter().all(|&v| v == 0.0));
        assert!((out.t - 1e-2).abs() < 1e-15);
        let c = precompute_etdrk4(&g, 1e-2, &IntegratorConfig::etdrk4(1e-2)).unwrap();
        let out = step_etdrk4(&g.zeros(0.0), &c, &p, &g, false).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn midpoint_preserves_linear_amplitudes() {
        let g = make_grid(PI, 32).unwrap();
        let p = ModelParams::signed(1, 1).linear();
        let u = g.sample(0.0, |x| (3.0 * x).cos());
        let cfg = IntegratorConfig::midpoint(0.05);
        let mut integ = Integrator::new(&g, &p, &cfg).unwrap();
        let mut v = integ.forward(&u).unwrap();
        let before = v[3].norm();
        for _ in 0..100 {
            integ.step_spectral(&mut v, 0.05).unwrap();
        }
        assert!((v[3].norm() - before).abs() <= 1e-13 * before);
    }

    #[test]
    fn etdrk4_is_exact_on_airy_flow() {
        let g = make_grid(PI, 32).unwrap();
        let p = ModelParams::signed(1, 1).linear();
        let (k, phase) = (3.0, 0.4);
        let u = g.sample(0.0, |x| (k * x + phase).cos());
        let dt = 0.01;
        let c = precompute_etdrk4(&g, dt, &IntegratorConfig::etdrk4(dt)).unwrap();
        let one = step_etdrk4(&u, &c, &p, &g, false).unwrap();
        let exact = g.sample(0.0, |x| (k * x + phase + k * k * k * dt).cos());
        assert!(sup_diff(&one.values, &exact.values) <= 1e-12);
    }

    #[test]
    fn single_steps_track_the_soliton() {
        let g = make_grid(32.0 * PI, 4096).unwrap();
        let p = ModelParams::signed(1, 1);
        let q = ground_state(&g, 1.0);
        let dt = 1e-3;
        let next = step_midpoint(&q, &p, &g, &IntegratorConfig::midpoint(dt)).unwrap();
        let exact = g.sample(dt, |x| ground_state_value(x - dt, 1.0));
        assert!(sup_diff(&next.values, &exact.values) <= 1e-7);
    }

    #[test]
    fn etdrk4_soliton_to_unit_time() {
        let g = make_grid(32.0 * PI, 4096).unwrap();
        let p = ModelParams::signed(1, 1);
        let q = ground_state(&g, 1.0);
        let out = evolve(&q, &p, &g, &IntegratorConfig::etdrk4(1e-2), 1.0, 1.0, |_| {}).unwrap();
        assert_eq!(out.t, 1.0);
        let exact = g.sample(1.0, |x| ground_state_value(x - 1.0, 1.0));
        let err = sup_diff(&out.values, &exact.values);
        assert!(err <= 1e-6, "{err:e}");
    }

    #[test]
    fn evolve_schedule_and_landing() {
        let g = make_grid(16.0, 64).unwrap();
        let p = ModelParams::modular(0.5);
        let u0 = g.sample(0.0, |x| (-(x * x)).exp());
        let mut seen = Vec::new();
        let same = evolve(&u0, &p, &g, &IntegratorConfig::etdrk4(1e-2), 0.0, 0.1, |s| {
            seen.push(s.t)
        })
        .unwrap();
        assert_eq!(same, u0);
        assert_eq!(seen, vec![0.0]);

        // 0.255 = 25 steps of 0.01 plus a shortened 0.005 step
        let mut seen = Vec::new();
        let out = evolve(&u0, &p, &g, &IntegratorConfig::etdrk4(1e-2), 0.255, 0.1, |s| {
            seen.push(s.t)
        })
        .unwrap();
        assert_eq!(out.t, 0.255);
        assert_eq!(seen.len(), 4);
        assert!((seen[1] - 0.1).abs() < 1e-12 && (seen[2] - 0.2).abs() < 1e-12);
        assert_eq!(*seen.last().unwrap(), 0.255);

        let prop = Propagator::new(&u0, &p, &g, &IntegratorConfig::etdrk4(1e-2), 0.255, &[]).unwrap();
        assert_eq!(prop.total_steps(), 26);
        assert_eq!(prop.nearest_step(0.2549), 26);
        assert_eq!(prop.nearest_step(0.2515), 25);

        let err = evolve(&u0, &p, &g, &IntegratorConfig::etdrk4(1e-2), 1.0, 1e-3, |_| {}).unwrap_err();
        assert!(matches!(err.source, StepError::InvalidConfig(_)));
        let err = evolve(&u0, &p, &g, &IntegratorConfig::etdrk4(1e-2), -1.0, 0.1, |_| {}).unwrap_err();
        assert!(matches!(err.source, StepError::InvalidConfig(_)));
    }

    #[test]
    fn short_landing_step_matches_direct_step() {
        let g = make_grid(16.0, 128).unwrap();
        let p = ModelParams::signed(1, 1);
        let u0 = g.sample(0.0, |x| 2.0 * (-(x * x) / 4.0).exp());
        let cfg = IntegratorConfig::etdrk4(0.01);
        let landed = evolve(&u0, &p, &g, &cfg, 0.013, 0.01, |_| {}).unwrap();
        let one = step_etdrk4(&u0, &precompute_etdrk4(&g, 0.01, &cfg).unwrap(), &p, &g, false).unwrap();
        let two = step_etdrk4(&one, &precompute_etdrk4(&g, 0.003, &cfg).unwrap(), &p, &g, false).unwrap();
        assert!(sup_diff(&landed.values, &two.values) <= 1e-14);
    }

    #[test]
    fn divergence_is_reported_with_time() {
        let g = make_grid(16.0, 256).unwrap();
        let p = ModelParams::signed(1, 1);
        let u0 = g.sample(0.0, |x| 400.0 * (-(x * x)).exp());
        let err = evolve(&u0, &p, &g, &IntegratorConfig::midpoint(0.5), 10.0, 1.0, |_| {}).unwrap_err();
        assert!(matches!(
            err.source,
            StepError::NonConvergence { .. } | StepError::NonFinite
        ));
        assert_eq!(err.t, 0.0);
    }

    #[test]
    fn dealiasing_removes_top_third() {
        let g = make_grid(8.0, 96).unwrap();
        let p = ModelParams::modular(1.0 / 3.0);
        let mut op = NonlinearOperator::new(&g, &p, true).unwrap();
        let mut tr = Transformer::new(&g);
        let u = g.sample(0.0, |x| (-(x * x)).exp() - 0.5);
        let mut v = vec![ZERO; g.half_len()];
        tr.forward(&u.values, &mut v);
        let mut out = vec![ZERO; g.half_len()];
        op.apply(&v, &mut out);
        assert!(out[33..].iter().all(|c| *c == ZERO));
        assert!(out[1..=32].iter().any(|c| c.norm() > 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn modular_evolution_is_odd(amp in 0.5f64..4.0, center in -3.0f64..3.0, dealias: bool, midpoint: bool) {
            let g = make_grid(16.0, 128).unwrap();
            let p = ModelParams::modular(0.5);
            let u0 = g.sample(0.0, |x| amp * (-(x - center).powi(2)).exp());
            let cfg = IntegratorConfig {
                dealias,
                ..if midpoint { IntegratorConfig::midpoint(5e-3) } else { IntegratorConfig::etdrk4(5e-3) }
            };
            let a = evolve(&u0, &p, &g, &cfg, 0.2, 0.1, |_| {}).unwrap();
            let b = evolve(&u0.negated(), &p, &g, &cfg, 0.2, 0.1, |_| {}).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x + y).abs() <= 1e-10);
            }
        }
    }
}
