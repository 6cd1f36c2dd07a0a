//! Equation definition and initial data.
//!
//! Both variants are written in conservative form `u_t + u_xxx + sign·∂_x F(u) = 0`:
//!
//! * signed (`u^α u_x`, `α = m/k` with `m, k` odd): `F = |u|^{α+1}/(α+1)`, because
//!   `m + k` is even and so `u^{α+1} = |u|^{α+1}`. Even integer powers use
//!   `F = |u|^α u/(α+1)` since `u^α = |u|^α` there.
//! * modular (`|u|^α u_x`, any `α > 0`): `F = |u|^α u/(α+1)`.
//!
//! Fluxes only raise `|u|` to the power `α > 0`, so no negative base or
//! negative exponent is ever evaluated and no regularization is needed near zero.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FieldState, GridError, PeriodicGrid, Transformer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("signed variant with non-integer alpha {0} needs an odd/odd rational m/k")]
    MissingRational(f64),
    #[error("rational exponent {m}/{k} must have odd positive m and k")]
    EvenRational { m: u64, k: u64 },
    #[error("rational exponent {m}/{k} does not match alpha {alpha}")]
    RationalMismatch { m: u64, k: u64, alpha: f64 },
    #[error("bump power must be 2 or 4, got {0}")]
    BadBumpPower(u32),
    #[error("soliton speed must be positive, got {0}")]
    BadSpeed(f64),
    #[error("cannot superpose an empty list of fields")]
    EmptySuperposition,
    #[error("fields to superpose are on different grids or times")]
    SuperpositionMismatch,
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `u^α u_x`
    Signed,
    /// `|u|^α u_x`
    Modular,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Signed => "signed",
            Variant::Modular => "modular",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub alpha: f64,
    /// `+1` focusing, `-1` defocusing.
    pub sign: f64,
    pub nonlinear: bool,
    /// `(m, k)` with `alpha = m/k`; required for the signed variant when alpha
    /// is not an integer.
    pub alpha_rational: Option<(u64, u64)>,
}

impl ModelParams {
    pub fn modular(alpha: f64) -> Self {
        Self {
            variant: Variant::Modular,
            alpha,
            sign: 1.0,
            nonlinear: true,
            alpha_rational: None,
        }
    }

    /// Signed variant with `alpha = m/k`.
    pub fn signed(m: u64, k: u64) -> Self {
        Self {
            variant: Variant::Signed,
            alpha: m as f64 / k as f64,
            sign: 1.0,
            nonlinear: true,
            alpha_rational: Some((m, k)),
        }
    }

    /// Same power and sign, other variant.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn linear(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(ModelError::BadAlpha(self.alpha));
        }
        if self.variant == Variant::Signed {
            self.signed_numerator_parity()?;
        }
        if let Some((m, k)) = self.alpha_rational {
            if m == 0 || k == 0 {
                return Err(ModelError::EvenRational { m, k });
            }
            if ((m as f64 / k as f64) - self.alpha).abs() > 1e-14 * self.alpha.max(1.0) {
                return Err(ModelError::RationalMismatch {
                    m,
                    k,
                    alpha: self.alpha,
                });
            }
        }
        Ok(())
    }

    /// Whether `u^α` is odd in `u` (true) or even (false) for the signed variant.
    fn signed_numerator_parity(&self) -> Result<bool, ModelError> {
        match self.alpha_rational {
            Some((m, 1)) => Ok(m % 2 == 1),
            Some((m, k)) => {
                if m % 2 == 1 && k % 2 == 1 {
                    Ok(true)
                } else {
                    Err(ModelError::EvenRational { m, k })
                }
            }
            None => {
                if self.alpha.fract() == 0.0 {
                    Ok((self.alpha as u64) % 2 == 1)
                } else {
                    Err(ModelError::MissingRational(self.alpha))
                }
            }
        }
    }

    pub fn nonlinearity(&self) -> Result<Nonlinearity, ModelError> {
        self.validate()?;
        let odd_power = match self.variant {
            Variant::Signed => self.signed_numerator_parity()?,
            Variant::Modular => false,
        };
        Ok(Nonlinearity {
            power: AbsPower::new(self.alpha),
            alpha: self.alpha,
            even_flux: odd_power,
            sign: self.sign,
            enabled: self.nonlinear,
        })
    }
}

/// `|u|^β` with fast paths for the exponents that dominate run time.
#[derive(Debug, Clone, Copy, PartialEq)]
enum AbsPower {
    Integer(i32),
    Half,
    General(f64),
}

impl AbsPower {
    fn new(beta: f64) -> Self {
        if beta.fract() == 0.0 && beta <= 16.0 {
            AbsPower::Integer(beta as i32)
        } else if beta == 0.5 {
            AbsPower::Half
        } else {
            AbsPower::General(beta)
        }
    }

    #[inline]
    fn eval(self, a: f64) -> f64 {
        match self {
            AbsPower::Integer(n) => a.powi(n),
            AbsPower::Half => a.sqrt(),
            AbsPower::General(b) => a.powf(b),
        }
    }
}

/// Pointwise flux and energy density for validated parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nonlinearity {
    power: AbsPower,
    alpha: f64,
    /// `F = |u|^{α+1}/(α+1)` (even in `u`) instead of `|u|^α u/(α+1)`.
    even_flux: bool,
    sign: f64,
    enabled: bool,
}

impl Nonlinearity {
    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn sign(&self) -> f64 {
        self.sign
    }

    #[inline]
    pub fn flux(&self, u: f64) -> f64 {
        let a = u.abs();
        let p = self.power.eval(a);
        let w = if self.even_flux { a } else { u };
        p * w / (self.alpha + 1.0)
    }

    /// Writes `F(u)` into `out`; zero when the nonlinearity is switched off.
    pub fn flux_into(&self, u: &[f64], out: &mut [f64]) {
        if !self.enabled {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let scale = 1.0 / (self.alpha + 1.0);
        match (self.power, self.even_flux) {
            (AbsPower::Half, false) => {
                for (o, &v) in out.iter_mut().zip(u) {
                    *o = v.abs().sqrt() * v * scale;
                }
            }
            (power, even) => {
                for (o, &v) in out.iter_mut().zip(u) {
                    let a = v.abs();
                    *o = power.eval(a) * if even { a } else { v } * scale;
                }
            }
        }
    }

    /// `u^{α+2}` (signed) or `|u|^{α+2}` (modular), the potential-energy integrand.
    pub fn energy_density(&self, u: f64) -> f64 {
        let g = u.abs().powf(self.alpha + 2.0);
        // u^{α+2} is odd exactly when u^{α+1} is even
        if self.even_flux {
            g.copysign(u)
        } else {
            g
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// `sign(u)·|u|^β`, the real branch of `u^β` for odd/odd rational β.
pub fn signed_pow(u: f64, beta: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        u.abs().powf(beta).copysign(u)
    }
}

/// Pointwise `F(u)` such that `∂_x F(u)` is the model's nonlinear term.
pub fn nonlinear_flux(state: &FieldState, params: &ModelParams) -> Result<FieldState, ModelError> {
    let nl = params.nonlinearity()?;
    let mut out = vec![0.0; state.len()];
    nl.flux_into(&state.values, &mut out);
    Ok(FieldState::new(out, state.t))
}

/// Semi-discrete right-hand side `u_t = -∂³u - sign·∂_x F(u)`.
pub fn rhs(state: &FieldState, params: &ModelParams, grid: &PeriodicGrid) -> Result<FieldState, ModelError> {
    grid.check_len(state.len())?;
    state.ensure_finite()?;
    let nl = params.nonlinearity()?;
    let d1 = grid.derivative_symbol(1)?;
    let d3 = grid.derivative_symbol(3)?;
    let mut tr = Transformer::new(grid);
    let half = grid.half_len();
    let mut u_hat = vec![Complex64::new(0.0, 0.0); half];
    let mut f_hat = vec![Complex64::new(0.0, 0.0); half];
    let mut flux = vec![0.0; grid.len()];
    tr.forward(&state.values, &mut u_hat);
    nl.flux_into(&state.values, &mut flux);
    tr.forward(&flux, &mut f_hat);
    let out_hat: Vec<Complex64> = (0..half)
        .map(|j| -d3[j] * u_hat[j] - nl.sign() * d1[j] * f_hat[j])
        .collect();
    let mut out = vec![0.0; grid.len()];
    tr.inverse(&out_hat, &mut out);
    let result = FieldState::new(out, state.t);
    result.ensure_finite()?;
    Ok(result)
}

/// `Q(0) = ((α+1)(α+2)/2)^{1/α}`.
pub fn ground_state_peak(alpha: f64) -> f64 {
    ((alpha + 1.0) * (alpha + 2.0) / 2.0).powf(1.0 / alpha)
}

fn sech(y: f64) -> f64 {
    let e = (-y.abs()).exp();
    2.0 * e / (1.0 + e * e)
}

/// Ground state `Q(x) = Q(0)·sech^{2/α}(αx/2)`.
pub fn ground_state_value(x: f64, alpha: f64) -> f64 {
    ground_state_peak(alpha) * sech(alpha * x / 2.0).powf(2.0 / alpha)
}

/// `Q_c(x - shift) = c^{1/α} Q(√c (x - shift))`.
pub fn rescaled_soliton_value(x: f64, alpha: f64, c: f64, shift: f64) -> f64 {
    c.powf(1.0 / alpha) * ground_state_value(c.sqrt() * (x - shift), alpha)
}

pub fn ground_state(grid: &PeriodicGrid, alpha: f64) -> FieldState {
    grid.sample(0.0, |x| ground_state_value(x, alpha))
}

pub fn rescaled_soliton(grid: &PeriodicGrid, alpha: f64, c: f64, shift: f64) -> Result<FieldState, ModelError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(ModelError::BadSpeed(c));
    }
    Ok(grid.sample(0.0, |x| rescaled_soliton_value(x, alpha, c, shift)))
}

/// `A·exp(-(x - center)^p)` for `p ∈ {2, 4}`.
pub fn bump(grid: &PeriodicGrid, amplitude: f64, center: f64, p: u32) -> Result<FieldState, ModelError> {
    if p != 2 && p != 4 {
        return Err(ModelError::BadBumpPower(p));
    }
    Ok(grid.sample(0.0, |x| amplitude * (-(x - center).powi(p as i32)).exp()))
}

/// `A/√(1+x²)`.
pub fn rational_decay(grid: &PeriodicGrid, amplitude: f64) -> FieldState {
    grid.sample(0.0, |x| amplitude / (1.0 + x * x).sqrt())
}

/// Phase of the polynomially decaying datum; only real phases are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Zero,
    Pi,
}

impl Phase {
    pub fn factor(self) -> f64 {
        match self {
            Phase::Zero => 1.0,
            Phase::Pi => -1.0,
        }
    }
}

/// `±2λ⟨x⟩^{-m}` with `⟨x⟩ = (1+x²)^{1/2}`.
pub fn theorem_datum(grid: &PeriodicGrid, lam: f64, m: f64, theta: Phase) -> FieldState {
    let a = 2.0 * lam * theta.factor();
    grid.sample(0.0, |x| a * (1.0 + x * x).powf(-m / 2.0))
}

/// Pointwise sum of fields sharing length and time.
pub fn superpose(fields: &[FieldState]) -> Result<FieldState, ModelError> {
    let (first, rest) = fields.split_first().ok_or(ModelError::EmptySuperposition)?;
    let mut out = first.clone();
    for f in rest {
        if f.len() != out.len() || f.t != out.t {
            return Err(ModelError::SuperpositionMismatch);
        }
        for (o, v) in out.values.iter_mut().zip(&f.values) {
            *o += v;
        }
    }
    Ok(out)
}
