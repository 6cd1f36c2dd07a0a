//! Uniform periodic grid on `[-L, L)` and the Fourier machinery built on it.
//!
//! Transform convention: the forward transform is the unnormalized DFT
//! `û_k = Σ_j u_j e^{-2πi jk/N}` and the inverse carries the `1/N`. With this
//! choice `Δx·Σ u_j² = (2L/N²)·Σ |û_k|²`. Coefficients are stored in the
//! transform-native ordering `k = 0, 1, …, N/2-1, -N/2, …, -1`.
//!
//! Odd-order derivatives zero the Nyquist coefficient (`k = -N/2`), since that
//! entry has no symmetric partner and `(iκ)^odd` would otherwise leave a
//! non-real result.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Relative size of the imaginary part tolerated when returning to physical space.
pub const IMAG_RESIDUE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("N must be even, got {0}")]
    OddNodeCount(usize),
    #[error("N must be at least 8, got {0}")]
    TooFewNodes(usize),
    #[error("L must be positive and finite, got {0}")]
    BadHalfLength(f64),
    #[error("field has {got} samples but the grid has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("spectral field belongs to a different grid")]
    GridMismatch,
    #[error("imaginary residue {residue:e} exceeds tolerance after inverse transform")]
    ImaginaryResidue { residue: f64 },
    #[error("unsupported derivative order {0} (expected 1..=4)")]
    UnsupportedOrder(u32),
    #[error("non-finite value at node {index}")]
    NonFinite { index: usize },
}

/// Real samples `U_j ≈ u(x_j, t)` plus the time they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub values: Vec<f64>,
    pub t: f64,
}

impl FieldState {
    pub fn new(values: Vec<f64>, t: f64) -> Self {
        Self { values, t }
    }

    pub fn zeros(n: usize, t: f64) -> Self {
        Self {
            values: vec![0.0; n],
            t,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// First non-finite sample, if any.
    pub fn ensure_finite(&self) -> Result<(), GridError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(GridError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Pointwise `-u`, time unchanged.
    pub fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| -v).collect(),
            t: self.t,
        }
    }
}

/// Full complex spectrum of a field in native ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    pub coefficients: Vec<Complex64>,
    pub t: f64,
    half_length: f64,
}

impl SpectralField {
    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }
}

#[derive(Clone)]
pub struct PeriodicGrid {
    half_length: f64,
    n: usize,
    nodes: Vec<f64>,
    wavenumbers: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
}

impl fmt::Debug for PeriodicGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicGrid")
            .field("half_length", &self.half_length)
            .field("n", &self.n)
            .finish()
    }
}

impl PartialEq for PeriodicGrid {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.half_length == other.half_length
    }
}

/// Builds the grid `x_j = -L + 2Lj/N`; see [`PeriodicGrid::new`].
pub fn make_grid(half_length: f64, n: usize) -> Result<PeriodicGrid, GridError> {
    PeriodicGrid::new(half_length, n)
}

impl PeriodicGrid {
    pub fn new(half_length: f64, n: usize) -> Result<Self, GridError> {
        if !(half_length.is_finite() && half_length > 0.0) {
            return Err(GridError::BadHalfLength(half_length));
        }
        if !n.is_multiple_of(2) {
            return Err(GridError::OddNodeCount(n));
        }
        if n < 8 {
            return Err(GridError::TooFewNodes(n));
        }
        let dx = 2.0 * half_length / n as f64;
        let nodes = (0..n).map(|j| -half_length + dx * j as f64).collect();
        let wavenumbers = (0..n).map(|j| PI * native_index(j, n) as f64 / half_length).collect();

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let mut real_planner = RealFftPlanner::new();
        let r2c = real_planner.plan_fft_forward(n);
        let c2r = real_planner.plan_fft_inverse(n);

        Ok(Self {
            half_length,
            n,
            nodes,
            wavenumbers,
            fft,
            ifft,
            r2c,
            c2r,
        })
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_length / self.n as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// `κ_k = πk/L` in native ordering.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    /// Wavenumbers of the half spectrum used by the real transform,
    /// `k = 0..=N/2`; the final entry is the Nyquist mode `-πN/(2L)`.
    pub fn half_wavenumbers(&self) -> Vec<f64> {
        self.wavenumbers[..=self.n / 2].to_vec()
    }

    pub fn half_len(&self) -> usize {
        self.n / 2 + 1
    }

    /// Samples `f` at the nodes.
    pub fn sample(&self, t: f64, f: impl Fn(f64) -> f64) -> FieldState {
        FieldState::new(self.nodes.iter().map(|&x| f(x)).collect(), t)
    }

    pub fn zeros(&self, t: f64) -> FieldState {
        FieldState::zeros(self.n, t)
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<(), GridError> {
        if len == self.n {
            Ok(())
        } else {
            Err(GridError::LengthMismatch {
                expected: self.n,
                got: len,
            })
        }
    }

    pub fn to_spectral(&self, state: &FieldState) -> Result<SpectralField, GridError> {
        self.check_len(state.len())?;
        let mut buf: Vec<Complex64> = state.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(SpectralField {
            coefficients: buf,
            t: state.t,
            half_length: self.half_length,
        })
    }

    /// Inverse transform; errors when the result is not real to within
    /// [`IMAG_RESIDUE_TOL`] relative to its real part.
    pub fn to_physical(&self, spec: &SpectralField) -> Result<FieldState, GridError> {
        if spec.half_length != self.half_length {
            return Err(GridError::GridMismatch);
        }
        self.check_len(spec.len())?;
        let mut buf = spec.coefficients.clone();
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        let mut max_re = 0.0_f64;
        let mut max_im = 0.0_f64;
        for c in &buf {
            max_re = max_re.max((c.re * scale).abs());
            max_im = max_im.max((c.im * scale).abs());
        }
        if max_im > IMAG_RESIDUE_TOL * max_re.max(f64::MIN_POSITIVE) && max_im > 0.0 {
            return Err(GridError::ImaginaryResidue { residue: max_im });
        }
        Ok(FieldState::new(buf.iter().map(|c| c.re * scale).collect(), spec.t))
    }

    /// `∂_x^order u` computed spectrally, `order ∈ 1..=4`.
    pub fn spectral_derivative(&self, state: &FieldState, order: u32) -> Result<FieldState, GridError> {
        self.check_len(state.len())?;
        let symbol = self.derivative_symbol(order)?;
        let mut tr = Transformer::new(self);
        let mut spec = vec![Complex64::new(0.0, 0.0); self.half_len()];
        tr.forward(&state.values, &mut spec);
        for (s, m) in spec.iter_mut().zip(&symbol) {
            *s *= m;
        }
        let mut out = vec![0.0; self.n];
        tr.inverse(&spec, &mut out);
        Ok(FieldState::new(out, state.t))
    }

    /// Multiplier `(iκ)^order` over the half spectrum, Nyquist zeroed for odd order.
    pub fn derivative_symbol(&self, order: u32) -> Result<Vec<Complex64>, GridError> {
        if !(1..=4).contains(&order) {
            return Err(GridError::UnsupportedOrder(order));
        }
        let half = self.n / 2;
        Ok(self
            .half_wavenumbers()
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                if j == half && order % 2 == 1 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, k).powu(order)
                }
            })
            .collect())
    }

    pub(crate) fn real_plans(&self) -> (Arc<dyn RealToComplex<f64>>, Arc<dyn ComplexToReal<f64>>) {
        (self.r2c.clone(), self.c2r.clone())
    }
}

/// Signed mode index of native-ordering slot `j`.
pub fn native_index(j: usize, n: usize) -> i64 {
    if j < n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Real-to-half-complex transform pair with owned scratch space.
///
/// Forward output has `N/2 + 1` entries; inverse applies the `1/N` factor.
pub struct Transformer {
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    real_buf: Vec<f64>,
    spec_buf: Vec<Complex64>,
    scratch_fwd: Vec<Complex64>,
    scratch_inv: Vec<Complex64>,
    scale: f64,
}

impl Transformer {
    pub fn new(grid: &PeriodicGrid) -> Self {
        let (r2c, c2r) = grid.real_plans();
        let real_buf = r2c.make_input_vec();
        let spec_buf = r2c.make_output_vec();
        let scratch_fwd = r2c.make_scratch_vec();
        let scratch_inv = c2r.make_scratch_vec();
        Self {
            r2c,
            c2r,
            real_buf,
            spec_buf,
            scratch_fwd,
            scratch_inv,
            scale: 1.0 / grid.len() as f64,
        }
    }

    pub fn forward(&mut self, input: &[f64], out: &mut [Complex64]) {
        self.real_buf.copy_from_slice(input);
        self.r2c
            .process_with_scratch(&mut self.real_buf, out, &mut self.scratch_fwd)
            .expect("forward transform buffers sized by construction");
    }

    pub fn inverse(&mut self, input: &[Complex64], out: &mut [f64]) {
        self.spec_buf.copy_from_slice(input);
        let last = self.spec_buf.len() - 1;
        self.spec_buf[0].im = 0.0;
        self.spec_buf[last].im = 0.0;
        self.c2r
            .process_with_scratch(&mut self.spec_buf, out, &mut self.scratch_inv)
            .expect("inverse transform buffers sized by construction");
        for v in out.iter_mut() {
            *v *= self.scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rejects_bad_sizes() {
        assert_eq!(PeriodicGrid::new(1.0, 9).unwrap_err(), GridError::OddNodeCount(9));
        assert_eq!(PeriodicGrid::new(1.0, 6).unwrap_err(), GridError::TooFewNodes(6));
        assert!(matches!(PeriodicGrid::new(0.0, 8), Err(GridError::BadHalfLength(_))));
        assert!(matches!(
            PeriodicGrid::new(f64::NAN, 8),
            Err(GridError::BadHalfLength(_))
        ));
        assert!(matches!(PeriodicGrid::new(-2.0, 8), Err(GridError::BadHalfLength(_))));
    }

    #[test]
    fn nodes_and_wavenumbers_small_grid() {
        let g = make_grid(PI, 8).unwrap();
        assert!((g.dx() - PI / 4.0).abs() < 1e-15);
        assert_eq!(g.nodes()[0], -PI);
        assert!((g.nodes()[7] - 3.0 * PI / 4.0).abs() < 1e-15);
        let expected = [0.0, 1.0, 2.0, 3.0, -4.0, -3.0, -2.0, -1.0];
        assert!(close(g.wavenumbers(), &expected, 1e-14));
        let half = g.half_wavenumbers();
        assert_eq!(half.len(), 5);
        assert!((half[4] + 4.0).abs() < 1e-14);
    }

    #[test]
    fn large_domain_spacing() {
        let g = make_grid(1600.0 * PI, 1 << 16).unwrap();
        assert!((g.dx() - 0.153398).abs() < 1e-6);
    }

    #[test]
    fn single_cosine_mode_has_two_coefficients() {
        let g = make_grid(5.0, 32).unwrap();
        let u = g.sample(0.0, |x| (PI * x / 5.0).cos());
        let s = g.to_spectral(&u).unwrap();
        for (j, c) in s.coefficients.iter().enumerate() {
            let k = native_index(j, 32);
            if k.abs() == 1 {
                assert!((c.norm() - 16.0).abs() < 1e-12);
            } else {
                assert!(c.norm() < 1e-12, "mode {k} = {c}");
            }
        }
        let zero = g.to_spectral(&g.zeros(0.0)).unwrap();
        assert!(zero.coefficients.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn imaginary_residue_is_rejected() {
        let g = make_grid(PI, 8).unwrap();
        let mut s = g.to_spectral(&g.sample(0.0, |x| x.sin())).unwrap();
        s.coefficients[1] += Complex64::new(3.0, 0.0);
        assert!(matches!(g.to_physical(&s), Err(GridError::ImaginaryResidue { .. })));
    }

    #[test]
    fn derivatives_of_pure_modes() {
        let g = make_grid(PI, 16).unwrap();
        let d1 = g.spectral_derivative(&g.sample(0.0, f64::sin), 1).unwrap();
        assert!(close(&d1.values, &g.sample(0.0, f64::cos).values, 1e-12));
        let d3 = g.spectral_derivative(&g.sample(0.0, |x| (2.0 * x).cos()), 3).unwrap();
        assert!(close(
            &d3.values,
            &g.sample(0.0, |x| 8.0 * (2.0 * x).sin()).values,
            1e-12
        ));
        let d4 = g.spectral_derivative(&g.sample(0.0, |x| (3.0 * x).sin()), 4).unwrap();
        assert!(close(
            &d4.values,
            &g.sample(0.0, |x| 81.0 * (3.0 * x).sin()).values,
            1e-11
        ));
        // every resolved mode, every order; roundoff in the unused modes is
        // amplified by at most κ_max^order
        for k in 1..8 {
            let kf = k as f64;
            let u = g.sample(0.0, |x| (kf * x + 0.3).cos());
            for order in 1..=4u32 {
                let d = g.spectral_derivative(&u, order).unwrap();
                let exact = g.sample(0.0, |x| {
                    kf.powi(order as i32) * (kf * x + 0.3 + order as f64 * PI / 2.0).cos()
                });
                let tol = 1e-14 * 8f64.powi(order as i32) * (1.0 + kf.powi(order as i32));
                assert!(close(&d.values, &exact.values, tol), "k={k} order={order}");
            }
        }
        assert_eq!(
            g.spectral_derivative(&g.zeros(0.0), 5).unwrap_err(),
            GridError::UnsupportedOrder(5)
        );
    }

    #[test]
    fn odd_derivative_kills_nyquist() {
        let g = make_grid(PI, 16).unwrap();
        // cos(8x) sampled on 16 nodes is the Nyquist alternation.
        let u = g.sample(0.0, |x| (8.0 * x).cos());
        let d1 = g.spectral_derivative(&u, 1).unwrap();
        assert!(d1.sup_norm() < 1e-12);
        let d2 = g.spectral_derivative(&u, 2).unwrap();
        assert!(close(
            &d2.values,
            &u.values.iter().map(|v| -64.0 * v).collect::<Vec<_>>(),
            1e-10
        ));
    }

    #[test]
    fn parseval_pins_the_convention() {
        let g = make_grid(7.0, 128).unwrap();
        let u = g.sample(0.0, |x| (-(x - 1.0).powi(2)).exp() + 0.3 * (3.0 * PI * x / 7.0).sin());
        let s = g.to_spectral(&u).unwrap();
        let phys = g.dx() * u.values.iter().map(|v| v * v).sum::<f64>();
        let n = g.len() as f64;
        let spec = 2.0 * g.half_length() / (n * n) * s.coefficients.iter().map(|c| c.norm_sqr()).sum::<f64>();
        assert!((phys - spec).abs() <= 1e-12 * phys);
    }

    #[test]
    fn conjugate_symmetry_of_real_field() {
        let g = make_grid(3.0, 64).unwrap();
        let u = g.sample(0.0, |x| (x * 1.7).sin() * (-(x * x)).exp() + 0.2);
        let s = g.to_spectral(&u).unwrap();
        let n = g.len();
        for j in 1..n {
            let a = s.coefficients[j];
            let b = s.coefficients[n - j].conj();
            assert!((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
        }
    }

    proptest! {
        #[test]
        fn roundtrip_is_identity(values in proptest::collection::vec(-1e3f64..1e3, 32)) {
            let g = make_grid(2.5, 32).unwrap();
            let u = FieldState::new(values, 0.25);
            let back = g.to_physical(&g.to_spectral(&u).unwrap()).unwrap();
            let scale = u.sup_norm().max(1.0);
            prop_assert!(close(&back.values, &u.values, 1e-12 * scale));
            prop_assert_eq!(back.t, 0.25);
        }

        #[test]
        fn derivative_is_linear(
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
            order in 1u32..=4,
            shift in -1.0f64..1.0,
        ) {
            let g = make_grid(PI, 16).unwrap();
            let u = g.sample(0.0, |x| (x + shift).sin() + 0.5 * (3.0 * x).cos());
            let v = g.sample(0.0, |x| (2.0 * x - shift).cos());
            let combo = FieldState::new(
                u.values.iter().zip(&v.values).map(|(p, q)| a * p + b * q).collect(),
                0.0,
            );
            let lhs = g.spectral_derivative(&combo, order).unwrap();
            let du = g.spectral_derivative(&u, order).unwrap();
            let dv = g.spectral_derivative(&v, order).unwrap();
            for j in 0..g.len() {
                let rhs = a * du.values[j] + b * dv.values[j];
                prop_assert!((lhs.values[j] - rhs).abs() <= 1e-14 * 8f64.powi(order as i32) * 100.0);
            }
        }
    }
}
