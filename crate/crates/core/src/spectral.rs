//! Periodic Fourier discretisation of the line.
//!
//! A [`SpectralGrid`] is a torus `[-L/2, L/2)` sampled at `N` points. A
//! [`Field`] stores `N` complex coefficients in standard FFT order using the
//! unitary normalisation `c_k = N^{-1/2} sum_j u_j exp(-2 pi i j k / N)`.
//!
//! Continuum-consistent quantities use the quadrature weight `dx = L/N`:
//! `||u||_{H^s}^2 = dx * sum_k (1 + xi_k^2)^s |c_k|^2`, which for `s = 0` is
//! exactly the discrete `L^2` norm `dx * sum_j |u_j|^2` and does not depend on
//! `N` for band-limited fields.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

const I: Complex64 = Complex64::new(0.0, 1.0);

pub struct SpectralGrid {
    n: usize,
    length: f64,
    x: Vec<f64>,
    xi: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralGrid")
            .field("n", &self.n)
            .field("length", &self.length)
            .finish()
    }
}

impl SpectralGrid {
    pub fn new(n: usize, length: f64) -> Result<Arc<Self>> {
        if n < 16 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "N must be a power of two >= 16, got {n}"
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidGrid(format!("L must be positive, got {length}")));
        }
        let dx = length / n as f64;
        let x = (0..n).map(|j| -0.5 * length + j as f64 * dx).collect();
        let xi = (0..n)
            .map(|k| 2.0 * PI * signed_index(k, n) as f64 / length)
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Arc::new(SpectralGrid {
            n,
            length,
            x,
            xi,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Collocation points `x_j = -L/2 + j L/N`.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Wavenumbers `2 pi k / L` in FFT order; the Nyquist entry is negative.
    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn xi_max(&self) -> f64 {
        PI * self.n as f64 / self.length
    }

    /// Largest retained mode index under the 2/3 rule.
    pub fn dealias_cutoff(&self) -> usize {
        (self.n - 1) / 3
    }

    pub fn nyquist(&self) -> usize {
        self.n / 2
    }

    pub fn same_shape(&self, other: &SpectralGrid) -> bool {
        self.n == other.n && self.length == other.length
    }

    pub(crate) fn fft_forward(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
    }

    pub(crate) fn fft_inverse(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
    }
}

/// Maps an FFT-order index to its signed mode number.
pub fn signed_index(k: usize, n: usize) -> i64 {
    if k < n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

#[derive(Clone)]
pub struct Field {
    grid: Arc<SpectralGrid>,
    coeffs: Vec<Complex64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("n", &self.grid.n)
            .field("length", &self.grid.length)
            .field("l2", &self.l2_norm())
            .finish()
    }
}

impl Field {
    pub fn zeros(grid: &Arc<SpectralGrid>) -> Self {
        Field {
            grid: grid.clone(),
            coeffs: vec![Complex64::new(0.0, 0.0); grid.n],
        }
    }

    pub fn from_coeffs(grid: &Arc<SpectralGrid>, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.n {
            return Err(Error::LengthMismatch {
                expected: grid.n,
                actual: coeffs.len(),
            });
        }
        Ok(Field {
            grid: grid.clone(),
            coeffs,
        })
    }

    /// Forward transform of real samples taken at the collocation points.
    pub fn to_spectral(grid: &Arc<SpectralGrid>, samples: &[f64]) -> Result<Self> {
        let buf: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        Self::to_spectral_complex(grid, buf)
    }

    pub fn to_spectral_complex(grid: &Arc<SpectralGrid>, mut samples: Vec<Complex64>) -> Result<Self> {
        if samples.len() != grid.n {
            return Err(Error::LengthMismatch {
                expected: grid.n,
                actual: samples.len(),
            });
        }
        grid.fft_forward(&mut samples);
        let norm = 1.0 / (grid.n as f64).sqrt();
        samples.iter_mut().for_each(|c| *c *= norm);
        Ok(Field {
            grid: grid.clone(),
            coeffs: samples,
        })
    }

    pub fn from_fn(grid: &Arc<SpectralGrid>, f: impl Fn(f64) -> f64) -> Self {
        let samples: Vec<f64> = grid.x.iter().map(|&x| f(x)).collect();
        Self::to_spectral(grid, &samples).expect("sample count matches grid")
    }

    /// Builds a field from a continuum Fourier transform `F(xi) = int u e^{-i xi x} dx`,
    /// so that `u(x_j) = L^{-1} sum_k F(xi_k) e^{i xi_k x_j}`.
    pub fn from_continuum_spectrum(grid: &Arc<SpectralGrid>, f: impl Fn(f64) -> Complex64) -> Self {
        let scale = 1.0 / (grid.dx() * (grid.n as f64).sqrt());
        let coeffs = grid
            .xi
            .iter()
            .enumerate()
            .map(|(k, &xi)| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                f(xi) * (sign * scale)
            })
            .collect();
        Field {
            grid: grid.clone(),
            coeffs,
        }
    }

    /// Continuum-normalised transform value at mode `k` (inverse of
    /// [`Field::from_continuum_spectrum`]).
    pub fn continuum_spectrum(&self, k: usize) -> Complex64 {
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        self.coeffs[k] * (sign * self.grid.dx() * (self.grid.n as f64).sqrt())
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<Complex64> {
        self.coeffs
    }

    pub fn to_physical(&self) -> Vec<Complex64> {
        let mut buf = self.coeffs.clone();
        self.grid.fft_inverse(&mut buf);
        let norm = 1.0 / (self.grid.n as f64).sqrt();
        buf.iter_mut().for_each(|c| *c *= norm);
        buf
    }

    /// Real part of the physical samples.
    pub fn to_physical_real(&self) -> Vec<f64> {
        self.to_physical().into_iter().map(|c| c.re).collect()
    }

    pub fn ensure_same_grid(&self, other: &Field) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || self.grid.same_shape(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// `d^order/dx^order`; the Nyquist mode is zeroed for odd orders.
    pub fn derivative(&self, order: u32) -> Field {
        let nyq = self.grid.nyquist();
        let coeffs = self
            .coeffs
            .iter()
            .zip(&self.grid.xi)
            .enumerate()
            .map(|(k, (&c, &xi))| {
                if order % 2 == 1 && k == nyq {
                    Complex64::new(0.0, 0.0)
                } else {
                    c * (I * xi).powu(order)
                }
            })
            .collect();
        Field {
            grid: self.grid.clone(),
            coeffs,
        }
    }

    /// Zeroes every mode above the 2/3 cutoff.
    pub fn dealias(&self) -> Field {
        let mut out = self.clone();
        out.dealias_in_place();
        out
    }

    pub fn dealias_in_place(&mut self) {
        let n = self.grid.n;
        let cut = self.grid.dealias_cutoff() as i64;
        for (k, c) in self.coeffs.iter_mut().enumerate() {
            if signed_index(k, n).abs() > cut {
                *c = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// Exact Airy group `V(t) = exp(-t d^3/dx^3)`, the multiplier `e^{i xi^3 t}`.
    pub fn airy_propagate(&self, t: f64) -> Field {
        self.propagate(t, 1.0)
    }

    /// Free flow of `u_t + alpha u_xxx = 0` over time `t`.
    pub fn propagate(&self, t: f64, alpha: f64) -> Field {
        let coeffs = self
            .coeffs
            .iter()
            .zip(&self.grid.xi)
            .map(|(&c, &xi)| c * Complex64::from_polar(1.0, alpha * xi * xi * xi * t))
            .collect();
        Field {
            grid: self.grid.clone(),
            coeffs,
        }
    }

    pub fn sobolev_norm(&self, s: f64) -> f64 {
        let sum: f64 = self
            .coeffs
            .iter()
            .zip(&self.grid.xi)
            .map(|(c, &xi)| (1.0 + xi * xi).powf(s) * c.norm_sqr())
            .sum();
        (self.grid.dx() * sum).sqrt()
    }

    pub fn l2_norm(&self) -> f64 {
        let sum: f64 = self.coeffs.iter().map(|c| c.norm_sqr()).sum();
        (self.grid.dx() * sum).sqrt()
    }

    /// `int u dx`, read off the zero mode.
    pub fn mass(&self) -> f64 {
        self.grid.length * self.coeffs[0].re / (self.grid.n as f64).sqrt()
    }

    /// Largest `|c_k - conj(c_{-k})|` relative to the largest coefficient; zero
    /// for fields that are real in physical space.
    pub fn hermitian_defect(&self) -> f64 {
        let n = self.grid.n;
        let scale = self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        (0..n)
            .map(|k| (self.coeffs[k] - self.coeffs[(n - k) % n].conj()).norm())
            .fold(0.0, f64::max)
            / scale
    }

    pub fn scale(&self, a: f64) -> Field {
        Field {
            grid: self.grid.clone(),
            coeffs: self.coeffs.iter().map(|&c| c * a).collect(),
        }
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &Field) -> Field {
        debug_assert_eq!(self.coeffs.len(), other.coeffs.len());
        Field {
            grid: self.grid.clone(),
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(&x, &y)| x + y * a)
                .collect(),
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &Field) -> Field {
        self.axpy(-1.0, other)
    }

    /// Pointwise product formed in physical space, without dealiasing.
    pub fn product(&self, other: &Field) -> Field {
        let a = self.to_physical();
        let b = other.to_physical();
        let prod = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Field::to_spectral_complex(&self.grid, prod).expect("same grid")
    }

    /// Pointwise multiplication by a real physical-space profile.
    pub fn multiply_profile(&self, profile: &[f64]) -> Field {
        let mut a = self.to_physical();
        a.iter_mut().zip(profile).for_each(|(x, &p)| *x *= p);
        Field::to_spectral_complex(&self.grid, a).expect("same grid")
    }

    /// Multiplication by the collocation coordinate `x` (a sawtooth on the torus).
    pub fn times_x(&self) -> Field {
        let x = self.grid.x.clone();
        self.multiply_profile(&x)
    }

    /// Trigonometric interpolant evaluated at arbitrary points (wrapped
    /// periodically). The Nyquist term is split symmetrically so real fields
    /// interpolate to real values.
    pub fn eval_at(&self, points: &[f64]) -> Vec<Complex64> {
        let n = self.grid.n;
        let nyq = self.grid.nyquist();
        let half = 0.5 * self.grid.length;
        let norm = 1.0 / (n as f64).sqrt();
        points
            .iter()
            .map(|&y| {
                let shift = y + half;
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, (&c, &xi)) in self.coeffs.iter().zip(&self.grid.xi).enumerate() {
                    if k == nyq {
                        acc += c * (xi * shift).cos();
                    } else {
                        acc += c * Complex64::from_polar(1.0, xi * shift);
                    }
                }
                acc * norm
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.to_physical().iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Discrete `L^2` distance `||a - b||_{H^s}`.
pub fn sobolev_distance(a: &Field, b: &Field, s: f64) -> f64 {
    a.sub(b).sobolev_norm(s)
}
