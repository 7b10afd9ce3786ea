//! Initial data: regularised point singularities, KdV solitons and fields
//! loaded from binary dumps.
//!
//! Every generator returns a real field (Hermitian spectrum, Nyquist mode
//! real).

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::spectral::{Field, SpectralGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    /// Unit-mass Gaussian of width `eps`.
    Gaussian,
    /// Flat spectrum up to `|xi| <= 1/eps`.
    BandLimited,
}

/// Regularised Dirac delta at the origin.
pub fn dirac_approx(grid: &Arc<SpectralGrid>, eps: f64, kind: DeltaKind) -> Result<Field> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    match kind {
        DeltaKind::Gaussian => {
            let min = 4.0 * grid.dx();
            if eps < min {
                return Err(Error::InvalidArgument(format!(
                    "gaussian width {eps} is not resolved on this grid (need eps >= 4 dx = {min})"
                )));
            }
            let norm = 1.0 / (2.0 * PI * eps * eps).sqrt();
            Ok(Field::from_fn(grid, |x| norm * (-x * x / (2.0 * eps * eps)).exp()))
        }
        DeltaKind::BandLimited => {
            let cut = 1.0 / eps;
            if cut >= grid.xi_max() {
                return Err(Error::InvalidArgument(format!(
                    "band 1/eps = {cut} exceeds the resolved wavenumber {}",
                    grid.xi_max()
                )));
            }
            Ok(Field::from_continuum_spectrum(grid, |xi| {
                Complex64::new(if xi.abs() <= cut { 1.0 } else { 0.0 }, 0.0)
            }))
        }
    }
}

/// Periodic regularisation of `p.v. 1/x` with transform `-i pi sgn(xi) e^{-eps |xi|}`.
pub fn pv_reciprocal(grid: &Arc<SpectralGrid>, eps: f64) -> Result<Field> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut f = Field::from_continuum_spectrum(grid, |xi| {
        Complex64::new(0.0, -PI * xi.signum() * (-eps * xi.abs()).exp())
    });
    f.coeffs_mut()[0] = Complex64::new(0.0, 0.0);
    let nyq = grid.nyquist();
    f.coeffs_mut()[nyq] = Complex64::new(0.0, 0.0);
    Ok(f)
}

/// `(12 kappa^2 / a) sech^2(kappa (x - x0))`, the travelling wave of
/// `u_t + u_xxx + a u u_x = 0` with speed `4 kappa^2`. The profile is wrapped
/// periodically so `x0` may sit anywhere.
pub fn soliton(grid: &Arc<SpectralGrid>, kappa: f64, x0: f64, a: f64) -> Result<Field> {
    if a == 0.0 || !a.is_finite() {
        return Err(Error::InvalidArgument("soliton amplitude coefficient a must be nonzero".into()));
    }
    if !(kappa > 0.0) || kappa * grid.length() < 20.0 {
        return Err(Error::InvalidArgument(format!(
            "soliton is not resolvable in the box: kappa * L = {} (need >= 20)",
            kappa * grid.length()
        )));
    }
    let l = grid.length();
    let amp = 12.0 * kappa * kappa / a;
    Ok(Field::from_fn(grid, |x| {
        let d = (x - x0 + 0.5 * l).rem_euclid(l) - 0.5 * l;
        let s = 1.0 / (kappa * d).cosh();
        amp * s * s
    }))
}

/// Weighted sum of fields on a common grid.
pub fn combine(fields: &[&Field], weights: &[f64]) -> Result<Field> {
    if fields.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: fields.len(),
            actual: weights.len(),
        });
    }
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("combine needs at least one field".into()))?;
    let mut acc = Field::zeros(first.grid());
    for (f, &w) in fields.iter().zip(weights) {
        first.ensure_same_grid(f)?;
        acc = acc.axpy(w, f);
    }
    Ok(acc)
}

/// First field stored in a dump.
pub fn from_file(path: &Path) -> Result<Field> {
    let dump = io::read_dump(path)?;
    dump.fields.into_iter().next().ok_or_else(|| Error::MalformedDump {
        path: path.to_path_buf(),
        reason: "dump holds no fields".into(),
    })
}

/// `(u, v)` from a two-field dump.
pub fn from_file_pair(path: &Path) -> Result<(Field, Field)> {
    let dump = io::read_dump(path)?;
    let count = dump.fields.len();
    let mut it = dump.fields.into_iter();
    match (it.next(), it.next()) {
        (Some(u), Some(v)) => Ok((u, v)),
        _ => Err(Error::MalformedDump {
            path: path.to_path_buf(),
            reason: format!("expected two fields, found {count}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::nonlinear_operator;
    use crate::model::ReducedCoefficients;

    fn grid() -> Arc<SpectralGrid> {
        SpectralGrid::new(1024, 40.0).unwrap()
    }

    #[test]
    fn gaussian_delta_has_unit_mass() {
        let g = grid();
        for eps in [1.0, 0.5, 0.25, 0.16] {
            let d = dirac_approx(&g, eps, DeltaKind::Gaussian).unwrap();
            assert!((d.mass() - 1.0).abs() < 1e-10, "eps {eps}: {}", d.mass());
            assert!(d.hermitian_defect() < 1e-13);
        }
        assert!(dirac_approx(&g, 0.1, DeltaKind::Gaussian).is_err());
        assert!(dirac_approx(&g, -1.0, DeltaKind::Gaussian).is_err());
    }

    #[test]
    fn gaussian_delta_spectrum_matches_transform_pair() {
        let g = grid();
        let eps = 0.3;
        let d = dirac_approx(&g, eps, DeltaKind::Gaussian).unwrap();
        for k in [0usize, 5, 40, 100] {
            let xi = g.xi()[k];
            let exact = (-eps * eps * xi * xi / 2.0).exp();
            assert!((d.continuum_spectrum(k).re - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn band_limited_delta_is_flat() {
        let g = grid();
        let d = dirac_approx(&g, 0.5, DeltaKind::BandLimited).unwrap();
        assert!(d.hermitian_defect() < 1e-13);
        assert!((d.continuum_spectrum(3).re - 1.0).abs() < 1e-12);
        assert!((d.mass() - 1.0).abs() < 1e-12);
        assert!(dirac_approx(&g, 0.001, DeltaKind::BandLimited).is_err());
    }

    #[test]
    fn pv_is_odd_and_massless() {
        let g = grid();
        let f = pv_reciprocal(&g, 0.05).unwrap();
        assert!(f.hermitian_defect() < 1e-13);
        assert!(f.mass().abs() < 1e-12);
        let x = [1.3, 2.7, 5.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = f.eval_at(&x);
        let b = f.eval_at(&neg);
        for (p, m) in a.iter().zip(&b) {
            assert!((p.re + m.re).abs() < 1e-12);
        }
    }

    #[test]
    fn pv_approaches_the_periodic_reciprocal() {
        let g = grid();
        let l = g.length();
        let f = pv_reciprocal(&g, 0.1).unwrap();
        let pts: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * (l / 4.0 - 1.0) / 19.0).collect();
        let vals = f.eval_at(&pts);
        for (&x, v) in pts.iter().zip(&vals) {
            let periodic = PI / l / (PI * x / l).tan();
            assert!((v.re / periodic - 1.0).abs() < 0.05, "x {x}: {} vs {periodic}", v.re);
            if x <= l / 10.0 {
                assert!((v.re * x - 1.0).abs() < 0.05, "x {x}");
            }
        }
    }

    #[test]
    fn soliton_profile_and_travelling_wave_identity() {
        let g = grid();
        assert!(soliton(&g, 1.0, 0.0, 0.0).is_err());
        assert!(soliton(&g, 0.4, 0.0, 6.0).is_err());
        let u = soliton(&g, 1.0, 0.0, 6.0).unwrap();
        let peak = u.eval_at(&[0.0])[0].re;
        assert!((peak - 2.0).abs() < 1e-12);
        assert!(u.hermitian_defect() < 1e-13);
        // u_xxx + a u u_x = 4 kappa^2 u_x.
        let rc = ReducedCoefficients::decoupled(6.0);
        let (nu, _) = nonlinear_operator(&u, &Field::zeros(&g), &rc);
        let lhs = u.derivative(3).add(&nu);
        let rhs = u.derivative(1).scale(4.0);
        assert!(lhs.sub(&rhs).max_abs() < 1e-8);
    }

    #[test]
    fn combine_is_linear() {
        let g = grid();
        let d = dirac_approx(&g, 0.5, DeltaKind::Gaussian).unwrap();
        let s = soliton(&g, 1.0, 3.0, 6.0).unwrap();
        assert!(combine(&[&d, &s], &[1.0, 0.0]).unwrap().sub(&d).l2_norm() == 0.0);
        let both = combine(&[&d, &s], &[1.0, 1.0]).unwrap();
        assert!((both.mass() - 1.0 - s.mass()).abs() < 1e-10);
        assert!(combine(&[&d, &d], &[1.0, -1.0]).unwrap().l2_norm() == 0.0);
        let other = SpectralGrid::new(512, 40.0).unwrap();
        let e = Field::zeros(&other);
        assert!(matches!(combine(&[&d, &e], &[1.0, 1.0]), Err(Error::GridMismatch)));
    }
}
