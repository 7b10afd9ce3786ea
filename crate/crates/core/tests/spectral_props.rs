use std::sync::Arc;

use num_complex::Complex64;
use proptest::prelude::*;

use gearkdv_core::spectral::{Field, SpectralGrid};

fn grid(n: usize) -> Arc<SpectralGrid> {
    SpectralGrid::new(n, 20.0).unwrap()
}

fn smooth_field(g: &Arc<SpectralGrid>, amps: &[f64]) -> Field {
    let l = g.length();
    Field::from_fn(g, |x| {
        amps.iter()
            .enumerate()
            .map(|(k, a)| a * (2.0 * std::f64::consts::PI * (k as f64 + 1.0) * x / l + k as f64).sin())
            .sum::<f64>()
            + (-x * x).exp()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_recovers_samples(samples in prop::collection::vec(-10.0f64..10.0, 64)) {
        let g = grid(64);
        let f = Field::to_spectral(&g, &samples).unwrap();
        let back = f.to_physical_real();
        for (a, b) in samples.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-13 * 10.0);
        }
        prop_assert!(f.hermitian_defect() < 1e-13);
    }

    #[test]
    fn parseval(samples in prop::collection::vec(-3.0f64..3.0, 128)) {
        let g = grid(128);
        let f = Field::to_spectral(&g, &samples).unwrap();
        let direct = (g.dx() * samples.iter().map(|v| v * v).sum::<f64>()).sqrt();
        prop_assert!((f.l2_norm() - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn airy_group_law(amps in prop::collection::vec(-1.0f64..1.0, 4), t1 in -2.0f64..2.0, t2 in -2.0f64..2.0) {
        let g = grid(128);
        let f = smooth_field(&g, &amps);
        let twice = f.airy_propagate(t1).airy_propagate(t2);
        let once = f.airy_propagate(t1 + t2);
        prop_assert!(twice.sub(&once).l2_norm() <= 1e-12 * f.l2_norm().max(1.0));
        prop_assert!((f.airy_propagate(t1).l2_norm() - f.l2_norm()).abs() <= 1e-12 * f.l2_norm());
    }

    #[test]
    fn dealias_is_idempotent(amps in prop::collection::vec(-1.0f64..1.0, 6)) {
        let g = grid(64);
        let f = smooth_field(&g, &amps);
        let once = f.dealias();
        let twice = once.dealias();
        prop_assert_eq!(twice.coeffs(), once.coeffs());
        let cut = g.dealias_cutoff() as i64;
        for (k, c) in once.coeffs().iter().enumerate() {
            let signed = gearkdv_core::spectral::signed_index(k, 64);
            if signed.abs() > cut {
                prop_assert_eq!(*c, Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn sobolev_norm_monotone_in_s(amps in prop::collection::vec(-1.0f64..1.0, 4), s in -1.0f64..2.0) {
        let g = grid(128);
        let f = smooth_field(&g, &amps);
        prop_assert!(f.sobolev_norm(s) <= f.sobolev_norm(s + 0.5) * (1.0 + 1e-14));
    }

    #[test]
    fn derivative_is_linear(a in -3.0f64..3.0, amps in prop::collection::vec(-1.0f64..1.0, 4)) {
        let g = grid(128);
        let f = smooth_field(&g, &amps);
        let h = Field::from_fn(&g, |x| (-(x - 1.0) * (x - 1.0)).exp());
        let lhs = f.axpy(a, &h).derivative(3);
        let rhs = f.derivative(3).axpy(a, &h.derivative(3));
        prop_assert!(lhs.sub(&rhs).l2_norm() <= 1e-11 * rhs.l2_norm().max(1.0));
    }
}

#[test]
fn interpolation_is_exact_at_collocation_points() {
    let g = grid(64);
    let f = smooth_field(&g, &[0.3, -0.2, 0.1]);
    let vals = f.eval_at(g.x());
    for (v, w) in vals.iter().zip(f.to_physical_real()) {
        assert!((v.re - w).abs() < 1e-12);
        assert!(v.im.abs() < 1e-12);
    }
}
