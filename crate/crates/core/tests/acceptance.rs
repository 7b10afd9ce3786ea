//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=3,7` restricts the run.

use std::panic;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gearkdv_core::diagnostics::{
    bilinear_probe, refinement_study, ConservationObserver, ProbeConfig, RefinementConfig,
};
use gearkdv_core::dynamics::{
    contraction_vs_t, integrate, pde_residual, picard_iterate, IntegrateOptions, PicardConfig, Sponge, State,
};
use gearkdv_core::model::{
    eigenvalues, modal_system, original_space_operator, original_to_modal, reduce, reduced_to_original,
    validate, EvolutionModel, OriginalCoefficients, ReducedCoefficients,
};
use gearkdv_core::operator_lab::{
    bk_expansion, coefficient_sum, commutator_residual, dilation_residual, leibniz_direct, Commutator, Family,
    SpaceTimeBlock,
};
use gearkdv_core::par::Execution;
use gearkdv_core::rough_data::{soliton, DeltaKind};
use gearkdv_core::spectral::{Field, SpectralGrid};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let criteria: [(usize, &str, u64, Check); 9] = [
        (1, "conservation", 60, conservation),
        (2, "decoupled soliton", 60, soliton_oracle),
        (3, "diagonalization", 30, diagonalization),
        (4, "operator algebra", 30, operator_algebra),
        (5, "leibniz expansion", 30, leibniz),
        (6, "duhamel fixed point", 300, duhamel),
        (7, "smoothing refinement", 600, smoothing),
        (8, "bilinear probe", 300, bilinear),
        (9, "dilation identity", 60, dilation),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(check);
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(budget);
        let (pass, detail) = match result {
            Ok(o) => (o.pass && !over, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !pass {
            failed += 1;
        }
        let budget_note = if over { " OVER BUDGET" } else { "" };
        println!(
            "criterion {id} [{}] {name}: {detail} ({:.1}s / {budget}s{budget_note})",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

fn gaussian(g: &Arc<SpectralGrid>, amp: f64, center: f64, width: f64) -> Field {
    Field::from_fn(g, |x| amp * (-(x - center) * (x - center) / (width * width)).exp())
}

fn conservation() -> Outcome {
    let oc = OriginalCoefficients::new(0.5, 0.3, 0.4, 1.5, 0.8);
    let g = SpectralGrid::new(1024, 100.0).unwrap();
    let u0 = soliton(&g, 1.0, 0.0, 6.0).unwrap().scale(0.5);
    let v0 = gaussian(&g, 0.3, 0.0, 1.0);
    let (model, diag) = modal_system(&oc).unwrap();
    let modal = original_to_modal(&State::new(u0, v0, 0.0).unwrap(), &diag);
    let mut obs = ConservationObserver::new(oc, Some(diag));
    let opts = IntegrateOptions {
        record_stride: usize::MAX,
        observer_stride: 50,
        sponge: None,
    };
    integrate(&modal, 1.0, 1e-3, &model, &opts, &mut [&mut obs]).unwrap();
    let drift = obs.finish().unwrap().relative_drift();
    let m = |c: &str| drift.channel_max(c).unwrap();
    let (e1u, e1v, e3, e4) = (m("drift_E1u"), m("drift_E1v"), m("drift_E3"), m("drift_E4"));
    let pass = e1u <= 1e-8 && e1v <= 1e-8 && e3 <= 1e-8 && e4 <= 1e-6;
    Outcome::new(
        pass,
        format!("max drift E1u {e1u:.2e}, E1v {e1v:.2e}, E3 {e3:.2e} (<= 1e-8), E4 {e4:.2e} (<= 1e-6)"),
    )
}

fn soliton_oracle() -> Outcome {
    let g = SpectralGrid::new(1024, 50.0).unwrap();
    let model = EvolutionModel::from(ReducedCoefficients::decoupled(6.0));
    let u0 = soliton(&g, 1.0, -5.0, 6.0).unwrap();
    let s0 = State::new(u0, Field::zeros(&g), 0.0).unwrap();
    let traj = integrate(&s0, 1.0, 1e-3, &model, &IntegrateOptions::default(), &mut []).unwrap();
    let exact = soliton(&g, 1.0, -1.0, 6.0).unwrap();
    let err = traj.last().u.sub(&exact).max_abs();
    Outcome::new(err <= 1e-6, format!("L-inf error at T=1: {err:.2e} (<= 1e-6)"))
}

/// Eigenvalues of `[[p, r], [r, q]]` by a single Jacobi rotation.
fn jacobi_eigen(p: f64, q: f64, r: f64) -> (f64, f64) {
    let theta = 0.5 * (2.0 * r).atan2(p - q);
    let (s, c) = theta.sin_cos();
    let l1 = p * c * c + 2.0 * r * s * c + q * s * s;
    let l2 = p * s * s - 2.0 * r * s * c + q * c * c;
    (l1.max(l2), l1.min(l2))
}

fn fourth_order_dt(fs: [&Field; 5], h: f64) -> Field {
    fs[0].axpy(-8.0, fs[1]).axpy(8.0, fs[3]).axpy(-1.0, fs[4]).scale(1.0 / (12.0 * h))
}

fn diagonalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut draws = 0;
    while draws < 1000 {
        let c = OriginalCoefficients::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(0.1..5.0),
            rng.random_range(0.1..5.0),
        );
        if !validate(&c).is_empty() {
            continue;
        }
        draws += 1;
        // A = D S D^{-1} with S symmetric, D = diag(1, sqrt(b2/b1)).
        let (p, q, r) = (1.0, 1.0 / c.b1, c.a3 * (c.b2 / c.b1).sqrt());
        let (o1, o2) = jacobi_eigen(p, q, r);
        let (a1, a2) = eigenvalues(&c).unwrap();
        worst = worst.max(((a1 - o1) / o1).abs()).max(((a2 - o2) / o2).abs());
    }

    let g = SpectralGrid::new(512, 60.0).unwrap();
    let mut worst_residual = 0.0f64;
    // With b1 = b2 = 1, a3 > 0 and a1 = a2 the second reduced equation has no u u_x
    // forcing, so data with v = 0 stay in the subspace where the rescaled
    // system is local and exactly equivalent to the original one.
    for _ in 0..10 {
        let a12 = rng.random_range(-1.0..1.0);
        let oc = OriginalCoefficients::new(a12, a12, rng.random_range(0.05..0.8), 1.0, 1.0);
        let mut p0 = Field::zeros(&g);
        for _ in 0..3 {
            let bump = gaussian(
                &g,
                rng.random_range(-0.5..0.5),
                rng.random_range(-3.0..3.0),
                rng.random_range(1.5..2.5),
            );
            p0 = p0.add(&bump);
        }
        let (rc, diag) = reduce(&oc).unwrap();
        let s0 = State::new(p0, Field::zeros(&g), 0.0).unwrap();
        let dt = 1e-3;
        let traj = integrate(&s0, 0.2, dt, &EvolutionModel::from(rc), &IntegrateOptions::default(), &mut []).unwrap();
        for centre in [50usize, 100, 150] {
            let w: Vec<State> = (centre - 2..=centre + 2)
                .map(|i| reduced_to_original(&traj.states[i], &diag).unwrap())
                .collect();
            let ut = fourth_order_dt([&w[0].u, &w[1].u, &w[2].u, &w[3].u, &w[4].u], dt);
            let vt = fourth_order_dt([&w[0].v, &w[1].v, &w[2].v, &w[3].v, &w[4].v], dt);
            let (ou, ov) = original_space_operator(&w[2].u, &w[2].v, &oc);
            worst_residual = worst_residual.max(ut.add(&ou).l2_norm()).max(vt.add(&ov).l2_norm());
        }
    }
    let pass = worst <= 1e-10 && worst_residual <= 1e-6;
    Outcome::new(
        pass,
        format!(
            "eigenvalue max rel error {worst:.2e} over 1000 draws (<= 1e-10); round-trip residual {worst_residual:.2e} (<= 1e-6)"
        ),
    )
}

fn algebra_block(h: f64) -> SpaceTimeBlock {
    let g = SpectralGrid::new(128, 32.0).unwrap();
    let times = SpaceTimeBlock::centered_times(1.0, h, 17);
    SpaceTimeBlock::sample(&g, times, |x, t| {
        (-x * x).exp() * (2.0 * t + 1.0).sin() + x * (-0.5 * x * x).exp() * t.cos()
    })
    .unwrap()
}

fn operator_algebra() -> Outcome {
    let (coarse, fine) = (algebra_block(0.2), algebra_block(0.1));
    let mut pass = true;
    let mut parts = Vec::new();
    for (which, label) in [(Commutator::LP, "LP"), (Commutator::LJ, "LJ")] {
        let rc = commutator_residual(which, &coarse).unwrap();
        let rf = commutator_residual(which, &fine).unwrap();
        let order = (rc / rf).log2();
        pass &= rf <= 1e-6 && order >= 6.0;
        parts.push(format!("{label} {rf:.2e} (order {order:.2})"));
    }
    // d_x^3 commutes with the time stencil, so this identity is exact up to rounding.
    let r = commutator_residual(Commutator::P3Dx3, &fine).unwrap();
    pass &= r <= 1e-6;
    parts.push(format!("(P+3)dx3 {r:.2e} (exact)"));
    Outcome::new(pass, format!("{} (residual <= 1e-6, order >= 6)", parts.join(", ")))
}

/// `(x d_x)^r e^{-x^2} = p_r(x) e^{-x^2}` with `p_{r+1} = x p_r' - 2 x^2 p_r`.
fn dilated_gaussian(r: usize) -> impl Fn(f64) -> f64 {
    let mut p = vec![1.0];
    for _ in 0..r {
        let mut next = vec![0.0; p.len() + 2];
        for (i, &c) in p.iter().enumerate() {
            next[i] += i as f64 * c;
            next[i + 2] -= 2.0 * c;
        }
        p = next;
    }
    move |x: f64| p.iter().rev().fold(0.0, |acc, &c| acc * x + c) * (-x * x).exp()
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn leibniz() -> Outcome {
    let g = SpectralGrid::new(256, 32.0).unwrap();
    let t0 = 0.7;
    let times = SpaceTimeBlock::centered_times(t0, 0.1, 17);
    let block = SpaceTimeBlock::sample(&g, times, |x, t| (-x * x).exp() * (1.0 + t)).unwrap();
    let rc = ReducedCoefficients {
        a: 1.3,
        b: 0.4,
        c: -0.6,
        a_tilde: 0.2,
        b_tilde: 0.9,
        c_tilde: 0.5,
    };
    // P^j u = sum_m C(j, m) (3 t d_t)^m (1 + t) (x d_x)^{j-m} e^{-x^2}.
    let pu: Vec<Field> = (0..=2)
        .map(|j| {
            let mut acc = Field::zeros(&g);
            for m in 0..=j {
                let time_part = if m == 0 { 1.0 + t0 } else { 3f64.powi(m as i32) * t0 };
                let space = Field::from_fn(&g, dilated_gaussian(j - m));
                acc = acc.axpy(binom(j, m) * time_part, &space);
            }
            acc
        })
        .collect();
    let pv = vec![Field::zeros(&g); 3];
    let mut worst = 0.0f64;
    for k in 0..=2u32 {
        let (b1, _, _) = bk_expansion(&pu, &pv, &rc, k, Family::B).unwrap();
        let direct = leibniz_direct(&block, &rc, k).unwrap();
        worst = worst.max(b1.sub(&direct).l2_norm() / direct.l2_norm());
    }
    let sums_ok = (0..=10).all(|k| coefficient_sum(k).unwrap() == 4u128.pow(k));
    Outcome::new(
        worst <= 1e-6 && sums_ok,
        format!("max relative difference {worst:.2e} for k=0..2 (<= 1e-6); coefficient sums == 4^k for k<=10: {sums_ok}"),
    )
}

fn small_model() -> EvolutionModel {
    EvolutionModel::from(ReducedCoefficients {
        a: 1.0,
        b: 0.6,
        c: 0.4,
        a_tilde: 0.3,
        b_tilde: 0.8,
        c_tilde: 0.5,
    })
}

fn duhamel() -> Outcome {
    let g = SpectralGrid::new(256, 40.0).unwrap();
    let u0 = gaussian(&g, 0.1, 0.0, 1.0);
    let v0 = gaussian(&g, 0.1, 1.0, 1.0);
    let model = small_model();
    let cfg = PicardConfig {
        norm_s: 1.0,
        ..PicardConfig::default()
    };
    let (traj, report) = picard_iterate(&u0, &v0, 0.1, &model, &cfg).unwrap();
    let ratios_ok = report.ratios.iter().skip(1).all(|&r| r < 1.0);
    let s0 = State::new(u0.clone(), v0.clone(), 0.0).unwrap();
    let etd = integrate(&s0, 0.1, 1e-3, &model, &IntegrateOptions::default(), &mut []).unwrap();
    let gap = traj.last().distance(etd.last(), 1.0);
    let rows = contraction_vs_t(&u0, &v0, &model, &[0.025, 0.05, 0.1, 0.2], &cfg, Execution::default()).unwrap();
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let monotone = ratios.windows(2).all(|w| w[0] < w[1]);
    Outcome::new(
        ratios_ok && gap <= 1e-6 && monotone,
        format!(
            "ratios {:?}, H1 gap to ETDRK4 {gap:.2e} (<= 1e-6), contraction ratio vs T=[0.025,0.05,0.1,0.2]: {}",
            report.ratios.iter().map(|r| format!("{r:.1e}")).collect::<Vec<_>>(),
            ratios.iter().map(|r| format!("{r:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn smoothing() -> Outcome {
    let oc = OriginalCoefficients::new(0.5, 0.3, 0.4, 1.0, 1.0);
    let (rc, _) = reduce(&oc).unwrap();
    let cfg = RefinementConfig {
        n: 4096,
        length: 40.0,
        model: EvolutionModel::from(rc),
        dt: 2e-4,
        kind: DeltaKind::Gaussian,
        amplitude_u: 1.0,
        amplitude_v: 0.5,
        probe_center: -1.0,
        half_width: 1.5,
        order: 2,
        sponge: Some(Sponge {
            start_fraction: 0.6,
            strength: 1e5,
        }),
    };
    let rows = refinement_study(&[0.4, 0.2, 0.1, 0.05], 0.5, &cfg, Execution::default()).unwrap();
    let initial_ok = rows.iter().skip(1).all(|r| r.ratio_initial.is_some_and(|q| q >= 2.0));
    let last = rows.last().unwrap();
    let probe_ok = last.ratio_probe.is_some_and(|q| (0.8..=1.25).contains(&q));
    let table = rows
        .iter()
        .map(|r| {
            format!(
                "eps {}: t0 {:.3e} ({}), tp {} ({})",
                r.eps,
                r.norm_initial,
                r.ratio_initial.map_or("-".into(), |q| format!("x{q:.2}")),
                r.norm_probe.map_or("fault".into(), |n| format!("{n:.3e}")),
                r.ratio_probe.map_or("-".into(), |q| format!("x{q:.3}")),
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(initial_ok && probe_ok, table)
}

fn bilinear() -> Outcome {
    let cfg = ProbeConfig {
        s: -0.5,
        b: 0.52,
        b_prime: 0.56,
        trials: 100,
        sizes: vec![64, 128, 256],
        ..ProbeConfig::default()
    };
    let stats = bilinear_probe(&cfg, Execution::default()).unwrap();
    let finite = stats.max.is_finite() && stats.max > 0.0;
    let per: Vec<String> = stats
        .per_size
        .iter()
        .map(|p| format!("N={} max {:.3e} median {:.3e}", p.n, p.max, p.median))
        .collect();
    Outcome::new(
        finite && stats.stability <= 2.0,
        format!("{}; max/min across N {:.3} (<= 2)", per.join(", "), stats.stability),
    )
}

fn dilation() -> Outcome {
    let g = SpectralGrid::new(512, 40.0).unwrap();
    let model = small_model();
    let s0 = State::new(gaussian(&g, 0.5, 0.0, 1.0), gaussian(&g, 0.3, -1.0, 1.2), 0.5).unwrap();
    let traj = integrate(&s0, 0.05, 1e-3, &model, &IntegrateOptions::default(), &mut []).unwrap();
    let res = pde_residual(&traj, &model).unwrap();
    let dil = dilation_residual(&traj, &model.coeffs, 0).unwrap();
    let mut worst = 0.0f64;
    for (rc, dc) in [("residual_u", "dilation_u"), ("residual_v", "dilation_v")] {
        for ((t, r), d) in res.times().iter().zip(res.channel(rc).unwrap()).zip(dil.channel(dc).unwrap()) {
            worst = worst.max((d - t.abs() * r).abs());
        }
    }
    Outcome::new(
        worst <= 1e-10,
        format!("max |dilation - |t| pde_residual| = {worst:.2e} over {} snapshots (<= 1e-10)", res.len()),
    )
}
