//! Experiment runners. Each returns an [`Outcome`]; writing it to disk is the
//! caller's business.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Map, Value};

use gearkdv_core::diagnostics::{
    analyticity_fit, bilinear_probe, conserved, default_fit_band, edge_fraction, refinement_study,
    windowed_sobolev, DiagnosticsSeries, ProbeConfig, RefinementConfig, CONSERVED_CHANNELS,
};
use gearkdv_core::dynamics::{
    contraction_vs_t, integrate, pde_residual, picard_iterate_with, IntegrateOptions, PicardConfig, PicardStatus,
    State, Trajectory,
};
use gearkdv_core::io::read_dump;
use gearkdv_core::model::{
    modal_system, modal_to_original, original_to_modal, Diagonalization, EvolutionModel, OriginalCoefficients,
    ReducedCoefficients,
};
use gearkdv_core::operator_lab::{
    bk_expansion, coefficient_sum, commutator_residual, dilation_residual, leibniz_direct, Commutator, Family,
    SpaceTimeBlock,
};
use gearkdv_core::par::Execution;
use gearkdv_core::rough_data::{combine, dirac_approx, pv_reciprocal, soliton, DeltaKind};
use gearkdv_core::spectral::{signed_index, Field, SpectralGrid};

use crate::config::{DataSpec, RunConfig, Section, SystemConfig};
use crate::error::RunError;
use crate::plot::LinePlot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Simulate,
    Picard,
    Diagnose,
    OperatorCheck,
    BilinearProbe,
    Refine,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Picard => "picard",
            Experiment::Diagnose => "diagnose",
            Experiment::OperatorCheck => "operator-check",
            Experiment::BilinearProbe => "bilinear-probe",
            Experiment::Refine => "refine",
        }
    }
}

impl FromStr for Experiment {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, RunError> {
        match s.replace('_', "-").as_str() {
            "simulate" => Ok(Experiment::Simulate),
            "picard" => Ok(Experiment::Picard),
            "diagnose" => Ok(Experiment::Diagnose),
            "operator-check" => Ok(Experiment::OperatorCheck),
            "bilinear-probe" => Ok(Experiment::BilinearProbe),
            "refine" => Ok(Experiment::Refine),
            _ => Err(RunError::config(format!(
                "unknown experiment {s:?} (simulate | picard | diagnose | operator-check | bilinear-probe | refine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: String,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            limit: format!("<= {limit:e}"),
            pass: value <= limit,
        }
    }
}

pub struct DumpRequest {
    pub name: String,
    pub time: f64,
    pub u: Field,
    pub v: Field,
}

#[derive(Default)]
pub struct Outcome {
    /// Contents of `series.csv`.
    pub series: String,
    pub summary: Map<String, Value>,
    /// Scalar results, also used as sweep columns.
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    /// Set when the solver faulted; the rest of the outcome is partial.
    pub fault: Option<String>,
    pub dumps: Vec<DumpRequest>,
    pub tables: Vec<(String, String)>,
    pub plots: Vec<(String, LinePlot)>,
}

#[derive(Debug, Clone, Copy)]
pub struct Context {
    pub exec: Execution,
    pub seed: u64,
}

pub fn run(exp: Experiment, cfg: &RunConfig, ctx: &Context) -> Result<Outcome, RunError> {
    match exp {
        Experiment::Simulate => simulate(cfg),
        Experiment::Picard => picard(cfg, ctx),
        Experiment::Diagnose => diagnose(cfg),
        Experiment::OperatorCheck => operator_check(cfg),
        Experiment::BilinearProbe => probe(cfg, ctx),
        Experiment::Refine => refine(cfg, ctx),
    }
}

/// The system as integrated: modal coordinates for the original form,
/// the reduced system as is.
struct Prepared {
    model: EvolutionModel,
    basis: Option<(OriginalCoefficients, Diagonalization)>,
}

impl Prepared {
    fn new(system: SystemConfig) -> Result<Self, RunError> {
        Ok(match system {
            SystemConfig::Original(oc) => {
                let (model, diag) = modal_system(&oc)?;
                Prepared {
                    model,
                    basis: Some((oc, diag)),
                }
            }
            SystemConfig::Reduced(rc) => Prepared {
                model: EvolutionModel::from(rc),
                basis: None,
            },
        })
    }

    fn frame(&self) -> &'static str {
        if self.basis.is_some() {
            "modal"
        } else {
            "reduced"
        }
    }

    fn soliton_default(&self) -> f64 {
        match self.basis {
            Some(_) => 1.0,
            None => self.model.coeffs.a,
        }
    }

    fn to_model(&self, s: &State) -> State {
        match &self.basis {
            Some((_, d)) => original_to_modal(s, d),
            None => s.clone(),
        }
    }

    fn to_output(&self, s: &State) -> State {
        match &self.basis {
            Some((_, d)) => modal_to_original(s, d),
            None => s.clone(),
        }
    }
}

fn make_grid(cfg: &RunConfig) -> Result<Arc<SpectralGrid>, RunError> {
    let g = cfg.require_grid()?;
    Ok(SpectralGrid::new(g.n, g.length)?)
}

fn build_field(spec: &DataSpec, grid: &Arc<SpectralGrid>, soliton_a: f64) -> Result<Field, RunError> {
    Ok(match spec {
        DataSpec::Zero => Field::zeros(grid),
        DataSpec::Gaussian { amplitude, x0, width } => {
            if !(*width > 0.0) {
                return Err(RunError::config(format!("gaussian width must be positive, got {width}")));
            }
            Field::from_fn(grid, |x| amplitude * (-((x - x0) / width).powi(2)).exp())
        }
        DataSpec::Soliton { kappa, x0, a, scale } => soliton(grid, *kappa, *x0, a.unwrap_or(soliton_a))?.scale(*scale),
        DataSpec::Dirac { eps, delta, amplitude } => dirac_approx(grid, *eps, *delta)?.scale(*amplitude),
        DataSpec::Pv { eps, amplitude } => pv_reciprocal(grid, *eps)?.scale(*amplitude),
        DataSpec::File { path, field } => {
            let dump = read_dump(path)?;
            if !dump.grid.same_shape(grid) {
                return Err(RunError::config(format!(
                    "{}: dump grid (N={}, L={}) differs from grid (N={}, L={})",
                    path.display(),
                    dump.grid.n(),
                    dump.grid.length(),
                    grid.n(),
                    grid.length()
                )));
            }
            let f = dump.fields.get(*field).ok_or_else(|| {
                RunError::config(format!("{}: no field with index {field}", path.display()))
            })?;
            Field::from_coeffs(grid, f.coeffs().to_vec())?
        }
        DataSpec::Combine { parts, weights } => {
            let fields = parts
                .iter()
                .map(|p| build_field(p, grid, soliton_a))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&Field> = fields.iter().collect();
            combine(&refs, weights)?
        }
    })
}

fn initial_state(cfg: &RunConfig, grid: &Arc<SpectralGrid>, prep: &Prepared) -> Result<State, RunError> {
    let a = prep.soliton_default();
    let u = build_field(&cfg.data.u, grid, a)?;
    let v = build_field(&cfg.data.v, grid, a)?;
    Ok(State::new(u, v, 0.0)?)
}

fn run_integration(
    s0: &State,
    cfg: &RunConfig,
    model: &EvolutionModel,
) -> (Trajectory, Option<String>) {
    let opts = IntegrateOptions {
        record_stride: cfg.time.stride,
        observer_stride: usize::MAX,
        sponge: cfg.time.sponge,
    };
    match integrate(s0, cfg.time.t_final, cfg.time.dt, model, &opts, &mut []) {
        Ok(t) => (t, None),
        Err(fault) => {
            let msg = fault.to_string();
            (*fault.partial, Some(msg))
        }
    }
}

/// Monitored quantities of output-frame states plus their relative drifts.
fn state_series(states: &[State], prep: &Prepared) -> Result<DiagnosticsSeries, RunError> {
    let base: Vec<&str> = match prep.basis {
        Some(_) => CONSERVED_CHANNELS.to_vec(),
        None => vec!["mass_u", "mass_v", "norm_u", "norm_v"],
    };
    let mut raw = DiagnosticsSeries::new(&base);
    for s in states {
        let row = match &prep.basis {
            Some((oc, _)) => conserved(s, oc).as_array().to_vec(),
            None => vec![s.u.mass(), s.v.mass(), s.u.l2_norm(), s.v.l2_norm()],
        };
        raw.push(s.t, &row)?;
    }
    // Only the conserved channels get a drift column.
    let conserved_count = if prep.basis.is_some() { 4 } else { 2 };
    let drift = raw.relative_drift();
    let drift_names: Vec<&str> = drift.names()[..conserved_count].iter().map(String::as_str).collect();
    let mut names: Vec<&str> = raw.names().iter().map(String::as_str).collect();
    names.extend(&drift_names);
    names.push("edge_fraction");
    let mut out = DiagnosticsSeries::new(&names);
    for (i, s) in states.iter().enumerate() {
        let mut row: Vec<f64> = raw.names().iter().map(|n| raw.channel(n).unwrap()[i]).collect();
        row.extend(drift_names.iter().map(|n| drift.channel(n).unwrap()[i]));
        row.push(edge_fraction(s));
        out.push(s.t, &row)?;
    }
    Ok(out)
}

fn series_points(series: &DiagnosticsSeries, name: &str) -> Vec<(f64, f64)> {
    series
        .times()
        .iter()
        .copied()
        .zip(series.channel(name).unwrap_or(&[]).iter().copied())
        .collect()
}

fn field_points(f: &Field) -> Vec<(f64, f64)> {
    f.grid().x().iter().copied().zip(f.to_physical_real()).collect()
}

fn spectrum_points(f: &Field) -> Vec<(f64, f64)> {
    let n = f.grid().n();
    let mut pts: Vec<(i64, f64, f64)> = f
        .coeffs()
        .iter()
        .enumerate()
        .map(|(k, c)| (signed_index(k, n), f.grid().xi()[k], c.norm()))
        .collect();
    pts.sort_by_key(|p| p.0);
    pts.into_iter().map(|(_, xi, a)| (xi, a)).collect()
}

fn standard_plots(out: &mut Outcome, first: &State, last: &State, series: &DiagnosticsSeries) {
    out.plots.push((
        "fields.svg".into(),
        LinePlot::new("field snapshots", "x", "value")
            .with_series(&format!("u t={}", first.t), field_points(&first.u))
            .with_series(&format!("v t={}", first.t), field_points(&first.v))
            .with_series(&format!("u t={:.4}", last.t), field_points(&last.u))
            .with_series(&format!("v t={:.4}", last.t), field_points(&last.v)),
    ));
    out.plots.push((
        "spectrum.svg".into(),
        LinePlot::new(&format!("spectrum at t={:.4}", last.t), "xi", "coefficient")
            .log_y()
            .with_series("u", spectrum_points(&last.u))
            .with_series("v", spectrum_points(&last.v)),
    ));
    let mut drift = LinePlot::new("relative drift", "t", "drift").log_y();
    for name in series.names().iter().filter(|n| n.starts_with("drift_")) {
        drift = drift.with_series(name, series_points(series, name));
    }
    out.plots.push(("drift.svg".into(), drift));
}

/// Largest value of the non-negative channels, last value of the rest.
fn series_maxima(series: &DiagnosticsSeries, out: &mut Outcome) {
    const NON_NEGATIVE: [&str; 6] = ["drift_", "residual_", "dilation_", "edge_", "windowed_", "norm_"];
    for name in series.names() {
        let col = series.channel(name).unwrap_or(&[]);
        if NON_NEGATIVE.iter().any(|p| name.starts_with(p)) {
            out.metrics.insert(format!("max_{name}"), col.iter().copied().fold(0.0, f64::max));
        } else if let Some(&last) = col.last() {
            out.metrics.insert(format!("final_{name}"), last);
        }
    }
}

fn simulate(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let params = cfg.params();
    let tolerance = params.f64_or("tolerance", 1e-8)?;
    let energy_tolerance = params.f64_or("energy_tolerance", 1e-6)?;
    params.finish()?;

    let grid = make_grid(cfg)?;
    let prep = Prepared::new(cfg.require_system()?)?;
    let initial = initial_state(cfg, &grid, &prep)?;
    let (traj, fault) = run_integration(&prep.to_model(&initial), cfg, &prep.model);
    let states: Vec<State> = traj.states.iter().map(|s| prep.to_output(s)).collect();
    let series = state_series(&states, &prep)?;

    let mut out = Outcome {
        series: series.to_csv(),
        fault,
        ..Default::default()
    };
    series_maxima(&series, &mut out);
    let last = states.last().expect("trajectory holds the initial state");
    out.metrics.insert("final_time".into(), last.t);
    out.metrics.insert("final_sup".into(), last.max_abs());
    let drift_limits: Vec<(&str, f64)> = match prep.basis {
        Some(_) => vec![
            ("drift_E1u", tolerance),
            ("drift_E1v", tolerance),
            ("drift_E3", tolerance),
            ("drift_E4", energy_tolerance),
        ],
        None => vec![("drift_mass_u", tolerance), ("drift_mass_v", tolerance)],
    };
    for (name, limit) in drift_limits {
        out.checks.push(Check::at_most(name, series.channel_max(name).unwrap_or(0.0), limit));
    }
    out.summary.insert("frame".into(), json!(prep.frame()));
    out.summary.insert("snapshots".into(), json!(states.len()));
    out.summary.insert("sponge".into(), json!(cfg.time.sponge.is_some()));
    if cfg.output.dumps {
        out.dumps.push(DumpRequest {
            name: "initial".into(),
            time: initial.t,
            u: initial.u.clone(),
            v: initial.v.clone(),
        });
        out.dumps.push(DumpRequest {
            name: "final".into(),
            time: last.t,
            u: last.u.clone(),
            v: last.v.clone(),
        });
    }
    standard_plots(&mut out, &initial, last, &series);
    Ok(out)
}

fn picard(cfg: &RunConfig, ctx: &Context) -> Result<Outcome, RunError> {
    let params = cfg.params();
    let pc = PicardConfig {
        iterations: params.usize_or("iterations", 30)?,
        norm_s: params.f64_or("norm_s", 0.0)?,
        subintervals_per_unit: params.usize_or("subintervals", 64)?,
        relative_tolerance: params.f64_or("relative_tolerance", 1e-13)?,
    };
    let tolerance = params.f64_or("tolerance", 1e-6)?;
    let t_list = params.opt_f64_list("t_list")?;
    params.finish()?;

    let grid = make_grid(cfg)?;
    let prep = Prepared::new(cfg.require_system()?)?;
    let initial = initial_state(cfg, &grid, &prep)?;
    let s0 = prep.to_model(&initial);
    let t_final = cfg.time.t_final;
    let (traj, report) = picard_iterate_with(&s0.u, &s0.v, t_final, &prep.model, &pc, ctx.exec)?;

    let states: Vec<State> = traj.states.iter().map(|s| prep.to_output(s)).collect();
    let series = state_series(&states, &prep)?;
    let mut out = Outcome {
        series: series.to_csv(),
        ..Default::default()
    };
    if report.status == PicardStatus::Diverged {
        out.fault = Some("Picard iteration diverged".into());
    }

    let mut table = String::from("n,distance,ratio\n");
    for (i, d) in report.distances.iter().enumerate() {
        let r = if i == 0 { String::new() } else { format!("{:e}", report.ratios[i - 1]) };
        let _ = writeln!(table, "{},{d:e},{r}", i + 1);
    }
    out.tables.push(("contraction.csv".into(), table));

    let opts = IntegrateOptions {
        record_stride: usize::MAX,
        observer_stride: usize::MAX,
        sponge: None,
    };
    let reference = integrate(&s0, t_final, cfg.time.dt, &prep.model, &opts, &mut [])
        .map_err(|f| RunError::Numerical(format!("reference run: {f}")))?;
    let gap = prep.to_output(traj.last()).distance(&prep.to_output(reference.last()), 1.0);

    let tail = report.ratios.iter().skip(1).copied().fold(0.0, f64::max);
    out.checks.push(Check {
        name: "successive_ratios_below_one".into(),
        value: tail,
        limit: "< 1".into(),
        pass: tail < 1.0,
    });
    out.checks.push(Check::at_most("etdrk4_gap_h1", gap, tolerance));
    out.metrics.insert("contraction_ratio".into(), report.contraction_ratio());
    out.metrics.insert("iterations".into(), report.distances.len() as f64);
    out.metrics.insert("etdrk4_gap_h1".into(), gap);
    out.summary.insert("status".into(), json!(report.status));
    out.summary.insert("distances".into(), json!(report.distances));
    out.summary.insert("ratios".into(), json!(report.ratios));
    out.summary.insert("frame".into(), json!(prep.frame()));

    if let Some(list) = t_list {
        let rows = contraction_vs_t(&s0.u, &s0.v, &prep.model, &list, &pc, ctx.exec)?;
        let mut table = String::from("T,ratio,iterations,status\n");
        for r in &rows {
            let _ = writeln!(table, "{:e},{:e},{},{:?}", r.t_final, r.ratio, r.iterations, r.status);
        }
        out.tables.push(("contraction_vs_t.csv".into(), table));
        let monotone = rows.windows(2).all(|w| w[0].ratio <= w[1].ratio);
        out.checks.push(Check {
            name: "contraction_grows_with_t".into(),
            value: if monotone { 1.0 } else { 0.0 },
            limit: "monotone".into(),
            pass: monotone,
        });
        out.summary.insert("contraction_vs_t".into(), json!(rows));
    }
    let first = states.first().expect("trajectory holds the initial state");
    standard_plots(&mut out, first, states.last().unwrap(), &series);
    let ratios: Vec<(f64, f64)> = report.ratios.iter().enumerate().map(|(i, &r)| ((i + 2) as f64, r)).collect();
    out.plots.push((
        "contraction.svg".into(),
        LinePlot::new("successive Picard ratios", "n", "d(n)/d(n-1)").log_y().with_series("ratio", ratios),
    ));
    Ok(out)
}

fn window_params(params: &Section, grid: &SpectralGrid) -> Result<(f64, f64, u32), RunError> {
    let center = params.f64_or("center", 0.0)?;
    let half_width = params.f64_or("half_width", 0.25 * grid.length())?;
    let order = params.usize_or("order", 2)? as u32;
    Ok((center, half_width, order))
}

fn fit_sigma(f: &Field) -> f64 {
    analyticity_fit(f, default_fit_band(f.grid())).map(|fit| fit.sigma).unwrap_or(f64::NAN)
}

fn norms_series(states: &[State], window: (f64, f64, u32)) -> Result<DiagnosticsSeries, RunError> {
    let (c, h, k) = window;
    let mut series = DiagnosticsSeries::new(&["windowed_u", "windowed_v", "sigma_u", "sigma_v", "edge_fraction"]);
    for s in states {
        series.push(
            s.t,
            &[
                windowed_sobolev(&s.u, c, h, k)?,
                windowed_sobolev(&s.v, c, h, k)?,
                fit_sigma(&s.u),
                fit_sigma(&s.v),
                edge_fraction(s),
            ],
        )?;
    }
    Ok(series)
}

fn diagnose(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let params = cfg.params();
    let input = params.opt_str("input")?;
    let residual_tolerance = params.f64_or("residual_tolerance", 1e-5)?;
    let dilation_tolerance = params.f64_or("dilation_tolerance", 1e-10)?;

    if let Some(path) = input {
        let dump = read_dump(std::path::Path::new(path))?;
        let window = window_params(&params, &dump.grid)?;
        params.finish()?;
        let u = dump.fields.first().cloned().unwrap_or_else(|| Field::zeros(&dump.grid));
        let v = dump.fields.get(1).cloned().unwrap_or_else(|| Field::zeros(&dump.grid));
        let state = State::new(u, v, dump.time)?;
        let series = norms_series(std::slice::from_ref(&state), window)?;
        let mut out = Outcome {
            series: series.to_csv(),
            ..Default::default()
        };
        series_maxima(&series, &mut out);
        out.summary.insert("input".into(), json!(path));
        for (name, f) in [("u", &state.u), ("v", &state.v)] {
            if let Ok(fit) = analyticity_fit(f, default_fit_band(f.grid())) {
                out.summary.insert(format!("fit_{name}"), json!(fit));
            }
        }
        out.plots.push((
            "spectrum.svg".into(),
            LinePlot::new(&format!("spectrum at t={}", state.t), "xi", "coefficient")
                .log_y()
                .with_series("u", spectrum_points(&state.u))
                .with_series("v", spectrum_points(&state.v)),
        ));
        return Ok(out);
    }

    let grid = make_grid(cfg)?;
    let window = window_params(&params, &grid)?;
    params.finish()?;
    let prep = Prepared::new(cfg.require_system()?)?;
    let initial = initial_state(cfg, &grid, &prep)?;
    let (traj, fault) = run_integration(&prep.to_model(&initial), cfg, &prep.model);
    if traj.uniform_spacing().is_none() && fault.is_none() {
        return Err(RunError::config(
            "residual diagnostics need uniformly spaced snapshots: time.T must be a multiple of time.dt * time.stride",
        ));
    }
    let mut out = Outcome {
        fault,
        ..Default::default()
    };
    let residual = pde_residual(&traj, &prep.model)?;
    let unit = prep.model.dispersion == [1.0, 1.0];
    let series = if unit {
        let dil = dilation_residual(&traj, &prep.model.coeffs, 0)?;
        let mut worst = 0.0f64;
        let mut merged = DiagnosticsSeries::new(&["residual_u", "residual_v", "dilation_u", "dilation_v"]);
        let (ru, rv) = (residual.channel("residual_u").unwrap(), residual.channel("residual_v").unwrap());
        let (du, dv) = (dil.channel("dilation_u").unwrap(), dil.channel("dilation_v").unwrap());
        for (i, &t) in residual.times().iter().enumerate() {
            worst = worst.max((du[i] - t.abs() * ru[i]).abs()).max((dv[i] - t.abs() * rv[i]).abs());
            merged.push(t, &[ru[i], rv[i], du[i], dv[i]])?;
        }
        out.checks.push(Check::at_most("dilation_identity", worst, dilation_tolerance));
        merged
    } else {
        residual
    };
    let worst_residual = series
        .channel_max("residual_u")
        .unwrap_or(0.0)
        .max(series.channel_max("residual_v").unwrap_or(0.0));
    out.checks.push(Check::at_most("pde_residual", worst_residual, residual_tolerance));
    out.series = series.to_csv();
    series_maxima(&series, &mut out);

    let states: Vec<State> = traj.states.iter().map(|s| prep.to_output(s)).collect();
    let norms = norms_series(&states, window)?;
    series_maxima(&norms, &mut out);
    out.tables.push(("norms.csv".into(), norms.to_csv()));
    out.summary.insert("frame".into(), json!(prep.frame()));
    out.summary.insert(
        "window".into(),
        json!({"center": window.0, "half_width": window.1, "order": window.2}),
    );
    let last = states.last().unwrap();
    out.plots.push((
        "spectrum.svg".into(),
        LinePlot::new(&format!("spectrum at t={:.4}", last.t), "xi", "coefficient")
            .log_y()
            .with_series("u", spectrum_points(&last.u))
            .with_series("v", spectrum_points(&last.v)),
    ));
    out.plots.push((
        "residual.svg".into(),
        LinePlot::new("PDE residual", "t", "residual")
            .log_y()
            .with_series("u", series_points(&series, "residual_u"))
            .with_series("v", series_points(&series, "residual_v")),
    ));
    if cfg.output.dumps {
        out.dumps.push(DumpRequest {
            name: "final".into(),
            time: last.t,
            u: last.u.clone(),
            v: last.v.clone(),
        });
    }
    Ok(out)
}

fn algebra_block(h: f64) -> Result<SpaceTimeBlock, RunError> {
    let g = SpectralGrid::new(128, 32.0)?;
    let times = SpaceTimeBlock::centered_times(1.0, h, 17);
    Ok(SpaceTimeBlock::sample(&g, times, |x, t| {
        (-x * x).exp() * (2.0 * t + 1.0).sin() + x * (-0.5 * x * x).exp() * t.cos()
    })?)
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

fn leibniz_gap(rc: &ReducedCoefficients) -> Result<f64, RunError> {
    let g = SpectralGrid::new(256, 32.0)?;
    let t0 = 0.7;
    let times = SpaceTimeBlock::centered_times(t0, 0.1, 17);
    let block = SpaceTimeBlock::sample(&g, times, |x, t| (-x * x).exp() * (1.0 + t))?;
    let binom = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    // P^j u for the separable field (1 + t) e^{-x^2}, expanded binomially.
    let pu: Vec<Field> = (0..=2)
        .map(|j| {
            (0..=j).fold(Field::zeros(&g), |acc, m| {
                let time_part = if m == 0 { 1.0 + t0 } else { 3f64.powi(m as i32) * t0 };
                acc.axpy(binom(j, m) * time_part, &Field::from_fn(&g, dilated_gaussian(j - m)))
            })
        })
        .collect();
    let pv = vec![Field::zeros(&g); 3];
    let mut worst = 0.0f64;
    for k in 0..=2u32 {
        let (b1, _, _) = bk_expansion(&pu, &pv, rc, k, Family::B)?;
        let direct = leibniz_direct(&block, rc, k)?;
        worst = worst.max(b1.sub(&direct).l2_norm() / direct.l2_norm());
    }
    Ok(worst)
}

fn operator_check(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let params = cfg.params();
    let tolerance = params.f64_or("tolerance", 1e-6)?;
    let min_order = params.f64_or("min_order", 6.0)?;
    let dilation_tolerance = params.f64_or("dilation_tolerance", 1e-10)?;
    params.finish()?;
    let rc = match cfg.system {
        Some(SystemConfig::Reduced(rc)) => rc,
        _ => ReducedCoefficients {
            a: 1.3,
            b: 0.4,
            c: -0.6,
            a_tilde: 0.2,
            b_tilde: 0.9,
            c_tilde: 0.5,
        },
    };

    let mut out = Outcome::default();
    let (coarse, fine) = (algebra_block(0.2)?, algebra_block(0.1)?);
    for (which, label) in [(Commutator::LP, "LP"), (Commutator::LJ, "LJ")] {
        let rc_ = commutator_residual(which, &coarse)?;
        let rf = commutator_residual(which, &fine)?;
        let order = (rc_ / rf).log2();
        out.checks.push(Check::at_most(&format!("commutator_{label}"), rf, tolerance));
        out.checks.push(Check {
            name: format!("commutator_{label}_order"),
            value: order,
            limit: format!(">= {min_order}"),
            pass: order >= min_order,
        });
    }
    let r = commutator_residual(Commutator::P3Dx3, &fine)?;
    out.checks.push(Check::at_most("commutator_P3Dx3", r, tolerance));
    out.checks.push(Check::at_most("leibniz_expansion", leibniz_gap(&rc)?, tolerance));
    let mut worst_sum = 0.0f64;
    for k in 0..=10u32 {
        let s = coefficient_sum(k)?;
        worst_sum = worst_sum.max((s as f64 - 4f64.powi(k as i32)).abs());
    }
    out.checks.push(Check {
        name: "coefficient_sums".into(),
        value: worst_sum,
        limit: "== 4^k for k <= 10".into(),
        pass: worst_sum == 0.0,
    });

    // Dilation identity on a short computed trajectory.
    let g = SpectralGrid::new(256, 40.0)?;
    let model = EvolutionModel::from(rc);
    let bump = |amp: f64, c: f64| Field::from_fn(&g, |x| amp * (-(x - c) * (x - c)).exp());
    let s0 = State::new(bump(0.5, 0.0), bump(0.3, -1.0), 0.5)?;
    let traj = integrate(&s0, 0.02, 1e-3, &model, &IntegrateOptions::default(), &mut [])
        .map_err(|f| RunError::Numerical(f.to_string()))?;
    let res = pde_residual(&traj, &model)?;
    let dil = dilation_residual(&traj, &rc, 0)?;
    let mut worst = 0.0f64;
    for (rn, dn) in [("residual_u", "dilation_u"), ("residual_v", "dilation_v")] {
        for ((t, r), d) in res.times().iter().zip(res.channel(rn).unwrap()).zip(dil.channel(dn).unwrap()) {
            worst = worst.max((d - t.abs() * r).abs());
        }
    }
    out.checks.push(Check::at_most("dilation_identity", worst, dilation_tolerance));

    let mut table = String::from("identity,residual,limit,pass\n");
    for c in &out.checks {
        let _ = writeln!(table, "{},{:e},{},{}", c.name, c.value, c.limit, c.pass);
        out.metrics.insert(c.name.clone(), c.value);
    }
    out.series = table;
    out.summary.insert("coefficients".into(), json!(rc));
    Ok(out)
}

fn probe(cfg: &RunConfig, ctx: &Context) -> Result<Outcome, RunError> {
    let params = cfg.params();
    let d = ProbeConfig::default();
    let sizes = match params.opt_f64_list("sizes")? {
        Some(list) => list
            .into_iter()
            .map(|v| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(RunError::config(format!("experiment.params.sizes: {v} is not a positive integer")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => d.sizes.clone(),
    };
    let pc = ProbeConfig {
        s: params.f64_or("s", d.s)?,
        b: params.f64_or("b", d.b)?,
        b_prime: params.f64_or("b_prime", d.b_prime)?,
        trials: params.usize_or("trials", d.trials)?,
        sizes,
        length: params.f64_or("length", d.length)?,
        window: params.f64_or("window", d.window)?,
        detuning: params.f64_or("detuning", d.detuning)?,
        seed: ctx.seed,
    };
    let stability_limit = params.f64_or("stability_limit", 2.0)?;
    params.finish()?;

    let stats = bilinear_probe(&pc, ctx.exec)?;
    let mut table = String::from("n,time_samples,max,median,zero_trials\n");
    for s in &stats.per_size {
        let _ = writeln!(table, "{},{},{:e},{:e},{}", s.n, s.time_samples, s.max, s.median, s.zero_trials);
    }
    let mut out = Outcome {
        series: table,
        ..Default::default()
    };
    out.checks.push(Check {
        name: "max_ratio_finite".into(),
        value: stats.max,
        limit: "finite".into(),
        pass: stats.max.is_finite(),
    });
    out.checks.push(Check::at_most("stability", stats.stability, stability_limit));
    out.metrics.insert("max_ratio".into(), stats.max);
    out.metrics.insert("median_ratio".into(), stats.median);
    out.metrics.insert("stability".into(), stats.stability);
    out.summary.insert("probe".into(), json!(pc));
    out.summary.insert("statistics".into(), json!(stats));
    out.plots.push((
        "probe.svg".into(),
        LinePlot::new("bilinear ratio by grid size", "N", "ratio")
            .with_series("max", stats.per_size.iter().map(|s| (s.n as f64, s.max)).collect())
            .with_series("median", stats.per_size.iter().map(|s| (s.n as f64, s.median)).collect()),
    ));
    Ok(out)
}

fn refine(cfg: &RunConfig, ctx: &Context) -> Result<Outcome, RunError> {
    let params = cfg.params();
    let eps = params.opt_f64_list("eps")?.unwrap_or_else(|| vec![0.4, 0.2, 0.1, 0.05]);
    let t_probe = params.f64_or("t_probe", 0.5)?;
    let kind = match params.opt_str("delta")?.unwrap_or("gaussian") {
        "gaussian" => DeltaKind::Gaussian,
        "band_limited" => DeltaKind::BandLimited,
        other => {
            return Err(RunError::config(format!(
                "experiment.params.delta: unknown value {other:?} (gaussian | band_limited)"
            )))
        }
    };
    let grid = cfg.require_grid()?;
    let prep = Prepared::new(cfg.require_system()?)?;
    let rcfg = RefinementConfig {
        n: grid.n,
        length: grid.length,
        model: prep.model,
        dt: cfg.time.dt,
        kind,
        amplitude_u: params.f64_or("amplitude_u", 1.0)?,
        amplitude_v: params.f64_or("amplitude_v", 0.5)?,
        probe_center: params.f64_or("center", -1.0)?,
        half_width: params.f64_or("half_width", 1.5)?,
        order: params.usize_or("order", 2)? as u32,
        sponge: cfg.time.sponge,
    };
    let min_initial_ratio = params.f64_or("min_initial_ratio", 2.0)?;
    let band = params.opt_f64_list("probe_band")?.unwrap_or_else(|| vec![0.8, 1.25]);
    params.finish()?;
    if band.len() != 2 {
        return Err(RunError::config("experiment.params.probe_band must have two entries"));
    }

    let rows = refinement_study(&eps, t_probe, &rcfg, ctx.exec)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut table = String::from("eps,norm_initial,norm_probe,ratio_initial,ratio_probe,fault\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{:e},{:e},{},{},{},{}",
            r.eps,
            r.norm_initial,
            opt(r.norm_probe),
            opt(r.ratio_initial),
            opt(r.ratio_probe),
            r.fault.as_deref().unwrap_or("")
        );
    }
    let mut out = Outcome {
        series: table,
        ..Default::default()
    };
    let faults: Vec<String> = rows
        .iter()
        .filter_map(|r| r.fault.as_ref().map(|f| format!("eps={}: {f}", r.eps)))
        .collect();
    if !faults.is_empty() {
        out.fault = Some(faults.join("; "));
    }
    let initial_min = rows.iter().filter_map(|r| r.ratio_initial).fold(f64::INFINITY, f64::min);
    out.checks.push(Check {
        name: "initial_ratio_min".into(),
        value: initial_min,
        limit: format!(">= {min_initial_ratio}"),
        pass: initial_min >= min_initial_ratio,
    });
    for r in rows.iter().skip(1).rev().take(2) {
        let v = r.ratio_probe.unwrap_or(f64::NAN);
        out.checks.push(Check {
            name: format!("probe_ratio_eps_{}", r.eps),
            value: v,
            limit: format!("in [{}, {}]", band[0], band[1]),
            pass: v >= band[0] && v <= band[1],
        });
        out.metrics.insert(format!("probe_ratio_eps_{}", r.eps), v);
    }
    out.metrics.insert("initial_ratio_min".into(), initial_min);
    out.summary.insert("frame".into(), json!(prep.frame()));
    out.summary.insert("refinement".into(), json!(rcfg));
    out.summary.insert("t_probe".into(), json!(t_probe));
    out.summary.insert("rows".into(), json!(rows));
    out.plots.push((
        "refinement.svg".into(),
        LinePlot::new("windowed norms against eps", "eps", "norm")
            .log_y()
            .with_series("t = 0", rows.iter().map(|r| (r.eps, r.norm_initial)).collect())
            .with_series(
                &format!("t = {t_probe}"),
                rows.iter().filter_map(|r| r.norm_probe.map(|n| (r.eps, n))).collect(),
            ),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_round_trip() {
        for e in [
            Experiment::Simulate,
            Experiment::Picard,
            Experiment::Diagnose,
            Experiment::OperatorCheck,
            Experiment::BilinearProbe,
            Experiment::Refine,
        ] {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert_eq!("operator_check".parse::<Experiment>().unwrap(), Experiment::OperatorCheck);
        assert!("sweep".parse::<Experiment>().is_err());
    }

    #[test]
    fn spectrum_points_are_ordered_by_wavenumber() {
        let g = SpectralGrid::new(16, 10.0).unwrap();
        let f = Field::from_fn(&g, |x| (-x * x).exp());
        let pts = spectrum_points(&f);
        assert_eq!(pts.len(), 16);
        assert!(pts.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn combined_data_matches_manual_sum() {
        let g = SpectralGrid::new(64, 20.0).unwrap();
        let spec = DataSpec::Combine {
            parts: vec![
                DataSpec::Gaussian {
                    amplitude: 1.0,
                    x0: 0.0,
                    width: 1.0,
                },
                DataSpec::Zero,
            ],
            weights: vec![2.0, 5.0],
        };
        let f = build_field(&spec, &g, 1.0).unwrap();
        let direct = Field::from_fn(&g, |x| 2.0 * (-x * x).exp());
        assert!(f.sub(&direct).max_abs() < 1e-14);
    }
}
