//! Time evolution of diagonal-dispersion KdV pairs.
//!
//! Two independent routes are provided:
//!
//! * [`Etdrk4`]: fourth-order exponential time differencing Runge-Kutta
//!   (Cox-Matthews scheme, Kassam-Trefethen contour evaluation of the
//!   phi-functions). The dispersive part is integrated exactly by the Airy
//!   multiplier.
//! * [`picard_iterate`]: successive substitution into the Duhamel integral
//!   `u(t) = V(t) u0 + int_0^t V(t - s) N(u(s)) ds`, discretised with composite
//!   four-point Gauss-Legendre quadrature in the interaction picture.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsSeries;
use crate::model::{EvolutionModel, ReducedCoefficients};
use crate::par::{self, Execution};
use crate::spectral::{sobolev_distance, Field, SpectralGrid};
use crate::{Error, Result};

/// Magnitude above which a physical value counts as blow-up.
pub const BLOW_UP_THRESHOLD: f64 = 1e12;

const CONTOUR_POINTS: usize = 32;

#[derive(Debug, Clone)]
pub struct State {
    pub u: Field,
    pub v: Field,
    pub t: f64,
}

impl State {
    pub fn new(u: Field, v: Field, t: f64) -> Result<Self> {
        u.ensure_same_grid(&v)?;
        Ok(State { u, v, t })
    }

    pub fn zeros(grid: &Arc<SpectralGrid>) -> Self {
        State {
            u: Field::zeros(grid),
            v: Field::zeros(grid),
            t: 0.0,
        }
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        self.u.grid()
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    /// Largest physical magnitude across both components.
    pub fn max_abs(&self) -> f64 {
        self.u.max_abs().max(self.v.max_abs())
    }

    pub fn dealias(&self) -> State {
        State {
            u: self.u.dealias(),
            v: self.v.dealias(),
            t: self.t,
        }
    }

    /// `sqrt(||du||_{H^s}^2 + ||dv||_{H^s}^2)`.
    pub fn distance(&self, other: &State, s: f64) -> f64 {
        sobolev_distance(&self.u, &other.u, s).hypot(sobolev_distance(&self.v, &other.v, s))
    }

    pub fn sobolev_norm(&self, s: f64) -> f64 {
        self.u.sobolev_norm(s).hypot(self.v.sobolev_norm(s))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridDescription {
    pub n: usize,
    pub length: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub step_size: f64,
    pub model: EvolutionModel,
    pub grid: GridDescription,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn last(&self) -> &State {
        self.states.last().expect("trajectories hold at least the initial state")
    }

    /// Common snapshot spacing, if the recorded times are uniform.
    pub fn uniform_spacing(&self) -> Option<f64> {
        if self.states.len() < 2 {
            return None;
        }
        let h = self.states[1].t - self.states[0].t;
        let uniform = self
            .states
            .windows(2)
            .all(|w| ((w[1].t - w[0].t) - h).abs() <= 1e-9 * h.abs().max(1e-300));
        uniform.then_some(h)
    }
}

/// Blow-up with the trajectory recorded up to the last good state.
#[derive(Debug)]
pub struct IntegrationFault {
    pub time: f64,
    pub partial: Box<Trajectory>,
}

impl fmt::Display for IntegrationFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "numerical blow-up at t = {}", self.time)
    }
}

impl std::error::Error for IntegrationFault {}

impl From<IntegrationFault> for Error {
    fn from(f: IntegrationFault) -> Self {
        Error::BlowUp { time: f.time }
    }
}

/// Spectral flux derivative `d/dx [A/2 u^2 + B/2 v^2 + C u v]` from physical
/// samples.
fn flux_derivative(
    grid: &Arc<SpectralGrid>,
    u: &[Complex64],
    v: &[Complex64],
    row: [f64; 3],
    dealias: bool,
) -> Field {
    let [a, b, c] = row;
    let samples = u
        .iter()
        .zip(v)
        .map(|(&x, &y)| x * x * (0.5 * a) + y * y * (0.5 * b) + x * y * c)
        .collect();
    let mut flux = Field::to_spectral_complex(grid, samples).expect("same grid");
    if dealias {
        flux.dealias_in_place();
    }
    flux.derivative(1)
}

/// Nonlinear right-hand side `(N_u, N_v)` with
/// `N_u = -a u u_x - b v v_x - c (uv)_x` (and the tilde row for `N_v`), every
/// product formed in physical space and dealiased.
pub fn rhs_nonlinear(state: &State, rc: &ReducedCoefficients) -> (Field, Field) {
    nonlinear_terms(&state.u, &state.v, rc, true)
}

fn nonlinear_terms(u: &Field, v: &Field, rc: &ReducedCoefficients, dealias: bool) -> (Field, Field) {
    let grid = u.grid();
    let up = u.to_physical();
    let vp = v.to_physical();
    let nu = flux_derivative(grid, &up, &vp, rc.u_row(), dealias).scale(-1.0);
    let nv = flux_derivative(grid, &up, &vp, rc.v_row(), dealias).scale(-1.0);
    (nu, nv)
}

/// `(a/2) d/dx(u^2) + (b/2) d/dx(v^2) + c d/dx(uv)` and its tilde partner,
/// without dealiasing. Shared by residual checks.
pub fn nonlinear_operator(u: &Field, v: &Field, rc: &ReducedCoefficients) -> (Field, Field) {
    let (nu, nv) = nonlinear_terms(u, v, rc, false);
    (nu.scale(-1.0), nv.scale(-1.0))
}

struct EtdCoefficients {
    e: Vec<Complex64>,
    e2: Vec<Complex64>,
    q: Vec<Complex64>,
    f1: Vec<Complex64>,
    f2: Vec<Complex64>,
    f3: Vec<Complex64>,
}

impl EtdCoefficients {
    fn new(grid: &SpectralGrid, dispersion: f64, dt: f64) -> Self {
        let n = grid.n();
        let mut c = EtdCoefficients {
            e: Vec::with_capacity(n),
            e2: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            f1: Vec::with_capacity(n),
            f2: Vec::with_capacity(n),
            f3: Vec::with_capacity(n),
        };
        let roots: Vec<Complex64> = (0..CONTOUR_POINTS)
            .map(|j| Complex64::from_polar(1.0, 2.0 * PI * (j as f64 + 0.5) / CONTOUR_POINTS as f64))
            .collect();
        let m = CONTOUR_POINTS as f64;
        for &xi in grid.xi() {
            // u_t = -d (i xi)^3 u = i d xi^3 u.
            let hl = Complex64::new(0.0, dispersion * xi * xi * xi * dt);
            c.e.push(hl.exp());
            c.e2.push((hl * 0.5).exp());
            let (mut q, mut f1, mut f2, mut f3) = (Complex64::default(), Complex64::default(), Complex64::default(), Complex64::default());
            for &r in &roots {
                let z = hl + r;
                let ez = z.exp();
                let z2 = z * z;
                let z3 = z2 * z;
                q += ((z * 0.5).exp() - 1.0) / z;
                f1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z2)) / z3;
                f2 += (2.0 + z + ez * (z - 2.0)) / z3;
                f3 += (-4.0 - 3.0 * z - z2 + ez * (4.0 - z)) / z3;
            }
            c.q.push(q * (dt / m));
            c.f1.push(f1 * (dt / m));
            c.f2.push(f2 * (dt / m));
            c.f3.push(f3 * (dt / m));
        }
        c
    }
}

/// ETDRK4 stepper with precomputed coefficients for a fixed step size.
pub struct Etdrk4 {
    model: EvolutionModel,
    dt: f64,
    cu: EtdCoefficients,
    cv: EtdCoefficients,
}

impl Etdrk4 {
    pub fn new(grid: &Arc<SpectralGrid>, model: &EvolutionModel, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        Ok(Etdrk4 {
            model: *model,
            dt,
            cu: EtdCoefficients::new(grid, model.dispersion[0], dt),
            cv: EtdCoefficients::new(grid, model.dispersion[1], dt),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// One step; fails with [`Error::BlowUp`] if the result is nonfinite or
    /// exceeds [`BLOW_UP_THRESHOLD`].
    pub fn step(&self, state: &State) -> Result<State> {
        let rc = &self.model.coeffs;
        let next = if self.model.is_linear() {
            State {
                u: apply_diag(&self.cu.e, &state.u),
                v: apply_diag(&self.cv.e, &state.v),
                t: state.t + self.dt,
            }
        } else {
            let (nu, nv) = rhs_nonlinear(state, rc);
            let a = State {
                u: lin2(&self.cu.e2, &state.u, &self.cu.q, &nu),
                v: lin2(&self.cv.e2, &state.v, &self.cv.q, &nv),
                t: state.t,
            };
            let (nau, nav) = rhs_nonlinear(&a, rc);
            let b = State {
                u: lin2(&self.cu.e2, &state.u, &self.cu.q, &nau),
                v: lin2(&self.cv.e2, &state.v, &self.cv.q, &nav),
                t: state.t,
            };
            let (nbu, nbv) = rhs_nonlinear(&b, rc);
            let c = State {
                u: lin2(&self.cu.e2, &a.u, &self.cu.q, &nbu.scale(2.0).sub(&nu)),
                v: lin2(&self.cv.e2, &a.v, &self.cv.q, &nbv.scale(2.0).sub(&nv)),
                t: state.t,
            };
            let (ncu, ncv) = rhs_nonlinear(&c, rc);
            State {
                u: combine_final(&self.cu, &state.u, &nu, &nau, &nbu, &ncu),
                v: combine_final(&self.cv, &state.v, &nv, &nav, &nbv, &ncv),
                t: state.t + self.dt,
            }
        };
        if !next.is_finite() || next.max_abs() > BLOW_UP_THRESHOLD {
            return Err(Error::BlowUp { time: next.t });
        }
        Ok(next)
    }
}

fn apply_diag(m: &[Complex64], f: &Field) -> Field {
    let coeffs = m.iter().zip(f.coeffs()).map(|(a, b)| a * b).collect();
    Field::from_coeffs(f.grid(), coeffs).expect("same length")
}

fn lin2(m1: &[Complex64], f: &Field, m2: &[Complex64], g: &Field) -> Field {
    let coeffs = m1
        .iter()
        .zip(f.coeffs())
        .zip(m2.iter().zip(g.coeffs()))
        .map(|((a, x), (b, y))| a * x + b * y)
        .collect();
    Field::from_coeffs(f.grid(), coeffs).expect("same length")
}

fn combine_final(c: &EtdCoefficients, v: &Field, nv: &Field, na: &Field, nb: &Field, nc: &Field) -> Field {
    let coeffs = (0..v.coeffs().len())
        .map(|k| {
            c.e[k] * v.coeffs()[k]
                + c.f1[k] * nv.coeffs()[k]
                + c.f2[k] * (na.coeffs()[k] + nb.coeffs()[k]) * 2.0
                + c.f3[k] * nc.coeffs()[k]
        })
        .collect();
    Field::from_coeffs(v.grid(), coeffs).expect("same length")
}

/// A single ETDRK4 step of size `dt`.
pub fn step_etdrk4(state: &State, dt: f64, model: &EvolutionModel) -> Result<State> {
    Etdrk4::new(state.grid(), model, dt)?.step(state)
}

/// Absorbing layer near the ends of the periodic box, applied after every
/// step as the exact factor `exp(-sigma(x) dt)`. `sigma` rises smoothly from
/// zero at `|x| = start_fraction * L/2` to `strength` at the box edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sponge {
    pub start_fraction: f64,
    pub strength: f64,
}

impl Sponge {
    pub fn profile(&self, grid: &SpectralGrid) -> Vec<f64> {
        let half = 0.5 * grid.length();
        let start = self.start_fraction * half;
        grid.x()
            .iter()
            .map(|&x| {
                let r = ((x.abs() - start) / (half - start)).clamp(0.0, 1.0);
                self.strength * smooth_step(r)
            })
            .collect()
    }
}

/// C-infinity step from 0 at `r <= 0` to 1 at `r >= 1`.
pub fn smooth_step(r: f64) -> f64 {
    let f = |s: f64| if s > 0.0 { (-1.0 / s).exp() } else { 0.0 };
    let a = f(r);
    let b = f(1.0 - r);
    if a + b == 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    /// Keep every `record_stride`-th step in the trajectory (the initial and
    /// final states are always kept).
    pub record_stride: usize,
    /// Call observers every `observer_stride` steps (and at the end).
    pub observer_stride: usize,
    pub sponge: Option<Sponge>,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            record_stride: 1,
            observer_stride: 1,
            sponge: None,
        }
    }
}

pub trait Observer {
    fn observe(&mut self, state: &State);
}

impl<F: FnMut(&State)> Observer for F {
    fn observe(&mut self, state: &State) {
        self(state)
    }
}

/// Integrates from `initial.t` to `initial.t + t_final` with steps of `dt`;
/// a shorter final step lands exactly on the end time.
pub fn integrate(
    initial: &State,
    t_final: f64,
    dt: f64,
    model: &EvolutionModel,
    opts: &IntegrateOptions,
    observers: &mut [&mut dyn Observer],
) -> std::result::Result<Trajectory, IntegrationFault> {
    let grid = initial.grid().clone();
    let mut traj = Trajectory {
        states: vec![initial.clone()],
        step_size: dt,
        model: *model,
        grid: GridDescription {
            n: grid.n(),
            length: grid.length(),
        },
    };
    let fault = |time: f64, traj: Trajectory| IntegrationFault {
        time,
        partial: Box::new(traj),
    };
    if !(t_final > 0.0 && dt > 0.0 && dt <= t_final * (1.0 + 1e-12)) {
        return Err(fault(initial.t, traj));
    }
    let stepper = Etdrk4::new(&grid, model, dt).map_err(|_| fault(initial.t, traj.clone()))?;
    let full_steps = ((t_final / dt) * (1.0 + 1e-12)).floor() as usize;
    let remainder = t_final - full_steps as f64 * dt;
    let tail = if remainder > 1e-12 * t_final {
        Some(Etdrk4::new(&grid, model, remainder).map_err(|_| fault(initial.t, traj.clone()))?)
    } else {
        None
    };
    let total = full_steps + usize::from(tail.is_some());
    let damping = opts.sponge.map(|s| {
        let prof = s.profile(&grid);
        (
            prof.iter().map(|p| (-p * dt).exp()).collect::<Vec<_>>(),
            prof.iter().map(|p| (-p * remainder).exp()).collect::<Vec<_>>(),
        )
    });
    let record = opts.record_stride.max(1);
    let observe = opts.observer_stride.max(1);

    for o in observers.iter_mut() {
        o.observe(initial);
    }
    let mut state = initial.dealias();
    state.t = initial.t;
    for i in 1..=total {
        let is_tail = i > full_steps;
        let stepper = if is_tail { tail.as_ref().expect("tail step") } else { &stepper };
        let mut next = match stepper.step(&state) {
            Ok(s) => s,
            Err(_) => return Err(fault(state.t + stepper.dt(), traj)),
        };
        next.t = if is_tail {
            initial.t + t_final
        } else {
            initial.t + i as f64 * dt
        };
        if let Some((full, part)) = &damping {
            let d = if is_tail { part } else { full };
            next.u = next.u.multiply_profile(d);
            next.v = next.v.multiply_profile(d);
        }
        state = next;
        let last = i == total;
        if i % observe == 0 || last {
            for o in observers.iter_mut() {
                o.observe(&state);
            }
        }
        if i % record == 0 || last {
            traj.states.push(state.clone());
        }
    }
    Ok(traj)
}

// Gauss-Legendre nodes and weights on [0, 1].
fn gauss_legendre4() -> ([f64; 4], [f64; 4]) {
    let x = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
    let w = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
    let mut c = [0.0; 4];
    let mut b = [0.0; 4];
    for i in 0..4 {
        c[i] = 0.5 * (x[i] + 1.0);
        b[i] = 0.5 * w[i];
    }
    (c, b)
}

/// `a[i][j] = int_0^{c_i} l_j(s) ds` for the Lagrange basis on the nodes.
fn collocation_matrix(c: &[f64; 4]) -> [[f64; 4]; 4] {
    let mut a = [[0.0; 4]; 4];
    for j in 0..4 {
        // Monomial coefficients of l_j.
        let mut poly = vec![1.0];
        let mut denom = 1.0;
        for m in 0..4 {
            if m == j {
                continue;
            }
            let mut next = vec![0.0; poly.len() + 1];
            for (p, &coef) in poly.iter().enumerate() {
                next[p + 1] += coef;
                next[p] -= coef * c[m];
            }
            poly = next;
            denom *= c[j] - c[m];
        }
        for i in 0..4 {
            let integral: f64 = poly
                .iter()
                .enumerate()
                .map(|(p, &coef)| coef * c[i].powi(p as i32 + 1) / (p as f64 + 1.0))
                .sum();
            a[i][j] = integral / denom;
        }
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub iterations: usize,
    /// Sobolev index of the distance used in the contraction report.
    pub norm_s: f64,
    /// Quadrature subintervals per unit time.
    pub subintervals_per_unit: usize,
    /// Stop once `d_n` falls below this multiple of the iterate's size.
    pub relative_tolerance: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            iterations: 30,
            norm_s: 0.0,
            subintervals_per_unit: 64,
            relative_tolerance: 1e-13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PicardStatus {
    Converged,
    IterationLimit,
    Diverged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionReport {
    /// `d_n = sup_t ||iterate_n(t) - iterate_{n-1}(t)||_{H^s}`, `n = 1, 2, ...`.
    pub distances: Vec<f64>,
    /// `d_{n+1} / d_n` (zero when `d_n = 0`).
    pub ratios: Vec<f64>,
    pub status: PicardStatus,
}

impl ContractionReport {
    /// Largest observed successive ratio; zero if none was observed.
    pub fn contraction_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(0.0, f64::max)
    }
}

/// Picard iteration for the Duhamel system on `[0, T]`. Iterate 0 is the
/// free evolution; iterate `n + 1` is the Duhamel map applied to iterate `n`.
pub fn picard_iterate(
    u0: &Field,
    v0: &Field,
    t_final: f64,
    model: &EvolutionModel,
    cfg: &PicardConfig,
) -> Result<(Trajectory, ContractionReport)> {
    picard_iterate_with(u0, v0, t_final, model, cfg, Execution::default())
}

pub fn picard_iterate_with(
    u0: &Field,
    v0: &Field,
    t_final: f64,
    model: &EvolutionModel,
    cfg: &PicardConfig,
    exec: Execution,
) -> Result<(Trajectory, ContractionReport)> {
    u0.ensure_same_grid(v0)?;
    if cfg.iterations < 1 {
        return Err(Error::InvalidArgument("Picard needs at least one iteration".into()));
    }
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::InvalidArgument(format!("T must be positive, got {t_final}")));
    }
    let grid = u0.grid().clone();
    let (c, b) = gauss_legendre4();
    let a = collocation_matrix(&c);
    let intervals = ((t_final * cfg.subintervals_per_unit as f64) - 1e-9).ceil().max(1.0) as usize;
    let h = t_final / intervals as f64;
    let [du, dv] = model.dispersion;
    let u0 = u0.dealias();
    let v0 = v0.dealias();

    // Node times: all Gauss nodes, then the interval endpoints t_1..t_J.
    let mut times = Vec::with_capacity(intervals * 5);
    for j in 0..intervals {
        for &ci in &c {
            times.push((j as f64 + ci) * h);
        }
    }
    for j in 1..=intervals {
        times.push(j as f64 * h);
    }
    let free = |t: f64| State {
        u: u0.propagate(t, du),
        v: v0.propagate(t, dv),
        t,
    };
    let mut iterate: Vec<State> = par::map(exec, &times, |&t| free(t));

    let mut distances = Vec::new();
    let mut ratios = Vec::new();
    let mut status = PicardStatus::IterationLimit;
    for _ in 0..cfg.iterations {
        // Interaction-picture integrand g(s) = V(-s) N(u(s)) at the Gauss nodes.
        let nodes: Vec<usize> = (0..intervals * 4).collect();
        let g: Vec<(Field, Field)> = par::map(exec, &nodes, |&idx| {
            let s = &iterate[idx];
            let (nu, nv) = rhs_nonlinear(s, &model.coeffs);
            (nu.propagate(-s.t, du), nv.propagate(-s.t, dv))
        });
        let mut next_w: Vec<(Field, Field)> = Vec::with_capacity(times.len());
        let mut endpoint_w = Vec::with_capacity(intervals);
        let mut w = (u0.clone(), v0.clone());
        for j in 0..intervals {
            let gj = &g[4 * j..4 * j + 4];
            for row in &a {
                let mut wu = w.0.clone();
                let mut wv = w.1.clone();
                for (m, gm) in gj.iter().enumerate() {
                    wu = wu.axpy(h * row[m], &gm.0);
                    wv = wv.axpy(h * row[m], &gm.1);
                }
                next_w.push((wu, wv));
            }
            for (m, gm) in gj.iter().enumerate() {
                w.0 = w.0.axpy(h * b[m], &gm.0);
                w.1 = w.1.axpy(h * b[m], &gm.1);
            }
            endpoint_w.push(w.clone());
        }
        next_w.extend(endpoint_w);
        let indices: Vec<usize> = (0..times.len()).collect();
        let next: Vec<State> = par::map(exec, &indices, |&i| State {
            u: next_w[i].0.propagate(times[i], du),
            v: next_w[i].1.propagate(times[i], dv),
            t: times[i],
        });
        let dists = par::map(exec, &indices, |&i| next[i].distance(&iterate[i], cfg.norm_s));
        let d = dists.into_iter().fold(0.0, f64::max);
        let size = next.iter().map(|s| s.sobolev_norm(cfg.norm_s)).fold(0.0, f64::max);
        if let Some(&prev) = distances.last() {
            ratios.push(if prev > 0.0 { d / prev } else { 0.0 });
        }
        distances.push(d);
        iterate = next;
        if !d.is_finite() {
            status = PicardStatus::Diverged;
            break;
        }
        let n = distances.len();
        if n >= 4 && (1..4).all(|k| distances[n - k] > distances[n - k - 1]) {
            status = PicardStatus::Diverged;
            break;
        }
        if d <= cfg.relative_tolerance * size {
            status = PicardStatus::Converged;
            break;
        }
    }

    let mut states = vec![State {
        u: u0.clone(),
        v: v0.clone(),
        t: 0.0,
    }];
    states.extend(iterate[intervals * 4..].iter().cloned());
    let traj = Trajectory {
        states,
        step_size: h,
        model: *model,
        grid: GridDescription {
            n: grid.n(),
            length: grid.length(),
        },
    };
    Ok((traj, ContractionReport { distances, ratios, status }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionRow {
    pub t_final: f64,
    pub ratio: f64,
    pub iterations: usize,
    pub status: PicardStatus,
}

/// Empirical contraction ratio of the Picard map for each window length.
pub fn contraction_vs_t(
    u0: &Field,
    v0: &Field,
    model: &EvolutionModel,
    t_list: &[f64],
    cfg: &PicardConfig,
    exec: Execution,
) -> Result<Vec<ContractionRow>> {
    if t_list.is_empty() || t_list.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidArgument("T-list must be positive and nonempty".into()));
    }
    if t_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("T-list must be ascending".into()));
    }
    // Rows run in parallel; each Picard solve stays sequential inside.
    let rows = par::map(exec, t_list, |&t| {
        let (_, report) = picard_iterate_with(u0, v0, t, model, cfg, Execution::Sequential)?;
        Ok(ContractionRow {
            t_final: t,
            ratio: report.contraction_ratio(),
            iterations: report.distances.len(),
            status: report.status,
        })
    });
    rows.into_iter().collect()
}

/// Fourth-order central first derivative at interior index `i`.
pub(crate) fn central4(values: [&Field; 5], h: f64) -> Field {
    let [m2, m1, _, p1, p2] = values;
    m2.scale(1.0)
        .axpy(-8.0, m1)
        .axpy(8.0, p1)
        .axpy(-1.0, p2)
        .scale(1.0 / (12.0 * h))
}

pub(crate) type SnapshotDerivatives = (f64, Vec<(usize, Field, Field)>);

/// Time derivatives at interior snapshots by fourth-order central differences.
pub(crate) fn snapshot_time_derivatives(traj: &Trajectory) -> Result<SnapshotDerivatives> {
    let n = traj.states.len();
    if n < 5 {
        return Err(Error::TooFewSnapshots { needed: 5, actual: n });
    }
    let h = traj
        .uniform_spacing()
        .ok_or_else(|| Error::InvalidArgument("residuals need uniformly spaced snapshots".into()))?;
    let s = &traj.states;
    let out = (2..n - 2)
        .map(|i| {
            let ut = central4([&s[i - 2].u, &s[i - 1].u, &s[i].u, &s[i + 1].u, &s[i + 2].u], h);
            let vt = central4([&s[i - 2].v, &s[i - 1].v, &s[i].v, &s[i + 1].v, &s[i + 2].v], h);
            (i, ut, vt)
        })
        .collect();
    Ok((h, out))
}

/// Discrete `L^2` residual of the evolution equations at every interior
/// snapshot, channels `residual_u` and `residual_v`.
pub fn pde_residual(traj: &Trajectory, model: &EvolutionModel) -> Result<DiagnosticsSeries> {
    let (_, derivs) = snapshot_time_derivatives(traj)?;
    let mut series = DiagnosticsSeries::new(&["residual_u", "residual_v"]);
    for (i, ut, vt) in derivs {
        let s = &traj.states[i];
        let (nu, nv) = nonlinear_operator(&s.u, &s.v, &model.coeffs);
        let ru = ut.axpy(model.dispersion[0], &s.u.derivative(3)).add(&nu);
        let rv = vt.axpy(model.dispersion[1], &s.v.derivative(3)).add(&nv);
        series.push(s.t, &[ru.l2_norm(), rv.l2_norm()])?;
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReducedCoefficients;

    fn grid() -> Arc<SpectralGrid> {
        SpectralGrid::new(256, 40.0).unwrap()
    }

    fn bump(g: &Arc<SpectralGrid>, amp: f64, c: f64) -> Field {
        Field::from_fn(g, |x| amp * (-(x - c) * (x - c) / 2.0).exp())
    }

    #[test]
    fn gauss_collocation_rows_integrate_polynomials() {
        let (c, b) = gauss_legendre4();
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let a = collocation_matrix(&c);
        for i in 0..4 {
            // int_0^{c_i} s^2 ds = c_i^3 / 3.
            let approx: f64 = (0..4).map(|j| a[i][j] * c[j] * c[j]).sum();
            assert!((approx - c[i].powi(3) / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rhs_zero_and_cosine_examples() {
        let g = grid();
        let z = State::zeros(&g);
        let rc = ReducedCoefficients { a: 1.3, b: 0.2, c: 0.7, a_tilde: -0.4, b_tilde: 0.9, c_tilde: 0.1 };
        let (nu, nv) = rhs_nonlinear(&z, &rc);
        assert_eq!(nu.l2_norm(), 0.0);
        assert_eq!(nv.l2_norm(), 0.0);

        let xi0 = g.xi()[5];
        let u = Field::from_fn(&g, |x| (xi0 * x).cos());
        let s = State::new(u, Field::zeros(&g), 0.0).unwrap();
        let (nu, nv) = rhs_nonlinear(&s, &rc);
        for ((x, a), b) in g.x().iter().zip(nu.to_physical_real()).zip(nv.to_physical_real()) {
            let sin2 = (2.0 * xi0 * x).sin();
            assert!((a - rc.a * xi0 / 2.0 * sin2).abs() < 1e-12);
            assert!((b - rc.a_tilde * xi0 / 2.0 * sin2).abs() < 1e-12);
        }
    }

    #[test]
    fn rhs_equal_components_when_row_sums_match() {
        let g = grid();
        let u = bump(&g, 0.8, 1.0);
        let s = State::new(u.clone(), u, 0.0).unwrap();
        let rc = ReducedCoefficients { a: 1.0, b: 0.5, c: 0.25, a_tilde: 0.5, b_tilde: 0.0, c_tilde: 0.75 };
        let (nu, nv) = rhs_nonlinear(&s, &rc);
        assert!(nu.sub(&nv).l2_norm() < 1e-13 * nu.l2_norm());
    }

    #[test]
    fn linear_step_is_the_airy_group() {
        let g = grid();
        let s = State::new(bump(&g, 1.0, 0.0), bump(&g, 0.5, 2.0), 0.0).unwrap();
        let m = EvolutionModel::from(ReducedCoefficients::zero());
        let next = step_etdrk4(&s, 0.01, &m).unwrap();
        assert!(next.u.sub(&s.u.airy_propagate(0.01)).l2_norm() < 1e-12);
        assert!(next.v.sub(&s.v.airy_propagate(0.01)).l2_norm() < 1e-12);
        assert!(step_etdrk4(&s, 0.0, &m).is_err());
    }

    #[test]
    fn integrate_final_time_and_single_step() {
        let g = grid();
        let s = State::new(bump(&g, 0.3, 0.0), Field::zeros(&g), 0.0).unwrap();
        let m = EvolutionModel::from(ReducedCoefficients::decoupled(1.0));
        let traj = integrate(&s, 0.05, 0.05, &m, &IntegrateOptions::default(), &mut []).unwrap();
        assert_eq!(traj.states.len(), 2);
        let traj = integrate(&s, 0.105, 0.01, &m, &IntegrateOptions::default(), &mut []).unwrap();
        assert_eq!(traj.states.len(), 12);
        assert!((traj.last().t - 0.105).abs() < 1e-15);
        assert!(traj.uniform_spacing().is_none());
    }

    #[test]
    fn zero_data_stays_zero() {
        let g = grid();
        let m = EvolutionModel::from(ReducedCoefficients { a: 1.0, b: 1.0, c: 1.0, a_tilde: 1.0, b_tilde: 1.0, c_tilde: 1.0 });
        let traj = integrate(&State::zeros(&g), 0.1, 0.01, &m, &IntegrateOptions::default(), &mut []).unwrap();
        assert!(traj.states.iter().all(|s| s.u.l2_norm() == 0.0 && s.v.l2_norm() == 0.0));
    }

    #[test]
    fn blow_up_is_reported_with_partial_trajectory() {
        let g = SpectralGrid::new(64, 10.0).unwrap();
        let s = State::new(bump(&g, 1e6, 0.0), Field::zeros(&g), 0.0).unwrap();
        let m = EvolutionModel::from(ReducedCoefficients::decoupled(50.0));
        let err = integrate(&s, 10.0, 0.5, &m, &IntegrateOptions::default(), &mut []).unwrap_err();
        assert!(err.time > 0.0);
        assert!(!err.partial.states.is_empty());
    }

    #[test]
    fn observers_see_every_stride() {
        let g = grid();
        let s = State::new(bump(&g, 0.3, 0.0), Field::zeros(&g), 0.0).unwrap();
        let m = EvolutionModel::from(ReducedCoefficients::decoupled(1.0));
        let mut seen = Vec::new();
        let mut obs = |st: &State| seen.push(st.t);
        let opts = IntegrateOptions { observer_stride: 2, record_stride: 5, sponge: None };
        let traj = integrate(&s, 0.1, 0.01, &m, &opts, &mut [&mut obs]).unwrap();
        assert_eq!(seen.len(), 6);
        assert_eq!(traj.states.len(), 3);
    }

    #[test]
    fn picard_trivial_cases() {
        let g = grid();
        let z = Field::zeros(&g);
        let m = EvolutionModel::from(ReducedCoefficients::decoupled(1.0));
        let (_, rep) = picard_iterate(&z, &z, 0.1, &m, &PicardConfig::default()).unwrap();
        assert_eq!(rep.distances, vec![0.0]);
        assert_eq!(rep.status, PicardStatus::Converged);

        let u0 = bump(&g, 1.0, 0.0);
        let lin = EvolutionModel::from(ReducedCoefficients::zero());
        let (traj, rep) = picard_iterate(&u0, &z, 0.1, &lin, &PicardConfig::default()).unwrap();
        assert_eq!(rep.distances[0], 0.0);
        assert!(traj.last().u.sub(&u0.dealias().airy_propagate(0.1)).l2_norm() < 1e-14);
        assert!(picard_iterate(&u0, &z, 0.1, &lin, &PicardConfig { iterations: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn sponge_profile_shape() {
        let g = grid();
        let p = Sponge { start_fraction: 0.5, strength: 10.0 }.profile(&g);
        let mid = g.n() / 2;
        assert_eq!(p[mid], 0.0);
        assert!((p[0] - 10.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| (0.0..=10.0).contains(&v)));
    }
}
