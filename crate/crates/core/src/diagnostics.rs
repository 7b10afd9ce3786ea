//! Conserved functionals, localized norms, spectral decay fits, refinement
//! studies and discrete Bourgain norms.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate, smooth_step, IntegrateOptions, Observer, Sponge, State, Trajectory};
use crate::model::{modal_to_original, Diagonalization, EvolutionModel, OriginalCoefficients};
use crate::operator_lab::{bump, SpaceTimeBlock, Taper};
use crate::par::{self, Execution};
use crate::rough_data::{dirac_approx, DeltaKind};
use crate::spectral::{signed_index, Field, SpectralGrid};
use crate::{io, Error, Result};

/// Floor in the relative-drift denominator.
pub const DRIFT_FLOOR: f64 = 1e-14;

/// Spectral magnitudes below this are dropped before a decay fit.
pub const FIT_FLOOR: f64 = 1e-14;

/// Minimum number of wavenumbers in a decay fit.
pub const FIT_MIN_MODES: usize = 16;

/// Fraction of the window half-width used by each smooth mask transition.
pub const MASK_TRANSITION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSeries {
    times: Vec<f64>,
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl DiagnosticsSeries {
    pub fn new(channels: &[&str]) -> Self {
        DiagnosticsSeries {
            times: Vec::new(),
            names: channels.iter().map(|s| s.to_string()).collect(),
            values: vec![Vec::new(); channels.len()],
        }
    }

    pub fn push(&mut self, t: f64, row: &[f64]) -> Result<()> {
        if row.len() != self.names.len() {
            return Err(Error::LengthMismatch {
                expected: self.names.len(),
                actual: row.len(),
            });
        }
        if let Some(&last) = self.times.last() {
            if !(t > last) {
                return Err(Error::InvalidArgument(format!(
                    "series times must increase strictly ({t} after {last})"
                )));
            }
        }
        self.times.push(t);
        for (col, &v) in self.values.iter_mut().zip(row) {
            col.push(v);
        }
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_slice())
    }

    /// Largest value of a channel, ignoring NaN.
    pub fn channel_max(&self, name: &str) -> Option<f64> {
        self.channel(name).map(|c| c.iter().copied().fold(0.0, f64::max))
    }

    /// Relative drift `|Q(t) - Q(t0)| / max(|Q(t0)|, floor)` of every channel,
    /// channels renamed `drift_<name>`.
    pub fn relative_drift(&self) -> DiagnosticsSeries {
        let names: Vec<String> = self.names.iter().map(|n| format!("drift_{n}")).collect();
        let values = self
            .values
            .iter()
            .map(|col| {
                let q0 = col.first().copied().unwrap_or(0.0);
                let denom = q0.abs().max(DRIFT_FLOOR);
                col.iter().map(|q| (q - q0).abs() / denom).collect()
            })
            .collect();
        DiagnosticsSeries {
            times: self.times.clone(),
            names,
            values,
        }
    }

    /// CSV with a header row `t,<channels...>`; values in shortest
    /// round-trip exponent notation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t:e}"));
            for col in &self.values {
                out.push_str(&format!(",{:e}", col[i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_text(path, &self.to_csv())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conserved {
    pub e1u: f64,
    pub e1v: f64,
    pub e3: f64,
    pub e4: f64,
}

pub const CONSERVED_CHANNELS: [&str; 4] = ["E1u", "E1v", "E3", "E4"];

impl Conserved {
    pub fn as_array(&self) -> [f64; 4] {
        [self.e1u, self.e1v, self.e3, self.e4]
    }
}

/// Masses, energy and Hamiltonian of a state in the original variables.
///
/// `E4 = int b2 u_x^2 + v_x^2 + 2 b2 a3 u_x v_x - b2 u^3/3 - b2 a2 u^2 v
/// - b2 a1 u v^2 - v^3/3`, with each cubic monomial appearing once.
pub fn conserved(state: &State, oc: &OriginalCoefficients) -> Conserved {
    let u = &state.u;
    let v = &state.v;
    let grid = u.grid();
    let e1u = u.mass();
    let e1v = v.mass();
    let e3 = oc.b2 * u.l2_norm().powi(2) + oc.b1 * v.l2_norm().powi(2);
    let up = u.to_physical_real();
    let vp = v.to_physical_real();
    let ux = u.derivative(1).to_physical_real();
    let vx = v.derivative(1).to_physical_real();
    let mut sum = 0.0;
    for i in 0..grid.n() {
        let (a, b, ax, bx) = (up[i], vp[i], ux[i], vx[i]);
        sum += oc.b2 * ax * ax + bx * bx + 2.0 * oc.b2 * oc.a3 * ax * bx
            - oc.b2 * a * a * a / 3.0
            - oc.b2 * oc.a2 * a * a * b
            - oc.b2 * oc.a1 * a * b * b
            - b * b * b / 3.0;
    }
    Conserved {
        e1u,
        e1v,
        e3,
        e4: grid.dx() * sum,
    }
}

/// Conserved quantities of every state (original variables).
pub fn conserved_series(states: &[State], oc: &OriginalCoefficients) -> Result<DiagnosticsSeries> {
    let mut series = DiagnosticsSeries::new(&CONSERVED_CHANNELS);
    for s in states {
        series.push(s.t, &conserved(s, oc).as_array())?;
    }
    Ok(series)
}

/// Relative drift of `E1u, E1v, E3, E4` along a trajectory in original variables.
pub fn conservation_drift(traj: &Trajectory, oc: &OriginalCoefficients) -> Result<DiagnosticsSeries> {
    if traj.states.len() < 2 {
        return Err(Error::TooFewSnapshots {
            needed: 2,
            actual: traj.states.len(),
        });
    }
    Ok(conserved_series(&traj.states, oc)?.relative_drift())
}

/// Records conserved quantities during integration. States are mapped from
/// modal to original variables first when a diagonalization is given.
pub struct ConservationObserver {
    oc: OriginalCoefficients,
    basis: Option<Diagonalization>,
    series: DiagnosticsSeries,
    error: Option<Error>,
}

impl ConservationObserver {
    pub fn new(oc: OriginalCoefficients, basis: Option<Diagonalization>) -> Self {
        ConservationObserver {
            oc,
            basis,
            series: DiagnosticsSeries::new(&CONSERVED_CHANNELS),
            error: None,
        }
    }

    pub fn finish(self) -> Result<DiagnosticsSeries> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.series),
        }
    }
}

impl Observer for ConservationObserver {
    fn observe(&mut self, state: &State) {
        let c = match &self.basis {
            Some(d) => conserved(&modal_to_original(state, d), &self.oc),
            None => conserved(state, &self.oc),
        };
        if let Err(e) = self.series.push(state.t, &c.as_array()) {
            self.error.get_or_insert(e);
        }
    }
}

/// Share of `||u||^2 + ||v||^2` carried by the outer tenth of the box on
/// each side (`|x| >= 0.4 L`). Zero for the zero state.
pub fn edge_fraction(state: &State) -> f64 {
    let grid = state.grid();
    let cut = 0.4 * grid.length();
    let (mut edge, mut total) = (0.0, 0.0);
    let up = state.u.to_physical_real();
    let vp = state.v.to_physical_real();
    for (i, &x) in grid.x().iter().enumerate() {
        let w = up[i] * up[i] + vp[i] * vp[i];
        total += w;
        if x.abs() >= cut {
            edge += w;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        edge / total
    }
}

/// Smooth plateau mask: one on `|x - c| <= (1 - theta) h`, zero beyond `h`,
/// with `theta = MASK_TRANSITION`. A window covering the whole box is the
/// constant one.
pub fn window_mask(grid: &SpectralGrid, center: f64, half_width: f64) -> Result<Vec<f64>> {
    let l = grid.length();
    let tol = 1e-12 * l;
    if !(half_width > 0.0) || !center.is_finite() {
        return Err(Error::InvalidArgument(format!("bad window ({center}, {half_width})")));
    }
    if center.abs() <= tol && (half_width - 0.5 * l).abs() <= tol {
        return Ok(vec![1.0; grid.n()]);
    }
    if center - half_width < -0.5 * l - tol || center + half_width > 0.5 * l + tol {
        return Err(Error::InvalidArgument(format!(
            "window [{}, {}] leaves the domain [{}, {}]",
            center - half_width,
            center + half_width,
            -0.5 * l,
            0.5 * l
        )));
    }
    let ramp = MASK_TRANSITION * half_width;
    Ok(grid
        .x()
        .iter()
        .map(|&x| smooth_step((half_width - (x - center).abs()) / ramp))
        .collect())
}

/// `(sum_j C(k, j) int mask |d^j f|^2)^{1/2}` over a smooth window.
pub fn windowed_sobolev(field: &Field, center: f64, half_width: f64, k: u32) -> Result<f64> {
    if k > 4 {
        return Err(Error::InvalidArgument(format!("windowed Sobolev order {k} > 4")));
    }
    let grid = field.grid();
    let mask = window_mask(grid, center, half_width)?;
    let mut total = 0.0;
    let mut binom = 1.0;
    for j in 0..=k {
        let d = field.derivative(j).to_physical();
        let s: f64 = d.iter().zip(&mask).map(|(c, m)| m * c.norm_sqr()).sum();
        total += binom * s;
        binom = binom * (k - j) as f64 / (j + 1) as f64;
    }
    Ok((grid.dx() * total).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GevreyFit {
    /// Decay rate: minus the slope of `log |F|` against `|xi|`.
    pub sigma: f64,
    pub intercept: f64,
    pub band: (f64, f64),
    /// RMS of the linear fit.
    pub residual: f64,
    /// RMS of a quadratic fit over the same points; much smaller than
    /// `residual` signals a non-exponential spectrum.
    pub quadratic_residual: f64,
    pub modes: usize,
}

/// `[xi_max/8, xi_max/3]`.
pub fn default_fit_band(grid: &SpectralGrid) -> (f64, f64) {
    (grid.xi_max() / 8.0, grid.xi_max() / 3.0)
}

pub fn analyticity_fit(field: &Field, band: (f64, f64)) -> Result<GevreyFit> {
    let (lo, hi) = band;
    if !(lo >= 0.0 && lo < hi) {
        return Err(Error::EmptyBand(format!("band ({lo}, {hi}) is not an interval")));
    }
    let grid = field.grid();
    let n = grid.n();
    let nyq = grid.nyquist();
    let mut pts = Vec::new();
    for k in 1..nyq {
        let xi = grid.xi()[k];
        if xi < lo || xi > hi {
            continue;
        }
        let mag = 0.5 * (field.continuum_spectrum(k).norm() + field.continuum_spectrum(n - k).norm());
        if mag > FIT_FLOOR {
            pts.push((xi, mag.ln()));
        }
    }
    if pts.len() < FIT_MIN_MODES {
        return Err(Error::EmptyBand(format!(
            "{} usable modes in [{lo}, {hi}] (need {FIT_MIN_MODES})",
            pts.len()
        )));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / m).sqrt();
    let quadratic_residual = quadratic_fit_rms(&pts, mx, sxx.sqrt() / m.sqrt());
    Ok(GevreyFit {
        sigma: -slope,
        intercept,
        band,
        residual,
        quadratic_residual,
        modes: pts.len(),
    })
}

fn quadratic_fit_rms(pts: &[(f64, f64)], center: f64, spread: f64) -> f64 {
    let spread = if spread > 0.0 { spread } else { 1.0 };
    let mut a = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for &(x, y) in pts {
        let z = (x - center) / spread;
        let basis = [1.0, z, z * z];
        for i in 0..3 {
            rhs[i] += basis[i] * y;
            for j in 0..3 {
                a[i][j] += basis[i] * basis[j];
            }
        }
    }
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&a);
    let mut coef = [0.0; 3];
    for (c, out) in coef.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][c] = rhs[r];
        }
        *out = det(&m) / d;
    }
    let sum: f64 = pts
        .iter()
        .map(|&(x, y)| {
            let z = (x - center) / spread;
            (y - coef[0] - coef[1] * z - coef[2] * z * z).powi(2)
        })
        .sum();
    (sum / pts.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub n: usize,
    pub length: f64,
    pub model: EvolutionModel,
    pub dt: f64,
    pub kind: DeltaKind,
    pub amplitude_u: f64,
    pub amplitude_v: f64,
    pub probe_center: f64,
    pub half_width: f64,
    pub order: u32,
    pub sponge: Option<Sponge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub eps: f64,
    pub norm_initial: f64,
    pub norm_probe: Option<f64>,
    /// Norm ratio against the next coarser `eps` (absent on the first row).
    pub ratio_initial: Option<f64>,
    pub ratio_probe: Option<f64>,
    pub fault: Option<String>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Evolves `(A_u, A_v) * delta_eps` to `t_probe` for every `eps` and tabulates
/// windowed norms at both times. A failed run yields a row with `fault` set.
pub fn refinement_study(
    eps_list: &[f64],
    t_probe: f64,
    cfg: &RefinementConfig,
    exec: Execution,
) -> Result<Vec<RefinementRow>> {
    if eps_list.is_empty() || eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("eps list must be non-empty and strictly decreasing".into()));
    }
    if !(t_probe > 0.0) {
        return Err(Error::InvalidArgument(format!("t_probe must be positive, got {t_probe}")));
    }
    let grid = SpectralGrid::new(cfg.n, cfg.length)?;
    let norm = |s: &State| -> Result<f64> {
        let nu = windowed_sobolev(&s.u, cfg.probe_center, cfg.half_width, cfg.order)?;
        let nv = windowed_sobolev(&s.v, cfg.probe_center, cfg.half_width, cfg.order)?;
        Ok(nu.hypot(nv))
    };
    // Validate the window once so configuration errors are not reported per row.
    norm(&State::zeros(&grid))?;
    let opts = IntegrateOptions {
        record_stride: usize::MAX,
        observer_stride: usize::MAX,
        sponge: cfg.sponge,
    };
    let rows = par::map(exec, eps_list, |&eps| -> Result<(f64, std::result::Result<f64, String>)> {
        let delta = dirac_approx(&grid, eps, cfg.kind)?;
        let s0 = State::new(delta.scale(cfg.amplitude_u), delta.scale(cfg.amplitude_v), 0.0)?;
        let n0 = norm(&s0)?;
        let probe = match integrate(&s0, t_probe, cfg.dt, &cfg.model, &opts, &mut []) {
            Ok(traj) => Ok(norm(traj.last())?),
            Err(fault) => Err(fault.to_string()),
        };
        Ok((n0, probe))
    });
    let mut out: Vec<RefinementRow> = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let (n0, probe) = r?;
        let (norm_probe, fault) = match probe {
            Ok(v) => (Some(v), None),
            Err(msg) => (None, Some(msg)),
        };
        let prev = out.last();
        let ratio_initial = prev.map(|p| ratio(n0, p.norm_initial));
        let ratio_probe = match (prev.and_then(|p| p.norm_probe), norm_probe) {
            (Some(a), Some(b)) => Some(ratio(b, a)),
            _ => None,
        };
        out.push(RefinementRow {
            eps: eps_list[i],
            norm_initial: n0,
            norm_probe,
            ratio_initial,
            ratio_probe,
            fault,
        });
    }
    Ok(out)
}

fn bourgain_weight(xi: f64, tau: f64, s: f64, b: f64) -> f64 {
    (1.0 + (tau - xi * xi * xi).abs()).powf(2.0 * b) * (1.0 + xi.abs()).powf(2.0 * s)
}

/// Discrete `X^s_b` norm of a tapered block:
/// `((2 pi)^{-2} sum (1+|tau - xi^3|)^{2b} (1+|xi|)^{2s} |u^(xi, tau)|^2 dxi dtau)^{1/2}`
/// with `u^ = dx dt * DFT2(u)` and the transform kernel `exp(-i (xi x + tau t))`.
pub fn bourgain_norm(block: &SpaceTimeBlock, s: f64, b: f64) -> Result<f64> {
    if block.taper() == Taper::None {
        return Err(Error::Untapered);
    }
    let grid = block.grid();
    let n = grid.n();
    let m = block.len();
    let dt = block.dt();
    let fft = FftPlanner::new().plan_fft_forward(m);
    let taus: Vec<f64> = (0..m)
        .map(|j| 2.0 * PI * signed_index(j, m) as f64 / (m as f64 * dt))
        .collect();
    let frames = block.frames();
    let mut buf = vec![Complex64::default(); m];
    let mut total = 0.0;
    for k in 0..n {
        let xi = grid.xi()[k];
        for (slot, f) in buf.iter_mut().zip(frames) {
            *slot = f.coeffs()[k];
        }
        fft.process(&mut buf);
        for (c, &tau) in buf.iter().zip(&taus) {
            total += bourgain_weight(xi, tau, s, b) * c.norm_sqr();
        }
    }
    Ok((grid.dx() * dt / m as f64 * total).sqrt())
}

/// `||d_x(u v)||_{X^s_{b'-1}} / (||u||_{X^s_b} ||v||_{X^s_b})`; `None` when a
/// factor vanishes.
pub fn bilinear_ratio(u: &SpaceTimeBlock, v: &SpaceTimeBlock, s: f64, b: f64, b_prime: f64) -> Result<Option<f64>> {
    let nu = bourgain_norm(u, s, b)?;
    let nv = bourgain_norm(v, s, b)?;
    if nu == 0.0 || nv == 0.0 {
        return Ok(None);
    }
    let prod = u.product(v)?.derivative_x(1);
    let top = bourgain_norm(&prod, s, b_prime - 1.0)?;
    Ok(Some(top / (nu * nv)))
}

pub fn check_probe_hypotheses(s: f64, b: f64, b_prime: f64) -> Result<()> {
    if !(s > -0.75) {
        return Err(Error::InvalidArgument(format!("bilinear probe needs s > -3/4, got {s}")));
    }
    if !(0.5 < b && b < b_prime && b_prime < 7.0 / 12.0) {
        return Err(Error::InvalidArgument(format!(
            "bilinear probe needs 1/2 < b < b' < 7/12, got b = {b}, b' = {b_prime}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub s: f64,
    pub b: f64,
    pub b_prime: f64,
    pub trials: usize,
    pub sizes: Vec<usize>,
    pub length: f64,
    /// Duration of the tapered time window.
    pub window: f64,
    /// Largest detuning `|tau - xi^3|` of the random modes.
    pub detuning: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            s: -0.5,
            b: 0.52,
            b_prime: 0.56,
            trials: 100,
            sizes: vec![64, 128, 256],
            length: 8.0 * PI,
            window: 1.0,
            detuning: 4.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStatistics {
    pub n: usize,
    pub time_samples: usize,
    pub max: f64,
    pub median: f64,
    /// Trials whose denominator vanished; excluded from the statistics.
    pub zero_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStatistics {
    pub per_size: Vec<SizeStatistics>,
    pub max: f64,
    pub median: f64,
    /// Largest over smallest per-size maximum.
    pub stability: f64,
}

/// Time samples for a block of spatial size `n`: odd, at least `n + 1`, and
/// enough to resolve `|tau|` up to the cubic of twice the band edge.
pub fn probe_time_samples(n: usize, length: f64, window: f64, detuning: f64) -> usize {
    let xi_band = (n / 8) as f64 * 2.0 * PI / length;
    let tau_max = 1.25 * ((2.0 * xi_band).powi(3) + 2.0 * detuning) + 64.0 / window;
    let needed = (tau_max * window / PI).ceil() as usize;
    let m = needed.max(n + 1);
    m | 1
}

/// Random near-resonant block: a bump-tapered sum of modes
/// `phi_k exp(i (xi_k x + (xi_k^3 + delta_k) t))` over `|k| <= n/8`.
pub fn random_probe_block(grid: &Arc<SpectralGrid>, cfg: &ProbeConfig, rng: &mut ChaCha8Rng) -> Result<SpaceTimeBlock> {
    let n = grid.n();
    let m = probe_time_samples(n, grid.length(), cfg.window, cfg.detuning);
    let dt = cfg.window / m as f64;
    let times: Vec<f64> = (0..m).map(|j| j as f64 * dt).collect();
    let band = (n / 8) as i64;
    let modes: Vec<(usize, f64, Complex64, f64)> = (0..n)
        .filter(|&k| signed_index(k, n).abs() <= band)
        .map(|k| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let det = cfg.detuning * (2.0 * rng.random::<f64>() - 1.0);
            (k, grid.xi()[k], Complex64::new(re, im), det)
        })
        .collect();
    let frames = times
        .iter()
        .map(|&t| {
            let mut c = vec![Complex64::default(); n];
            for &(k, xi, phi, det) in &modes {
                c[k] = phi * Complex64::from_polar(1.0, (xi * xi * xi + det) * t);
            }
            Field::from_coeffs(grid, c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpaceTimeBlock::new(grid, times, frames, Taper::None)?.apply_bump_taper())
}

/// Random-block estimate of the bilinear constant over the configured sizes.
/// Trials are independent and seeded from `(seed, n, trial)`.
pub fn bilinear_probe(cfg: &ProbeConfig, exec: Execution) -> Result<ProbeStatistics> {
    check_probe_hypotheses(cfg.s, cfg.b, cfg.b_prime)?;
    if cfg.trials == 0 || cfg.sizes.is_empty() {
        return Err(Error::InvalidArgument("probe needs at least one trial and one size".into()));
    }
    let mut per_size = Vec::new();
    let mut all = Vec::new();
    for &n in &cfg.sizes {
        let grid = SpectralGrid::new(n, cfg.length)?;
        let results = par::map_indexed(exec, cfg.trials, |trial| -> Result<Option<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((n as u64) << 32) ^ trial as u64);
            let u = random_probe_block(&grid, cfg, &mut rng)?;
            let v = random_probe_block(&grid, cfg, &mut rng)?;
            bilinear_ratio(&u, &v, cfg.s, cfg.b, cfg.b_prime)
        });
        let mut ratios = Vec::new();
        let mut zero = 0;
        for r in results {
            match r? {
                Some(x) => ratios.push(x),
                None => zero += 1,
            }
        }
        all.extend_from_slice(&ratios);
        per_size.push(SizeStatistics {
            n,
            time_samples: probe_time_samples(n, cfg.length, cfg.window, cfg.detuning),
            max: ratios.iter().copied().fold(0.0, f64::max),
            median: median(&mut ratios),
            zero_trials: zero,
        });
    }
    let maxima: Vec<f64> = per_size.iter().map(|p| p.max).collect();
    let hi = maxima.iter().copied().fold(0.0, f64::max);
    let lo = maxima.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ProbeStatistics {
        per_size,
        max: hi,
        median: median(&mut all),
        stability: ratio(hi, lo),
    })
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Bump-taper value at sample `j` of an `m`-sample window; exposed for tests
/// that build tapered blocks by hand.
pub fn taper_weight(j: usize, m: usize) -> f64 {
    bump(2.0 * (j as f64 + 0.5) / m as f64 - 1.0)
}

/// Named channel statistics for JSON summaries.
pub fn channel_maxima(series: &DiagnosticsSeries) -> BTreeMap<String, f64> {
    series
        .names()
        .iter()
        .map(|n| (n.clone(), series.channel_max(n).unwrap_or(0.0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReducedCoefficients;

    fn oc(a1: f64, a2: f64, a3: f64) -> OriginalCoefficients {
        OriginalCoefficients::new(a1, a2, a3, 1.0, 1.0)
    }

    #[test]
    fn series_rules_and_csv() {
        let mut s = DiagnosticsSeries::new(&["a", "b"]);
        s.push(0.0, &[1.0, 2.0]).unwrap();
        s.push(0.5, &[1.5, 0.25]).unwrap();
        assert!(s.push(0.5, &[0.0, 0.0]).is_err());
        assert!(s.push(1.0, &[0.0]).is_err());
        assert_eq!(s.channel("b").unwrap(), &[2.0, 0.25]);
        assert!(s.channel("c").is_none());
        assert_eq!(s.to_csv(), "t,a,b\n0e0,1e0,2e0\n5e-1,1.5e0,2.5e-1\n");
        let d = s.relative_drift();
        assert_eq!(d.channel("drift_a").unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn edge_fraction_sees_only_the_outer_tenth() {
        let g = SpectralGrid::new(256, 40.0).unwrap();
        assert_eq!(edge_fraction(&State::zeros(&g)), 0.0);
        let centred = Field::from_fn(&g, |x| (-x * x).exp());
        let s = State::new(centred.clone(), centred.scale(0.5), 0.0).unwrap();
        assert!(edge_fraction(&s) < 1e-25);
        let flat = Field::from_fn(&g, |_| 1.0);
        let s = State::new(flat, Field::zeros(&g), 0.0).unwrap();
        let count = g.x().iter().filter(|x| x.abs() >= 16.0).count();
        assert_eq!(count, 51);
        assert!((edge_fraction(&s) - 51.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn conserved_examples() {
        let g = SpectralGrid::new(128, 10.0).unwrap();
        let z = State::zeros(&g);
        assert_eq!(conserved(&z, &oc(0.3, 0.2, 0.1)).as_array(), [0.0; 4]);
        let l = g.length();
        let u = Field::from_fn(&g, |x| (2.0 * PI * x / l).sin());
        let s = State::new(u, Field::zeros(&g), 0.0).unwrap();
        let c = conserved(&s, &oc(0.3, 0.2, 0.1));
        assert!(c.e1u.abs() < 1e-13);
        assert!((c.e3 - l / 2.0).abs() < 1e-12);
        assert!((c.e4 - 2.0 * PI * PI / l).abs() < 1e-12);
    }

    #[test]
    fn cubic_terms_counted_once() {
        let g = SpectralGrid::new(128, 10.0).unwrap();
        let s = State::new(Field::from_fn(&g, |_| 1.0), Field::from_fn(&g, |_| 2.0), 0.0).unwrap();
        let c = conserved(&s, &OriginalCoefficients::new(0.5, 0.25, 0.0, 1.0, 3.0));
        // b2 (-1/3 - a2 * 2 - a1 * 4) - 8/3 per unit length.
        let exact = 10.0 * (3.0 * (-1.0 / 3.0 - 0.5 - 2.0) - 8.0 / 3.0);
        assert!((c.e4 - exact).abs() < 1e-11);
    }

    #[test]
    fn windowed_norm_examples() {
        let g = SpectralGrid::new(512, 20.0).unwrap();
        assert_eq!(windowed_sobolev(&Field::zeros(&g), 0.0, 2.0, 2).unwrap(), 0.0);
        let f = Field::from_fn(&g, |x| (-x * x).exp());
        let whole = windowed_sobolev(&f, 0.0, 10.0, 1).unwrap();
        // H^1 with binomial weights equals sobolev_norm(1).
        assert!((whole / f.sobolev_norm(1.0) - 1.0).abs() < 1e-12);
        assert!(windowed_sobolev(&f, 9.0, 2.0, 1).is_err());
        assert!(windowed_sobolev(&f, 0.0, 2.0, 5).is_err());
        let mut last = 0.0;
        for eps in [0.8, 0.4, 0.2] {
            let d = dirac_approx(&g, eps, DeltaKind::Gaussian).unwrap();
            let w = windowed_sobolev(&d, 0.0, 3.0, 2).unwrap();
            assert!(w > last);
            last = w;
        }
    }

    #[test]
    fn fit_recovers_planted_rates() {
        for (sigma0, n, l) in [(0.1, 512, 40.0), (1.0, 512, 40.0), (5.0, 256, 80.0)] {
            let g = SpectralGrid::new(n, l).unwrap();
            let f = Field::from_continuum_spectrum(&g, |xi| Complex64::new((-sigma0 * xi.abs()).exp(), 0.0));
            let fit = analyticity_fit(&f, default_fit_band(&g)).unwrap();
            assert!((fit.sigma - sigma0).abs() < 1e-6, "{sigma0}: {}", fit.sigma);
            assert!(fit.residual < 1e-8);
        }
    }

    #[test]
    fn flat_and_gaussian_spectra() {
        let g = SpectralGrid::new(512, 40.0).unwrap();
        let flat = Field::from_continuum_spectrum(&g, |_| Complex64::new(1.0, 0.0));
        let fit = analyticity_fit(&flat, default_fit_band(&g)).unwrap();
        assert!(fit.sigma.abs() < 1e-10);
        let gauss = Field::from_continuum_spectrum(&g, |xi| Complex64::new((-0.02 * xi * xi).exp(), 0.0));
        let fit = analyticity_fit(&gauss, default_fit_band(&g)).unwrap();
        assert!(fit.residual > 0.1);
        assert!(fit.quadratic_residual < 1e-8 * fit.residual.max(1.0));
        assert!(matches!(analyticity_fit(&flat, (0.0, 0.5)), Err(Error::EmptyBand(_))));
        assert!(matches!(analyticity_fit(&Field::zeros(&g), default_fit_band(&g)), Err(Error::EmptyBand(_))));
    }

    fn periodic_mode_block(g: &Arc<SpectralGrid>, k0: usize, m0: i64, m: usize, window: f64) -> SpaceTimeBlock {
        let dt = window / m as f64;
        let times: Vec<f64> = (0..m).map(|j| j as f64 * dt).collect();
        let xi0 = g.xi()[k0];
        let tau0 = 2.0 * PI * m0 as f64 / window;
        SpaceTimeBlock::sample_complex(g, times, |x, t| Complex64::from_polar(1.0, xi0 * x + tau0 * t))
            .unwrap()
            .with_taper(Taper::Periodic)
    }

    #[test]
    fn bourgain_single_mode_and_l2_identity() {
        let g = SpectralGrid::new(32, 2.0 * PI).unwrap();
        let (m, window) = (33, 1.0);
        let blk = periodic_mode_block(&g, 3, 5, m, window);
        let (s, b) = (0.3, 0.55);
        let xi0 = 3.0;
        let tau0 = 2.0 * PI * 5.0;
        let expected = bourgain_weight(xi0, tau0, s, b).sqrt() * (2.0 * PI * window).sqrt();
        assert!((bourgain_norm(&blk, s, b).unwrap() / expected - 1.0).abs() < 1e-12);
        let tapered = blk.clone().apply_bump_taper();
        let l2 = tapered.l2_norm();
        assert!((bourgain_norm(&tapered, 0.0, 0.0).unwrap() / l2 - 1.0).abs() < 1e-10);
        assert!(matches!(bourgain_norm(&blk.with_taper(Taper::None), 0.0, 0.5), Err(Error::Untapered)));
    }

    #[test]
    fn bilinear_single_mode_quotient() {
        let g = SpectralGrid::new(32, 2.0 * PI).unwrap();
        let (m, window) = (65, 1.0);
        let blk = periodic_mode_block(&g, 2, 3, m, window);
        let (s, b, bp) = (-0.5, 0.55, 0.57);
        let (xi0, tau0) = (2.0, 2.0 * PI * 3.0);
        let w = bourgain_weight(xi0, tau0, s, b).sqrt();
        let wp = bourgain_weight(2.0 * xi0, 2.0 * tau0, s, bp - 1.0).sqrt();
        let expected = 2.0 * xi0 * wp / (w * w * (2.0 * PI * window).sqrt());
        let got = bilinear_ratio(&blk, &blk, s, b, bp).unwrap().unwrap();
        assert!((got / expected - 1.0).abs() < 1e-10, "{got} vs {expected}");
        let zero = blk.scale(0.0);
        assert_eq!(bilinear_ratio(&zero, &blk, s, b, bp).unwrap(), None);
    }

    #[test]
    fn probe_hypotheses_enforced() {
        assert!(check_probe_hypotheses(-0.8, 0.55, 0.57).is_err());
        assert!(check_probe_hypotheses(0.0, 0.57, 0.55).is_err());
        assert!(check_probe_hypotheses(0.0, 0.5, 0.55).is_err());
        assert!(check_probe_hypotheses(0.0, 0.55, 0.6).is_err());
        assert!(check_probe_hypotheses(-0.7, 0.55, 0.57).is_ok());
    }

    #[test]
    fn refinement_zero_amplitude_rows_are_zero() {
        let cfg = RefinementConfig {
            n: 256,
            length: 20.0,
            model: EvolutionModel::from(ReducedCoefficients::decoupled(1.0)),
            dt: 0.01,
            kind: DeltaKind::Gaussian,
            amplitude_u: 0.0,
            amplitude_v: 0.0,
            probe_center: -1.0,
            half_width: 1.5,
            order: 2,
            sponge: None,
        };
        let rows = refinement_study(&[0.8, 0.4], 0.05, &cfg, Execution::Sequential).unwrap();
        for r in &rows {
            assert_eq!(r.norm_initial, 0.0);
            assert_eq!(r.norm_probe, Some(0.0));
        }
        assert_eq!(rows[1].ratio_initial, Some(0.0));
        assert!(refinement_study(&[0.4, 0.8], 0.05, &cfg, Execution::Sequential).is_err());
        assert!(refinement_study(&[0.4], 0.0, &cfg, Execution::Sequential).is_err());
    }
}
