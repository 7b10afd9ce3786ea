//! Space-time operator algebra on sampled blocks.
//!
//! `L = d_t + d_x^3`, `J = x - 3 t d_x^2` and the dilation generator
//! `P = 3 t d_t + x d_x` act on a [`SpaceTimeBlock`]: a stack of fields at
//! uniformly spaced times. Space derivatives are spectral; time derivatives
//! use the 8th-order central stencil, so every time derivative shrinks the
//! block by four samples at each end.
//!
//! The coordinate `x` on the torus is a sawtooth. Multiplying by it is exact
//! at the collocation points, but any field that varies near the seam
//! `x = +-L/2` produces garbage under subsequent spectral differentiation.
//! Operators that multiply by `x` therefore require the variation of their
//! input to live in the central half of the box.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsSeries;
use crate::dynamics::{snapshot_time_derivatives, Trajectory};
use crate::model::ReducedCoefficients;
use crate::par::{self, Execution};
use crate::spectral::{Field, SpectralGrid};
use crate::{Error, Result};

/// Relative derivative energy allowed outside the central half of the box.
pub const SEAM_TOLERANCE: f64 = 1e-6;

/// Stencil half-width of the 8th-order central first derivative.
pub const STENCIL_RADIUS: usize = 4;

const D1_8: [f64; 4] = [4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0];

/// Temporal window declared on a block. Transforms in time need either a
/// smooth compactly supported taper or a block that is exactly periodic over
/// its window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taper {
    None,
    /// `exp(1 - 1 / (1 - r^2))` on the window, `r` running over `(-1, 1)`.
    /// Version 1 of the bump shape.
    Bump,
    Periodic,
}

/// Version-1 temporal bump: `exp(1 - 1/(1 - r^2))` for `|r| < 1`.
pub fn bump(r: f64) -> f64 {
    if r.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - r * r)).exp()
    }
}

#[derive(Debug, Clone)]
pub struct SpaceTimeBlock {
    grid: Arc<SpectralGrid>,
    times: Vec<f64>,
    dt: f64,
    frames: Vec<Field>,
    taper: Taper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Commutator {
    /// `L P - P L - 3 L`.
    LP,
    /// `L J - J L`.
    LJ,
    /// `(P + 3) d_x^3 - d_x^3 P`.
    P3Dx3,
}

impl SpaceTimeBlock {
    pub fn new(grid: &Arc<SpectralGrid>, times: Vec<f64>, frames: Vec<Field>, taper: Taper) -> Result<Self> {
        if times.len() != frames.len() {
            return Err(Error::LengthMismatch {
                expected: times.len(),
                actual: frames.len(),
            });
        }
        if times.len() < 2 * STENCIL_RADIUS + 1 || times.len().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "blocks need an odd number (>= 9) of time samples, got {}",
                times.len()
            )));
        }
        let dt = times[1] - times[0];
        if !(dt > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt) {
            return Err(Error::InvalidArgument("block times must be uniform and increasing".into()));
        }
        for f in &frames {
            if !f.grid().same_shape(grid) {
                return Err(Error::GridMismatch);
            }
        }
        Ok(SpaceTimeBlock {
            grid: grid.clone(),
            times,
            dt,
            frames,
            taper,
        })
    }

    /// `count` uniform times centred on `t_center` with spacing `dt`.
    pub fn centered_times(t_center: f64, dt: f64, count: usize) -> Vec<f64> {
        let half = (count / 2) as f64;
        (0..count).map(|i| t_center + (i as f64 - half) * dt).collect()
    }

    pub fn sample(grid: &Arc<SpectralGrid>, times: Vec<f64>, f: impl Fn(f64, f64) -> f64 + Sync) -> Result<Self> {
        let frames = times.iter().map(|&t| Field::from_fn(grid, |x| f(x, t))).collect();
        Self::new(grid, times, frames, Taper::None)
    }

    pub fn sample_complex(
        grid: &Arc<SpectralGrid>,
        times: Vec<f64>,
        f: impl Fn(f64, f64) -> Complex64,
    ) -> Result<Self> {
        let frames = times
            .iter()
            .map(|&t| {
                let samples = grid.x().iter().map(|&x| f(x, t)).collect();
                Field::to_spectral_complex(grid, samples)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, times, frames, Taper::None)
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn frames(&self) -> &[Field] {
        &self.frames
    }

    pub fn taper(&self) -> Taper {
        self.taper
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn with_taper(mut self, taper: Taper) -> Self {
        self.taper = taper;
        self
    }

    /// Multiplies every frame by the version-1 bump over the block window and
    /// declares [`Taper::Bump`].
    pub fn apply_bump_taper(self) -> Self {
        let t0 = self.times[0];
        let span = self.dt() * self.len() as f64;
        let frames = self
            .times
            .iter()
            .zip(&self.frames)
            .map(|(&t, f)| {
                let r = 2.0 * (t - t0 + 0.5 * self.dt()) / span - 1.0;
                f.scale(bump(r))
            })
            .collect();
        SpaceTimeBlock {
            frames,
            taper: Taper::Bump,
            ..self
        }
    }

    pub fn center_index(&self) -> usize {
        self.len() / 2
    }

    pub fn center_frame(&self) -> &Field {
        &self.frames[self.center_index()]
    }

    /// Drops `r` samples at each end.
    pub fn trim(&self, r: usize) -> SpaceTimeBlock {
        SpaceTimeBlock {
            grid: self.grid.clone(),
            times: self.times[r..self.len() - r].to_vec(),
            dt: self.dt,
            frames: self.frames[r..self.len() - r].to_vec(),
            taper: self.taper,
        }
    }

    fn map_frames(&self, f: impl Fn(&Field) -> Field + Sync + Send) -> SpaceTimeBlock {
        SpaceTimeBlock {
            grid: self.grid.clone(),
            times: self.times.clone(),
            dt: self.dt,
            frames: par::map(Execution::default(), &self.frames, f),
            taper: self.taper,
        }
    }

    pub fn zip_with(&self, other: &SpaceTimeBlock, f: impl Fn(&Field, &Field) -> Field + Sync + Send) -> Result<SpaceTimeBlock> {
        if self.len() != other.len() || (self.times[0] - other.times[0]).abs() > 1e-12 {
            return Err(Error::InvalidArgument("blocks cover different times".into()));
        }
        let idx: Vec<usize> = (0..self.len()).collect();
        let frames = par::map(Execution::default(), &idx, |&i| f(&self.frames[i], &other.frames[i]));
        Ok(SpaceTimeBlock {
            grid: self.grid.clone(),
            times: self.times.clone(),
            dt: self.dt,
            frames,
            taper: self.taper,
        })
    }

    pub fn derivative_x(&self, order: u32) -> SpaceTimeBlock {
        self.map_frames(|f| f.derivative(order))
    }

    pub fn scale(&self, a: f64) -> SpaceTimeBlock {
        self.map_frames(|f| f.scale(a))
    }

    pub fn axpy(&self, a: f64, other: &SpaceTimeBlock) -> Result<SpaceTimeBlock> {
        self.zip_with(other, |x, y| x.axpy(a, y))
    }

    /// Pointwise product frame by frame.
    pub fn product(&self, other: &SpaceTimeBlock) -> Result<SpaceTimeBlock> {
        self.zip_with(other, |x, y| x.product(y))
    }

    /// 8th-order central `d_t` on the interior.
    pub fn derivative_t(&self) -> Result<SpaceTimeBlock> {
        let r = STENCIL_RADIUS;
        if self.len() < 2 * r + 1 {
            return Err(Error::InvalidArgument("block too short for the time stencil".into()));
        }
        let h = self.dt();
        let idx: Vec<usize> = (r..self.len() - r).collect();
        let frames = par::map(Execution::default(), &idx, |&i| {
            let mut acc = Field::zeros(&self.grid);
            for (j, &c) in D1_8.iter().enumerate() {
                acc = acc.axpy(c / h, &self.frames[i + j + 1]).axpy(-c / h, &self.frames[i - j - 1]);
            }
            acc
        });
        Ok(SpaceTimeBlock {
            grid: self.grid.clone(),
            times: self.times[r..self.len() - r].to_vec(),
            dt: self.dt,
            frames,
            taper: self.taper,
        })
    }

    /// Largest relative energy of `d_x f` outside the central half over all frames.
    pub fn seam_leakage(&self) -> f64 {
        let quarter = 0.25 * self.grid.length();
        let outer: Vec<bool> = self.grid.x().iter().map(|x| x.abs() > quarter).collect();
        let per_frame = par::map(Execution::default(), &self.frames, |f| {
            let d = f.derivative(1).to_physical();
            let total: f64 = d.iter().map(|c| c.norm_sqr()).sum();
            if total == 0.0 {
                return 0.0;
            }
            let out: f64 = d.iter().zip(&outer).filter(|(_, &o)| o).map(|(c, _)| c.norm_sqr()).sum();
            (out / total).sqrt()
        });
        per_frame.into_iter().fold(0.0, f64::max)
    }

    fn require_central_support(&self) -> Result<()> {
        let leak = self.seam_leakage();
        if leak > SEAM_TOLERANCE {
            Err(Error::SeamContact(leak))
        } else {
            Ok(())
        }
    }

    /// Space-time `L^2` norm `(dt * sum_m ||f(t_m)||^2)^{1/2}`.
    pub fn l2_norm(&self) -> f64 {
        let sum: f64 = self.frames.iter().map(|f| f.l2_norm().powi(2)).sum();
        (self.dt() * sum).sqrt()
    }

    /// Restricts to the samples whose times also appear in `other`.
    pub fn restrict_to(&self, other: &SpaceTimeBlock) -> Result<SpaceTimeBlock> {
        let start = self
            .times
            .iter()
            .position(|&t| (t - other.times[0]).abs() <= 1e-9 * self.dt())
            .ok_or_else(|| Error::InvalidArgument("blocks do not overlap".into()))?;
        let end = start + other.len();
        if end > self.len() {
            return Err(Error::InvalidArgument("blocks do not overlap".into()));
        }
        Ok(SpaceTimeBlock {
            grid: self.grid.clone(),
            times: self.times[start..end].to_vec(),
            dt: self.dt,
            frames: self.frames[start..end].to_vec(),
            taper: self.taper,
        })
    }
}

/// `P f = 3 t d_t f + x d_x f` on the interior times.
pub fn apply_p(block: &SpaceTimeBlock) -> Result<SpaceTimeBlock> {
    apply_p_shift(block, 0.0)
}

/// `(P + shift) f`.
pub fn apply_p_shift(block: &SpaceTimeBlock, shift: f64) -> Result<SpaceTimeBlock> {
    block.require_central_support()?;
    let ft = block.derivative_t()?;
    let inner = block.trim(STENCIL_RADIUS);
    let idx: Vec<usize> = (0..ft.len()).collect();
    let frames = par::map(Execution::default(), &idx, |&i| {
        let t = ft.times[i];
        let f = &inner.frames[i];
        ft.frames[i].scale(3.0 * t).add(&f.derivative(1).times_x()).axpy(shift, f)
    });
    Ok(SpaceTimeBlock { frames, ..ft })
}

/// `L f = d_t f + d_x^3 f` on the interior times.
pub fn apply_l(block: &SpaceTimeBlock) -> Result<SpaceTimeBlock> {
    let ft = block.derivative_t()?;
    let inner = block.trim(STENCIL_RADIUS);
    ft.zip_with(&inner, |a, b| a.add(&b.derivative(3)))
}

/// `J f = x f - 3 t d_x^2 f` (no time stencil; all times kept).
pub fn apply_j(block: &SpaceTimeBlock) -> Result<SpaceTimeBlock> {
    let idx: Vec<usize> = (0..block.len()).collect();
    let frames = par::map(Execution::default(), &idx, |&i| {
        let f = &block.frames[i];
        f.times_x().axpy(-3.0 * block.times[i], &f.derivative(2))
    });
    Ok(SpaceTimeBlock {
        frames,
        ..block.clone()
    })
}

/// Discrete space-time residual of one of the exact commutator identities,
/// relative to the norm of `f` over the same interior times.
pub fn commutator_residual(which: Commutator, block: &SpaceTimeBlock) -> Result<f64> {
    let residual = match which {
        Commutator::LP => {
            let lf = apply_l(block)?;
            let lpf = apply_l(&apply_p(block)?)?;
            let plf = apply_p(&lf)?;
            let lf_inner = lf.restrict_to(&lpf)?;
            lpf.axpy(-1.0, &plf)?.axpy(-3.0, &lf_inner)?
        }
        Commutator::LJ => {
            let ljf = apply_l(&apply_j(block)?)?;
            let jlf = apply_j(&apply_l(block)?)?;
            ljf.axpy(-1.0, &jlf)?
        }
        Commutator::P3Dx3 => {
            let lhs = apply_p_shift(&block.derivative_x(3), 3.0)?;
            let rhs = apply_p(block)?.derivative_x(3);
            lhs.axpy(-1.0, &rhs)?
        }
    };
    let scale = block.restrict_to(&residual)?.l2_norm();
    let r = residual.l2_norm();
    Ok(if scale == 0.0 { r } else { r / scale })
}

/// `k! / (k1! k2! k3!)` in exact arithmetic; `None` on overflow or when the
/// parts do not sum to `k`.
pub fn multinomial(k: u32, k1: u32, k2: u32, k3: u32) -> Option<u128> {
    if k1.checked_add(k2)?.checked_add(k3)? != k {
        return None;
    }
    binomial(k, k1)?.checked_mul(binomial(k - k1, k2)?)
}

pub fn binomial(n: u32, k: u32) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) after the multiplication.
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Largest `k` for which the expansion coefficients are computed.
pub const MAX_EXPANSION_ORDER: u32 = 20;

/// Compositions `k = k1 + k2 + k3` with weight `k!/(k1! k2! k3!) 2^{k1}`.
pub fn expansion_terms(k: u32) -> Result<Vec<(u32, u32, u32, u128)>> {
    if k > MAX_EXPANSION_ORDER {
        return Err(Error::InvalidArgument(format!(
            "expansion order {k} exceeds {MAX_EXPANSION_ORDER}"
        )));
    }
    let mut out = Vec::new();
    for k1 in 0..=k {
        for k2 in 0..=k - k1 {
            let k3 = k - k1 - k2;
            let w = multinomial(k, k1, k2, k3)
                .and_then(|m| m.checked_mul(1u128 << k1))
                .ok_or_else(|| Error::InvalidArgument("multinomial overflow".into()))?;
            out.push((k1, k2, k3, w));
        }
    }
    Ok(out)
}

/// Sum of all expansion weights; equals `4^k` by the multinomial theorem.
pub fn coefficient_sum(k: u32) -> Result<u128> {
    expansion_terms(k)?
        .iter()
        .try_fold(0u128, |acc, t| acc.checked_add(t.3))
        .ok_or_else(|| Error::InvalidArgument("coefficient sum overflow".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// `B_k` with `(a, b, c)`.
    B,
    /// `C_k` with `(a~, b~, c~)`.
    C,
}

/// The three bilinear terms of `d_t P^k u + d_x^3 P^k u` (family `B`) or of the
/// `v` equation (family `C`), built from the fields `P^j u`, `P^j v`:
///
/// ```text
/// B^1 = -(a/2) sum w(k1,k2,k3) d_x(u_{k2} u_{k3})
/// B^2 = -(b/2) sum w(k1,k2,k3) d_x(v_{k2} v_{k3})
/// B^3 = -c     sum w(k1,k2,k3) d_x(u_{k2} v_{k3})
/// ```
pub fn bk_expansion(
    pu: &[Field],
    pv: &[Field],
    rc: &ReducedCoefficients,
    k: u32,
    family: Family,
) -> Result<(Field, Field, Field)> {
    let need = k as usize + 1;
    if pu.len() < need || pv.len() < need {
        return Err(Error::InvalidArgument(format!(
            "expansion of order {k} needs {need} P^j fields, got {} and {}",
            pu.len(),
            pv.len()
        )));
    }
    pu[0].ensure_same_grid(&pv[0])?;
    let [a, b, c] = match family {
        Family::B => rc.u_row(),
        Family::C => rc.v_row(),
    };
    let terms = expansion_terms(k)?;
    let grid = pu[0].grid();
    let up: Vec<Vec<Complex64>> = pu[..need].iter().map(|f| f.to_physical()).collect();
    let vp: Vec<Vec<Complex64>> = pv[..need].iter().map(|f| f.to_physical()).collect();
    let n = grid.n();
    let mut s1 = vec![Complex64::default(); n];
    let mut s2 = vec![Complex64::default(); n];
    let mut s3 = vec![Complex64::default(); n];
    for &(_, k2, k3, w) in &terms {
        let w = w as f64;
        let (i2, i3) = (k2 as usize, k3 as usize);
        for j in 0..n {
            s1[j] += up[i2][j] * up[i3][j] * w;
            s2[j] += vp[i2][j] * vp[i3][j] * w;
            s3[j] += up[i2][j] * vp[i3][j] * w;
        }
    }
    let finish = |s: Vec<Complex64>, coef: f64| -> Result<Field> {
        Ok(Field::to_spectral_complex(grid, s)?.derivative(1).scale(coef))
    };
    Ok((finish(s1, -0.5 * a)?, finish(s2, -0.5 * b)?, finish(s3, -c)?))
}

/// `-(a/2) d_x (P + 2)^k (u^2)` by literal repeated application of `P + 2`
/// to the squared block, evaluated at the block's centre time.
pub fn leibniz_direct(block_u: &SpaceTimeBlock, rc: &ReducedCoefficients, k: u32) -> Result<Field> {
    let needed = 2 * STENCIL_RADIUS * k as usize + 1;
    if block_u.len() < needed {
        return Err(Error::InvalidArgument(format!(
            "order {k} needs at least {needed} time samples, block has {}",
            block_u.len()
        )));
    }
    let center_t = block_u.times[block_u.center_index()];
    let mut sq = block_u.product(block_u)?;
    for _ in 0..k {
        sq = apply_p_shift(&sq, 2.0)?;
    }
    let i = sq
        .times
        .iter()
        .position(|&t| (t - center_t).abs() <= 1e-9 * block_u.dt())
        .ok_or_else(|| Error::InvalidArgument("centre time lost".into()))?;
    Ok(sq.frames[i].derivative(1).scale(-0.5 * rc.a))
}

/// Residual of `t d_x^3 u = -P u / 3 + x d_x u / 3 + t (B^1_0 + B^2_0 + B^2_0)`
/// (and the `C_0` partner for `v`) on every interior snapshot, channels
/// `dilation_u` and `dilation_v`. `P u` uses the same fourth-order time
/// differences as [`crate::dynamics::pde_residual`].
pub fn dilation_residual(traj: &Trajectory, rc: &ReducedCoefficients, k: u32) -> Result<DiagnosticsSeries> {
    if k != 0 {
        return Err(Error::InvalidArgument(
            "dilation residuals on computed solutions are available for k = 0 only".into(),
        ));
    }
    if traj.model.dispersion != [1.0, 1.0] {
        return Err(Error::InvalidArgument(
            "the dilation identity holds for the unit-dispersion reduced system".into(),
        ));
    }
    let (_, derivs) = snapshot_time_derivatives(traj)?;
    let mut series = DiagnosticsSeries::new(&["dilation_u", "dilation_v"]);
    for (i, ut, vt) in derivs {
        let s = &traj.states[i];
        let t = s.t;
        let ux = s.u.derivative(1).times_x();
        let vx = s.v.derivative(1).times_x();
        let pu = ut.scale(3.0 * t).add(&ux);
        let pv = vt.scale(3.0 * t).add(&vx);
        let pu_list = [s.u.clone()];
        let pv_list = [s.v.clone()];
        let (b1, b2, b3) = bk_expansion(&pu_list, &pv_list, rc, 0, Family::B)?;
        let (c1, c2, c3) = bk_expansion(&pu_list, &pv_list, rc, 0, Family::C)?;
        let ru = s
            .u
            .derivative(3)
            .scale(t)
            .axpy(1.0 / 3.0, &pu)
            .axpy(-1.0 / 3.0, &ux)
            .axpy(-t, &b1.add(&b2).add(&b3));
        let rv = s
            .v
            .derivative(3)
            .scale(t)
            .axpy(1.0 / 3.0, &pv)
            .axpy(-1.0 / 3.0, &vx)
            .axpy(-t, &c1.add(&c2).add(&c3));
        series.push(t, &[ru.l2_norm(), rv.l2_norm()])?;
    }
    Ok(series)
}
