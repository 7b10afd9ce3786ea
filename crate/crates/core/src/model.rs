//! System coefficients, standing-assumption checks, and the reduction of the
//! coupled system to a pair of unit-dispersion KdV equations.
//!
//! The original system is written as
//!
//! ```text
//! W_t + A W_xxx + d/dx F(W) = 0,    W = (u, v),
//! A = [[1, a3], [a3 b2 / b1, 1 / b1]],
//! F_u = u^2/2 + a1 v^2/2 + a2 u v,
//! F_v = (v^2/2 + b2 a2 u^2/2 + b2 a1 u v) / b1.
//! ```
//!
//! Each flux component is a quadratic form `F_i = W^T M_i W / 2`. With the
//! eigenbasis `A = S diag(alpha+, alpha-) S^{-1}` and `W = S Z`, the modal
//! variables `Z = (p, q)` obey `Z_t + diag(alpha) Z_xxx + d/dx G(Z) = 0` where
//! `G_j = Z^T K_j Z / 2` and `K_j = sum_i (S^{-1})_{ji} S^T M_i S`. Reading
//! `K_j = [[A_j, C_j], [C_j, B_j]]` gives the modal nonlinear coefficients
//! `(A_j, B_j, C_j)` of `A_j p p_x + B_j q q_x + C_j (p q)_x`.
//!
//! Finally `p(x) = u(alpha+^{-1/3} x)`, `q(x) = v(alpha-^{-1/3} x)` normalises
//! both dispersion coefficients to one and multiplies the nonlinear
//! coefficients of each equation by `alpha^{-1/3}` (real cube root). The
//! resulting constant-coefficient local system is [`ReducedCoefficients`].
//! The two rescalings differ, so the reduced system is exactly equivalent to
//! the original one only when the cross-coupled products vanish on the
//! solution; [`modal_system`] keeps the unscaled, always-equivalent form for
//! simulations that must respect the original conservation laws.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::par::{self, Execution};
use crate::spectral::{Field, SpectralGrid};
use crate::{Error, Result};

/// Closeness of `a3^2 b2` to one below which the x-rescaling is treated as
/// singular.
pub const ILL_CONDITIONED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OriginalCoefficients {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub b1: f64,
    pub b2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    NonFinite,
    B1NotPositive,
    B2NotPositive,
    /// `a3^2 b2 = 1`: a zero eigenvalue.
    DegenerateDispersion,
    /// `0 < |a3^2 b2 - 1| < 1e-9`.
    IllConditioned,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Violation::NonFinite => "finite coefficients",
            Violation::B1NotPositive => "b1>0",
            Violation::B2NotPositive => "b2>0",
            Violation::DegenerateDispersion => "a3²b2≠1",
            Violation::IllConditioned => "ill-conditioned reduction",
        };
        f.write_str(s)
    }
}

impl OriginalCoefficients {
    pub fn new(a1: f64, a2: f64, a3: f64, b1: f64, b2: f64) -> Self {
        OriginalCoefficients { a1, a2, a3, b1, b2 }
    }

    /// The dispersion matrix `A` of the linearised system.
    pub fn dispersion_matrix(&self) -> [[f64; 2]; 2] {
        [
            [1.0, self.a3],
            [self.a3 * self.b2 / self.b1, 1.0 / self.b1],
        ]
    }

    /// Nonlinear coefficients `(A_i, B_i, C_i)` of `A_i u u_x + B_i v v_x + C_i (uv)_x`
    /// after dividing the second equation by `b1`.
    pub fn flux_coefficients(&self) -> [[f64; 3]; 2] {
        let OriginalCoefficients { a1, a2, b1, b2, .. } = *self;
        [[1.0, a1, a2], [b2 * a2 / b1, 1.0 / b1, b2 * a1 / b1]]
    }
}

/// Lists every violated standing assumption; an empty list means valid.
pub fn validate(c: &OriginalCoefficients) -> Vec<Violation> {
    let mut out = Vec::new();
    if ![c.a1, c.a2, c.a3, c.b1, c.b2].iter().all(|v| v.is_finite()) {
        out.push(Violation::NonFinite);
        return out;
    }
    if c.b1 <= 0.0 {
        out.push(Violation::B1NotPositive);
    }
    if c.b2 <= 0.0 {
        out.push(Violation::B2NotPositive);
    }
    let gap = c.a3 * c.a3 * c.b2 - 1.0;
    if gap == 0.0 {
        out.push(Violation::DegenerateDispersion);
    } else if gap.abs() < ILL_CONDITIONED_TOL {
        out.push(Violation::IllConditioned);
    }
    out
}

fn require_valid(c: &OriginalCoefficients) -> Result<()> {
    let v = validate(c);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidCoefficients(v))
    }
}

/// Closed-form eigenvalues `(alpha+, alpha-)` of the dispersion matrix.
pub fn eigenvalues(c: &OriginalCoefficients) -> Result<(f64, f64)> {
    require_valid(c)?;
    let inv_b1 = 1.0 / c.b1;
    let root = ((1.0 - inv_b1).powi(2) + 4.0 * c.b2 * c.a3 * c.a3 * inv_b1).sqrt();
    let trace = 1.0 + inv_b1;
    let plus = 0.5 * (trace + root);
    // The product of the roots is det A; dividing avoids cancellation in the
    // small root when a3^2 b2 is close to one.
    let det = (1.0 - c.a3 * c.a3 * c.b2) * inv_b1;
    let minus = if plus != 0.0 { det / plus } else { 0.5 * (trace - root) };
    Ok((plus, minus))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagonalization {
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    /// Columns are the unit eigenvectors for `alpha_plus` and `alpha_minus`.
    pub basis: [[f64; 2]; 2],
    pub basis_inverse: [[f64; 2]; 2],
}

impl Diagonalization {
    pub fn identity(alpha_plus: f64, alpha_minus: f64) -> Self {
        let id = [[1.0, 0.0], [0.0, 1.0]];
        Diagonalization {
            alpha_plus,
            alpha_minus,
            basis: id,
            basis_inverse: id,
        }
    }

    /// `S diag(alpha) S^{-1}`.
    pub fn reconstruct(&self) -> [[f64; 2]; 2] {
        let s = &self.basis;
        let si = &self.basis_inverse;
        let d = [self.alpha_plus, self.alpha_minus];
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..2).map(|k| s[i][k] * d[k] * si[k][j]).sum();
            }
        }
        out
    }

    /// `W = S Z`: modal pair to original variables.
    pub fn to_original(&self, p: &Field, q: &Field) -> (Field, Field) {
        let s = &self.basis;
        (combine2(s[0][0], p, s[0][1], q), combine2(s[1][0], p, s[1][1], q))
    }

    /// `Z = S^{-1} W`.
    pub fn to_modal(&self, u: &Field, v: &Field) -> (Field, Field) {
        let si = &self.basis_inverse;
        (combine2(si[0][0], u, si[0][1], v), combine2(si[1][0], u, si[1][1], v))
    }
}

fn combine2(a: f64, f: &Field, b: f64, g: &Field) -> Field {
    f.scale(a).axpy(b, g)
}

fn unit_eigenvector(a: &[[f64; 2]; 2], lambda: f64) -> [f64; 2] {
    // Null vector of A - lambda I from whichever row is better conditioned.
    let r0 = [a[0][0] - lambda, a[0][1]];
    let r1 = [a[1][0], a[1][1] - lambda];
    let row = if r0[0].hypot(r0[1]) >= r1[0].hypot(r1[1]) { r0 } else { r1 };
    let mut v = [row[1], -row[0]];
    let len = v[0].hypot(v[1]);
    v[0] /= len;
    v[1] /= len;
    if v[0] < 0.0 || (v[0] == 0.0 && v[1] < 0.0) {
        v[0] = -v[0];
        v[1] = -v[1];
    }
    v
}

fn inverse2(m: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ]
}

pub fn diagonalize(c: &OriginalCoefficients) -> Result<Diagonalization> {
    require_valid(c)?;
    if c.a3 == 0.0 {
        return Ok(Diagonalization::identity(1.0, 1.0 / c.b1));
    }
    let (plus, minus) = eigenvalues(c)?;
    let a = c.dispersion_matrix();
    let e_plus = unit_eigenvector(&a, plus);
    let e_minus = unit_eigenvector(&a, minus);
    let basis = [[e_plus[0], e_minus[0]], [e_plus[1], e_minus[1]]];
    Ok(Diagonalization {
        alpha_plus: plus,
        alpha_minus: minus,
        basis,
        basis_inverse: inverse2(&basis),
    })
}

/// Constants of `u_t + u_xxx + a u u_x + b v v_x + c (uv)_x = 0` and
/// `v_t + v_xxx + a~ u u_x + b~ v v_x + c~ (uv)_x = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReducedCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub a_tilde: f64,
    pub b_tilde: f64,
    pub c_tilde: f64,
}

impl ReducedCoefficients {
    pub fn zero() -> Self {
        Self::default()
    }

    /// A single KdV equation `u_t + u_xxx + a u u_x = 0` with `v` inert.
    pub fn decoupled(a: f64) -> Self {
        ReducedCoefficients { a, ..Self::default() }
    }

    pub fn is_finite(&self) -> bool {
        [self.a, self.b, self.c, self.a_tilde, self.b_tilde, self.c_tilde]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn scaled(&self, su: f64, sv: f64) -> Self {
        ReducedCoefficients {
            a: self.a * su,
            b: self.b * su,
            c: self.c * su,
            a_tilde: self.a_tilde * sv,
            b_tilde: self.b_tilde * sv,
            c_tilde: self.c_tilde * sv,
        }
    }

    pub fn u_row(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }

    pub fn v_row(&self) -> [f64; 3] {
        [self.a_tilde, self.b_tilde, self.c_tilde]
    }
}

/// A diagonal-dispersion system `u_t + d_u u_xxx + N_u = 0`,
/// `v_t + d_v v_xxx + N_v = 0` with quadratic nonlinearity. The reduced system
/// is the special case `d_u = d_v = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionModel {
    pub coeffs: ReducedCoefficients,
    pub dispersion: [f64; 2],
}

impl From<ReducedCoefficients> for EvolutionModel {
    fn from(coeffs: ReducedCoefficients) -> Self {
        EvolutionModel {
            coeffs,
            dispersion: [1.0, 1.0],
        }
    }
}

impl EvolutionModel {
    pub fn is_linear(&self) -> bool {
        self.coeffs == ReducedCoefficients::zero()
    }
}

/// Modal (eigenbasis, unscaled) form of the original system. This system is
/// local and exactly equivalent to the original one.
pub fn modal_system(c: &OriginalCoefficients) -> Result<(EvolutionModel, Diagonalization)> {
    let diag = diagonalize(c)?;
    let flux = c.flux_coefficients();
    let s = diag.basis;
    let si = diag.basis_inverse;
    // M_i as symmetric quadratic-form matrices.
    let m: Vec<[[f64; 2]; 2]> = flux
        .iter()
        .map(|f| [[f[0], f[2]], [f[2], f[1]]])
        .collect();
    let congruence = |mi: &[[f64; 2]; 2]| -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for (a, row) in out.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        acc += s[i][a] * mi[i][j] * s[j][b];
                    }
                }
                *v = acc;
            }
        }
        out
    };
    let transformed: Vec<_> = m.iter().map(congruence).collect();
    let k = |j: usize| -> [f64; 3] {
        let mut kk = [[0.0; 2]; 2];
        for (i, t) in transformed.iter().enumerate() {
            for a in 0..2 {
                for b in 0..2 {
                    kk[a][b] += si[j][i] * t[a][b];
                }
            }
        }
        [kk[0][0], kk[1][1], kk[0][1]]
    };
    let (ku, kv) = (k(0), k(1));
    let coeffs = ReducedCoefficients {
        a: ku[0],
        b: ku[1],
        c: ku[2],
        a_tilde: kv[0],
        b_tilde: kv[1],
        c_tilde: kv[2],
    };
    Ok((
        EvolutionModel {
            coeffs,
            dispersion: [diag.alpha_plus, diag.alpha_minus],
        },
        diag,
    ))
}

/// Diagonalises and rescales to the unit-dispersion reduced system.
pub fn reduce(c: &OriginalCoefficients) -> Result<(ReducedCoefficients, Diagonalization)> {
    let (modal, diag) = modal_system(c)?;
    let su = 1.0 / diag.alpha_plus.cbrt();
    let sv = 1.0 / diag.alpha_minus.cbrt();
    let reduced = modal.coeffs.scaled(su, sv);
    debug_assert!(reduced.is_finite());
    Ok((reduced, diag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Reduced field to modal field: `p(x) = u(alpha^{-1/3} x)`.
    Forward,
    /// Modal field to reduced field: `u(y) = p(alpha^{1/3} y)`.
    Inverse,
}

/// Resamples a field under `x -> alpha^{-1/3} x` (or its inverse) by
/// evaluating the trigonometric interpolant at the scaled collocation points.
pub fn scale_map(field: &Field, alpha: f64, direction: Direction) -> Result<Field> {
    scale_map_with(field, alpha, direction, Execution::default())
}

pub fn scale_map_with(
    field: &Field,
    alpha: f64,
    direction: Direction,
    exec: Execution,
) -> Result<Field> {
    if alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scale factor alpha must be finite and nonzero, got {alpha}"
        )));
    }
    if alpha == 1.0 {
        return Ok(field.clone());
    }
    let factor = match direction {
        Direction::Forward => 1.0 / alpha.cbrt(),
        Direction::Inverse => alpha.cbrt(),
    };
    let grid: &Arc<SpectralGrid> = field.grid();
    let points: Vec<f64> = grid.x().iter().map(|&x| factor * x).collect();
    // Chunk the O(N^2) interpolant so the work spreads over workers.
    let chunks: Vec<&[f64]> = points.chunks(64).collect();
    let values: Vec<_> = par::map(exec, &chunks, |c| field.eval_at(c))
        .into_iter()
        .flatten()
        .collect();
    Field::to_spectral_complex(grid, values)
}

/// Maps a reduced-frame state back to original variables: undo the scale
/// change per component, then apply the eigenbasis.
pub fn reduced_to_original(state: &State, diag: &Diagonalization) -> Result<State> {
    let p = scale_map(&state.u, diag.alpha_plus, Direction::Forward)?;
    let q = scale_map(&state.v, diag.alpha_minus, Direction::Forward)?;
    let (u, v) = diag.to_original(&p, &q);
    Ok(State { u, v, t: state.t })
}

pub fn modal_to_original(state: &State, diag: &Diagonalization) -> State {
    let (u, v) = diag.to_original(&state.u, &state.v);
    State { u, v, t: state.t }
}

pub fn original_to_modal(state: &State, diag: &Diagonalization) -> State {
    let (u, v) = diag.to_modal(&state.u, &state.v);
    State { u, v, t: state.t }
}

/// Spatial part of the original system: `A W_xxx + d/dx F(W)`, so that the
/// residual of a time derivative `W_t` is `W_t + original_space_operator(W)`.
pub fn original_space_operator(u: &Field, v: &Field, c: &OriginalCoefficients) -> (Field, Field) {
    let a = c.dispersion_matrix();
    let uxxx = u.derivative(3);
    let vxxx = v.derivative(3);
    let flux = c.flux_coefficients();
    let uu = u.product(u);
    let vv = v.product(v);
    let uv = u.product(v);
    let nonlinear = |f: [f64; 3]| {
        uu.scale(0.5 * f[0])
            .axpy(0.5 * f[1], &vv)
            .axpy(f[2], &uv)
            .derivative(1)
    };
    let ru = uxxx.scale(a[0][0]).axpy(a[0][1], &vxxx).add(&nonlinear(flux[0]));
    let rv = uxxx.scale(a[1][0]).axpy(a[1][1], &vxxx).add(&nonlinear(flux[1]));
    (ru, rv)
}
