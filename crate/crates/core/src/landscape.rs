//! Query layer over a trained decomposition, plus the linearized
//! (network-independent) curvature oracles at fixed points.
//!
//! The landscape value adds a confining quadratic to the network head:
//!
//! ```text
//!     V(x) = vhat(x) + |x - x_ref|^2
//! ```
//!
//! so `grad V = grad vhat + 2 (x - x_ref)` and `hess V = hess vhat + 2 I`.
//! The rotational component `l` and its divergence come straight from the
//! network's exact input Jacobian. Two derived scalar fields matter
//! downstream:
//!
//! - the decomposition residual `|b + 1/2 a grad V - l|`, which measures
//!   training quality pointwise, and
//! - the transport integrand `F = div l + 1/2 <A, grad V>` with
//!   `A_i = sum_j d a_ij / d x_j`, whose path integrals build exit-time
//!   prefactors. At any fixed point of the drift, `F = 0` exactly for the
//!   true landscape — a consequence of the Lyapunov relation below — so
//!   `F` at the attractor doubles as a health check of the fit.
//!
//! Independently of the network, the true Hessian `H` of the quasipotential
//! at a fixed point solves `M Q^T + Q M = a` with `M = H^{-1}` and
//! `Q = -grad b`; the module solves that 3-unknown linear system exactly.

use crate::adnet::{self, NetEval, NetParams};
use crate::dynsys::FixedPoint;
use crate::linalg::{solve3, Mat2, StateVec};
use crate::model::{ModelError, NoiseParams, System};
use crate::trainer::{Checkpoint, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("Lyapunov system is singular (eigenvalue resonance at the fixed point)")]
    ResonantLyapunov,
    #[error("inverse Hessian is singular at the fixed point")]
    SingularHessian,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// A trained decomposition bound to its system, noise amplitudes, and
/// reference attractor. Immutable and cheaply shareable.
#[derive(Clone, Debug)]
pub struct QuasipotentialModel {
    system: System,
    noise: NoiseParams,
    x_ref: StateVec,
    params: NetParams,
}

/// One fused evaluation of the landscape fields at a point.
#[derive(Clone, Copy, Debug)]
pub struct LandscapeEval {
    pub v: f64,
    pub grad_v: StateVec,
    pub l: StateVec,
    pub div_l: f64,
}

impl QuasipotentialModel {
    pub fn new(system: System, noise: NoiseParams, x_ref: StateVec, params: NetParams) -> Self {
        Self {
            system,
            noise,
            x_ref,
            params,
        }
    }

    /// Binds a training checkpoint to a noise intensity for evaluation.
    pub fn from_checkpoint(cp: &Checkpoint, eps: f64) -> Result<Self, LandscapeError> {
        cp.validate()?;
        let noise = NoiseParams::new(cp.sigma1, cp.sigma2, eps)?;
        Ok(Self {
            system: cp.system.clone(),
            noise,
            x_ref: cp.x_ref,
            params: cp.params.clone(),
        })
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    pub fn noise(&self) -> &NoiseParams {
        &self.noise
    }

    pub fn x_ref(&self) -> StateVec {
        self.x_ref
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    fn shift(&self, x: StateVec) -> f64 {
        (x - self.x_ref).norm_sq()
    }

    /// Quasipotential value.
    pub fn v(&self, x: StateVec) -> f64 {
        let (vhat, _) = adnet::forward(&self.params, x);
        vhat + self.shift(x)
    }

    /// Exact gradient of the quasipotential.
    pub fn grad_v(&self, x: StateVec) -> StateVec {
        let e = adnet::forward_with_input_grad(&self.params, x);
        e.grad_vhat + (x - self.x_ref) * 2.0
    }

    /// Rotational component.
    pub fn l(&self, x: StateVec) -> StateVec {
        let (_, l) = adnet::forward(&self.params, x);
        l
    }

    /// Exact divergence of the rotational component.
    pub fn div_l(&self, x: StateVec) -> f64 {
        let e = adnet::forward_with_input_grad(&self.params, x);
        e.jac_l.trace()
    }

    /// Exact input Jacobian of the rotational component.
    pub fn jac_l(&self, x: StateVec) -> Mat2 {
        adnet::forward_with_input_grad(&self.params, x).jac_l
    }

    /// All landscape fields from one network pass.
    pub fn eval(&self, x: StateVec) -> LandscapeEval {
        let e: NetEval = adnet::forward_with_input_grad(&self.params, x);
        LandscapeEval {
            v: e.vhat + self.shift(x),
            grad_v: e.grad_vhat + (x - self.x_ref) * 2.0,
            l: e.l,
            div_l: e.jac_l.trace(),
        }
    }

    /// Hessian of the quasipotential: finite differences of the exact
    /// gradient (step 1e-4), with Richardson extrapolation against the
    /// half-step estimate when the two disagree by more than 5%.
    pub fn hess_v(&self, x: StateVec) -> Mat2 {
        let h = adnet::HESSIAN_FD_STEP;
        let coarse = adnet::input_hessian_with_step(&self.params, x, h);
        let fine = adnet::input_hessian_with_step(&self.params, x, 0.5 * h);
        let scale = [fine.m11, fine.m12, fine.m21, fine.m22]
            .into_iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let diff = [
            coarse.m11 - fine.m11,
            coarse.m12 - fine.m12,
            coarse.m21 - fine.m21,
            coarse.m22 - fine.m22,
        ]
        .into_iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
        let hess_vhat = if diff > 0.05 * scale {
            // Central differences are O(h^2): (4 E(h/2) - E(h)) / 3.
            (fine * 4.0 - coarse) * (1.0 / 3.0)
        } else {
            coarse
        };
        hess_vhat + Mat2::IDENTITY * 2.0
    }

    /// Pointwise decomposition defect `|b + 1/2 a grad V - l|`.
    pub fn decomposition_residual(&self, x: StateVec) -> Result<f64, ModelError> {
        let b = self.system.drift(x)?;
        let a = self.system.diffusion(x, &self.noise);
        let e = self.eval(x);
        let r = b
            + StateVec::new(0.5 * a.m11 * e.grad_v.x1, 0.5 * a.m22 * e.grad_v.x2)
            - e.l;
        Ok(r.norm())
    }

    /// Transport integrand `F = div l + 1/2 <A, grad V>`.
    pub fn f_transport(&self, x: StateVec) -> f64 {
        let e = self.eval(x);
        let a_div = self.system.divergence_vector(x, &self.noise);
        e.div_l + 0.5 * a_div.dot(e.grad_v)
    }
}

/// Quasipotential Hessian at a fixed point from the drift linearization:
/// solves `M Q^T + Q M = a` (with `Q = -grad b`, `M = H^{-1}` symmetric) as
/// a 3x3 linear system, then inverts. Independent of any trained network.
pub fn lyapunov_hessian(jacobian: Mat2, a: Mat2) -> Result<Mat2, LandscapeError> {
    let q = jacobian * -1.0;
    // Unknowns (m11, m12, m22); rows are the (1,1), (1,2), (2,2) equations.
    let rows = [
        [2.0 * q.m11, 2.0 * q.m12, 0.0],
        [q.m21, q.m11 + q.m22, q.m12],
        [0.0, 2.0 * q.m21, 2.0 * q.m22],
    ];
    let rhs = [a.m11, a.m12, a.m22];
    let m = solve3(rows, rhs).ok_or(LandscapeError::ResonantLyapunov)?;
    let minv = Mat2::new(m[0], m[1], m[1], m[2]);
    minv.inverse().ok_or(LandscapeError::SingularHessian)
}

/// [`lyapunov_hessian`] at a located fixed point of a system.
pub fn hessian_riccati(
    fp: &FixedPoint,
    sys: &System,
    noise: &NoiseParams,
) -> Result<Mat2, LandscapeError> {
    let j = sys.drift_jacobian(fp.location)?;
    let a = sys.diffusion(fp.location, noise);
    lyapunov_hessian(j, a)
}

/// Result of a line-restricted landscape minimization.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BoundaryMin {
    pub point: StateVec,
    pub value: f64,
    /// The minimum sat on an endpoint of the searched range.
    pub at_edge: bool,
}

/// Minimizes `V(c, x2)` over `x2 in [lo, hi]`: coarse scan, golden-section
/// refinement, then Newton polish on `dV/dx2`.
pub fn boundary_argmin_line(
    model: &QuasipotentialModel,
    c: f64,
    lo: f64,
    hi: f64,
) -> BoundaryMin {
    assert!(hi > lo, "degenerate search range");
    let f = |x2: f64| model.v(StateVec::new(c, x2));
    const COARSE: usize = 200;
    let mut best = (f(lo), 0usize);
    for i in 1..=COARSE {
        let x2 = lo + (hi - lo) * i as f64 / COARSE as f64;
        let v = f(x2);
        if v < best.0 {
            best = (v, i);
        }
    }
    let step = (hi - lo) / COARSE as f64;
    let at_lo_edge = best.1 == 0;
    let at_hi_edge = best.1 == COARSE;
    if at_lo_edge || at_hi_edge {
        let x2 = lo + step * best.1 as f64;
        return BoundaryMin {
            point: StateVec::new(c, x2),
            value: best.0,
            at_edge: true,
        };
    }
    // Golden-section on the bracketing triple around the coarse minimum.
    let (mut a, mut b) = (lo + step * (best.1 - 1) as f64, lo + step * (best.1 + 1) as f64);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut x1p, mut x2p) = (b - phi * (b - a), a + phi * (b - a));
    let (mut f1, mut f2) = (f(x1p), f(x2p));
    for _ in 0..80 {
        if f1 < f2 {
            b = x2p;
            x2p = x1p;
            f2 = f1;
            x1p = b - phi * (b - a);
            f1 = f(x1p);
        } else {
            a = x1p;
            x1p = x2p;
            f1 = f2;
            x2p = a + phi * (b - a);
            f2 = f(x2p);
        }
        if (b - a).abs() < 1e-12 {
            break;
        }
    }
    let mut x2 = 0.5 * (a + b);
    // Newton polish on the first-order condition dV/dx2 = 0.
    for _ in 0..8 {
        let g = model.grad_v(StateVec::new(c, x2)).x2;
        let h = model.hess_v(StateVec::new(c, x2)).m22;
        if h <= 0.0 || !g.is_finite() {
            break;
        }
        let delta = g / h;
        x2 -= delta;
        if delta.abs() < 1e-13 {
            break;
        }
    }
    let x2 = x2.clamp(lo, hi);
    BoundaryMin {
        point: StateVec::new(c, x2),
        value: f(x2),
        at_edge: false,
    }
}

/// Outward-pointing boundary normal of a vertical exit line `x1 = c`, for
/// a basin containing `x_ref`: it points away from the attractor's side.
pub fn line_normal(model: &QuasipotentialModel, c: f64) -> StateVec {
    let sign = if c < model.x_ref().x1 { -1.0 } else { 1.0 };
    StateVec::new(sign, 0.0)
}

/// Boundary drift coefficient `mu* = <1/2 a grad V + l, n>` at the exit
/// point, with `n` the outward line normal.
pub fn mu_star(model: &QuasipotentialModel, x_star: StateVec) -> f64 {
    let e = model.eval(x_star);
    let a = model.system().diffusion(x_star, model.noise());
    let flow = StateVec::new(0.5 * a.m11 * e.grad_v.x1, 0.5 * a.m22 * e.grad_v.x2) + e.l;
    flow.dot(line_normal(model, x_star.x1))
}

/// Boundary Hessian determinant: the quasipotential curvature restricted
/// to a vertical line is the single entry `d^2 V / d x2^2`.
pub fn det_h_star(model: &QuasipotentialModel, x_star: StateVec) -> f64 {
    model.hess_v(x_star).m22
}

/// One row of a lattice evaluation (plotting/export format).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GridRow {
    pub x1: f64,
    pub x2: f64,
    pub v: f64,
    pub l1: f64,
    pub l2: f64,
    pub f: f64,
}

/// Evaluates the landscape over an `nx` x `ny` lattice on a box,
/// row-major with `x1` varying fastest.
pub fn grid_rows(
    model: &QuasipotentialModel,
    region: &crate::linalg::BoxRegion,
    nx: usize,
    ny: usize,
) -> Vec<GridRow> {
    assert!(nx >= 2 && ny >= 2, "lattice needs at least 2 points per axis");
    let mut rows = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        let x2 = region.x2_min + (region.x2_max - region.x2_min) * j as f64 / (ny - 1) as f64;
        for i in 0..nx {
            let x1 = region.x1_min + (region.x1_max - region.x1_min) * i as f64 / (nx - 1) as f64;
            let x = StateVec::new(x1, x2);
            let e = model.eval(x);
            rows.push(GridRow {
                x1,
                x2,
                v: e.v,
                l1: e.l.x1,
                l2: e.l.x2,
                f: model.f_transport(x),
            });
        }
    }
    rows
}
