//! Dense network for the decomposition heads and its exact derivatives.
//!
//! The network maps a state `x in R^2` through six tanh layers of width 20
//! to three linear outputs `(vhat, l1, l2)`. The landscape value adds a
//! confining shift outside this module:
//!
//! ```text
//!     V(x) = vhat(x) + |x - x_ref|^2
//! ```
//!
//! Training needs two derivative flavors at once:
//!
//! - the input gradient `d vhat / dx` (it appears *inside* the loss), and
//! - the parameter gradient of a loss containing that input gradient.
//!
//! Both are exact. The forward pass is augmented with the 2-column input
//! Jacobian (forward mode over the input), and a single reverse sweep over
//! that augmented computation yields the parameter gradient (reverse mode
//! over parameters). For a hidden layer `s = tanh(W z + c)` with
//! pre-activation tangents `U = W Z`, the reverse rules are
//!
//! ```text
//!     Ubar = d ⊙ Sbar                      d = 1 - s^2   (row scale)
//!     sbar += -2 s ⊙ (U Sbar^T diag)       through d in S = d ⊙ U
//!     ubar  = d ⊙ sbar
//!     Wbar += ubar z^T + Ubar Z^T,  cbar += ubar
//!     zbar  = W^T ubar,  Zbar = W^T Ubar
//! ```
//!
//! Batch loss gradients reduce per-point contributions in a fixed chunk
//! order, so results are bit-identical for any rayon thread count.

use crate::linalg::{Mat2, StateVec};
use crate::model::{ModelError, NoiseParams, System};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INPUT_DIM: usize = 2;
pub const HIDDEN_LAYERS: usize = 6;
pub const HIDDEN_WIDTH: usize = 20;
pub const OUTPUT_DIM: usize = 3;

const W0_OFF: usize = 0;
const B0_OFF: usize = W0_OFF + HIDDEN_WIDTH * INPUT_DIM;
/// Weights + biases of one 20 -> 20 layer.
const HID_STRIDE: usize = HIDDEN_WIDTH * HIDDEN_WIDTH + HIDDEN_WIDTH;
const HID_BASE: usize = B0_OFF + HIDDEN_WIDTH;
const WOUT_OFF: usize = HID_BASE + (HIDDEN_LAYERS - 1) * HID_STRIDE;
const BOUT_OFF: usize = WOUT_OFF + OUTPUT_DIM * HIDDEN_WIDTH;
/// Total number of trainable parameters in the fixed architecture.
pub const PARAM_COUNT: usize = BOUT_OFF + OUTPUT_DIM;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("flat parameter vector has length {got}, expected {expected}")]
    BadFlatLength { expected: usize, got: usize },
    #[error("gradient length {got} does not match parameter count {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("loss evaluation needs a nonempty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Architecture descriptor; only the standard 2-6x20-3 shape is computable.
///
/// The descriptor travels inside checkpoints so that a file with edited
/// layer metadata is rejected instead of silently misread.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    input: usize,
    hidden_layers: usize,
    hidden_width: usize,
    output: usize,
}

impl NetArch {
    pub fn standard() -> Self {
        Self {
            input: INPUT_DIM,
            hidden_layers: HIDDEN_LAYERS,
            hidden_width: HIDDEN_WIDTH,
            output: OUTPUT_DIM,
        }
    }

    pub fn param_count(&self) -> usize {
        let first = self.hidden_width * self.input + self.hidden_width;
        let hidden = (self.hidden_layers - 1)
            * (self.hidden_width * self.hidden_width + self.hidden_width);
        let out = self.output * self.hidden_width + self.output;
        first + hidden + out
    }

    pub fn is_standard(&self) -> bool {
        *self == Self::standard()
    }
}

/// Trainable parameters in a flat, stably ordered vector.
///
/// Layout: `W0 (20x2 row-major) | b0 | [Wi (20x20) | bi] x5 | Wout (3x20) | bout`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NetParams {
    flat: Vec<f64>,
}

impl TryFrom<Vec<f64>> for NetParams {
    type Error = AdError;

    fn try_from(flat: Vec<f64>) -> Result<Self, AdError> {
        if flat.len() != PARAM_COUNT {
            return Err(AdError::BadFlatLength {
                expected: PARAM_COUNT,
                got: flat.len(),
            });
        }
        Ok(Self { flat })
    }
}

impl From<NetParams> for Vec<f64> {
    fn from(p: NetParams) -> Vec<f64> {
        p.flat
    }
}

impl NetParams {
    pub fn zeros() -> Self {
        Self {
            flat: vec![0.0; PARAM_COUNT],
        }
    }

    /// Glorot-uniform weights (`±sqrt(6/(fan_in+fan_out))`), zero biases.
    ///
    /// Weights are drawn in flat order from a counter-based generator, so
    /// the same seed always yields bit-identical parameters.
    pub fn init(arch: &NetArch, seed: u64) -> Self {
        assert!(
            arch.is_standard(),
            "only the standard architecture is computable"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = vec![0.0; PARAM_COUNT];
        let mut fill = |w_off: usize, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            for w in &mut flat[w_off..w_off + rows * cols] {
                *w = rng.random_range(-bound..bound);
            }
        };
        fill(W0_OFF, HIDDEN_WIDTH, INPUT_DIM, &mut rng);
        for i in 1..HIDDEN_LAYERS {
            fill(hid_w_off(i), HIDDEN_WIDTH, HIDDEN_WIDTH, &mut rng);
        }
        fill(WOUT_OFF, OUTPUT_DIM, HIDDEN_WIDTH, &mut rng);
        Self { flat }
    }

    pub fn from_flat(flat: Vec<f64>) -> Result<Self, AdError> {
        Self::try_from(flat)
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }
}

/// Offset of the weight block of hidden layer `i` (1-based beyond layer 0).
fn hid_w_off(i: usize) -> usize {
    HID_BASE + (i - 1) * HID_STRIDE
}

/// Offset of the bias block of hidden layer `i`.
fn hid_b_off(i: usize) -> usize {
    hid_w_off(i) + HIDDEN_WIDTH * HIDDEN_WIDTH
}

/// Network outputs with their exact input derivatives.
#[derive(Clone, Copy, Debug)]
pub struct NetEval {
    pub vhat: f64,
    pub l: StateVec,
    /// `d vhat / dx`.
    pub grad_vhat: StateVec,
    /// Rows are `d l1 / dx` and `d l2 / dx`.
    pub jac_l: Mat2,
}

/// Layer-by-layer storage for one augmented forward pass.
///
/// Holds tanh outputs and *pre-activation* input tangents per hidden layer;
/// the reverse sweep recomputes the cheap post-activation tangents on the
/// fly instead of storing them.
struct Scratch {
    acts: [[f64; HIDDEN_WIDTH]; HIDDEN_LAYERS],
    utan: [[[f64; 2]; HIDDEN_WIDTH]; HIDDEN_LAYERS],
}

impl Scratch {
    fn new() -> Self {
        Self {
            acts: [[0.0; HIDDEN_WIDTH]; HIDDEN_LAYERS],
            utan: [[[0.0; 2]; HIDDEN_WIDTH]; HIDDEN_LAYERS],
        }
    }
}

/// Plain forward pass: `(vhat, l)` without derivatives.
pub fn forward(p: &NetParams, x: StateVec) -> (f64, StateVec) {
    let f = &p.flat;
    let mut z = [0.0; HIDDEN_WIDTH];
    for r in 0..HIDDEN_WIDTH {
        let u = f[W0_OFF + r * INPUT_DIM] * x.x1
            + f[W0_OFF + r * INPUT_DIM + 1] * x.x2
            + f[B0_OFF + r];
        z[r] = u.tanh();
    }
    let mut znext = [0.0; HIDDEN_WIDTH];
    for i in 1..HIDDEN_LAYERS {
        let w = hid_w_off(i);
        let b = hid_b_off(i);
        for r in 0..HIDDEN_WIDTH {
            let row = w + r * HIDDEN_WIDTH;
            let mut u = f[b + r];
            for j in 0..HIDDEN_WIDTH {
                u += f[row + j] * z[j];
            }
            znext[r] = u.tanh();
        }
        z = znext;
    }
    let mut y = [0.0; OUTPUT_DIM];
    for r in 0..OUTPUT_DIM {
        let row = WOUT_OFF + r * HIDDEN_WIDTH;
        let mut u = f[BOUT_OFF + r];
        for j in 0..HIDDEN_WIDTH {
            u += f[row + j] * z[j];
        }
        y[r] = u;
    }
    (y[0], StateVec::new(y[1], y[2]))
}

/// Augmented forward pass filling `scratch`; returns outputs and their
/// input Jacobian rows.
fn forward_into(p: &NetParams, x: StateVec, scratch: &mut Scratch) -> ([f64; 3], [[f64; 2]; 3]) {
    let f = &p.flat;
    // Layer 0: input tangent basis is the identity, so U0 is W0 itself.
    for r in 0..HIDDEN_WIDTH {
        let w1 = f[W0_OFF + r * INPUT_DIM];
        let w2 = f[W0_OFF + r * INPUT_DIM + 1];
        let u = w1 * x.x1 + w2 * x.x2 + f[B0_OFF + r];
        scratch.acts[0][r] = u.tanh();
        scratch.utan[0][r] = [w1, w2];
    }
    let mut post = [[0.0; 2]; HIDDEN_WIDTH];
    for i in 1..HIDDEN_LAYERS {
        let w = hid_w_off(i);
        let b = hid_b_off(i);
        // Post-activation tangents of the previous layer: S = (1 - s^2) U.
        for j in 0..HIDDEN_WIDTH {
            let d = 1.0 - scratch.acts[i - 1][j] * scratch.acts[i - 1][j];
            post[j] = [
                d * scratch.utan[i - 1][j][0],
                d * scratch.utan[i - 1][j][1],
            ];
        }
        let (done, rest) = scratch.acts.split_at_mut(i);
        let prev = &done[i - 1];
        let acts_i = &mut rest[0];
        for r in 0..HIDDEN_WIDTH {
            let row = w + r * HIDDEN_WIDTH;
            let mut u = f[b + r];
            let mut t0 = 0.0;
            let mut t1 = 0.0;
            for j in 0..HIDDEN_WIDTH {
                let wv = f[row + j];
                u += wv * prev[j];
                t0 += wv * post[j][0];
                t1 += wv * post[j][1];
            }
            acts_i[r] = u.tanh();
            scratch.utan[i][r] = [t0, t1];
        }
    }
    let last = HIDDEN_LAYERS - 1;
    for j in 0..HIDDEN_WIDTH {
        let d = 1.0 - scratch.acts[last][j] * scratch.acts[last][j];
        post[j] = [
            d * scratch.utan[last][j][0],
            d * scratch.utan[last][j][1],
        ];
    }
    let mut y = [0.0; 3];
    let mut yj = [[0.0; 2]; 3];
    for r in 0..OUTPUT_DIM {
        let row = WOUT_OFF + r * HIDDEN_WIDTH;
        let mut u = f[BOUT_OFF + r];
        let mut t0 = 0.0;
        let mut t1 = 0.0;
        for j in 0..HIDDEN_WIDTH {
            let wv = f[row + j];
            u += wv * scratch.acts[last][j];
            t0 += wv * post[j][0];
            t1 += wv * post[j][1];
        }
        y[r] = u;
        yj[r] = [t0, t1];
    }
    (y, yj)
}

/// Reverse sweep over the augmented forward pass stored in `scratch`.
///
/// Seeds are cotangents of the outputs (`ybar`) and of their input-Jacobian
/// rows (`yjbar`); parameter cotangents are *added* into `grad`.
fn reverse_from_seeds(
    p: &NetParams,
    x: StateVec,
    scratch: &Scratch,
    ybar: [f64; 3],
    yjbar: [[f64; 2]; 3],
    grad: &mut [f64],
) {
    debug_assert_eq!(grad.len(), PARAM_COUNT);
    let f = &p.flat;
    let last = HIDDEN_LAYERS - 1;

    // Output layer: y = Wout s + c, Yj = Wout S with S = d ⊙ U.
    let mut sbar = [0.0; HIDDEN_WIDTH];
    let mut cap_sbar = [[0.0; 2]; HIDDEN_WIDTH];
    {
        let mut post = [[0.0; 2]; HIDDEN_WIDTH];
        for j in 0..HIDDEN_WIDTH {
            let d = 1.0 - scratch.acts[last][j] * scratch.acts[last][j];
            post[j] = [
                d * scratch.utan[last][j][0],
                d * scratch.utan[last][j][1],
            ];
        }
        for r in 0..OUTPUT_DIM {
            let row = WOUT_OFF + r * HIDDEN_WIDTH;
            let yb = ybar[r];
            let [j0, j1] = yjbar[r];
            grad[BOUT_OFF + r] += yb;
            for j in 0..HIDDEN_WIDTH {
                grad[row + j] += yb * scratch.acts[last][j] + j0 * post[j][0] + j1 * post[j][1];
                let wv = f[row + j];
                sbar[j] += wv * yb;
                cap_sbar[j][0] += wv * j0;
                cap_sbar[j][1] += wv * j1;
            }
        }
    }

    // Hidden layers, last to first.
    for i in (0..HIDDEN_LAYERS).rev() {
        let mut ubar = [0.0; HIDDEN_WIDTH];
        let mut cap_ubar = [[0.0; 2]; HIDDEN_WIDTH];
        for r in 0..HIDDEN_WIDTH {
            let s = scratch.acts[i][r];
            let d = 1.0 - s * s;
            let u = scratch.utan[i][r];
            // The tangent path S = d ⊙ U feeds back into s through d.
            let dbar = u[0] * cap_sbar[r][0] + u[1] * cap_sbar[r][1];
            let sbar_total = sbar[r] - 2.0 * s * dbar;
            ubar[r] = d * sbar_total;
            cap_ubar[r] = [d * cap_sbar[r][0], d * cap_sbar[r][1]];
        }
        if i == 0 {
            // Previous "layer" is the input: z = x, Z = identity.
            for r in 0..HIDDEN_WIDTH {
                let row = W0_OFF + r * INPUT_DIM;
                grad[row] += ubar[r] * x.x1 + cap_ubar[r][0];
                grad[row + 1] += ubar[r] * x.x2 + cap_ubar[r][1];
                grad[B0_OFF + r] += ubar[r];
            }
            return;
        }
        let w = hid_w_off(i);
        let b = hid_b_off(i);
        let mut prev_post = [[0.0; 2]; HIDDEN_WIDTH];
        for j in 0..HIDDEN_WIDTH {
            let d = 1.0 - scratch.acts[i - 1][j] * scratch.acts[i - 1][j];
            prev_post[j] = [
                d * scratch.utan[i - 1][j][0],
                d * scratch.utan[i - 1][j][1],
            ];
        }
        let mut sbar_prev = [0.0; HIDDEN_WIDTH];
        let mut cap_sbar_prev = [[0.0; 2]; HIDDEN_WIDTH];
        for r in 0..HIDDEN_WIDTH {
            let row = w + r * HIDDEN_WIDTH;
            let ub = ubar[r];
            let [u0, u1] = cap_ubar[r];
            grad[b + r] += ub;
            for j in 0..HIDDEN_WIDTH {
                grad[row + j] +=
                    ub * scratch.acts[i - 1][j] + u0 * prev_post[j][0] + u1 * prev_post[j][1];
                let wv = f[row + j];
                sbar_prev[j] += wv * ub;
                cap_sbar_prev[j][0] += wv * u0;
                cap_sbar_prev[j][1] += wv * u1;
            }
        }
        sbar = sbar_prev;
        cap_sbar = cap_sbar_prev;
    }
}

/// Forward pass with exact input derivatives of all three outputs.
pub fn forward_with_input_grad(p: &NetParams, x: StateVec) -> NetEval {
    let mut scratch = Scratch::new();
    let (y, yj) = forward_into(p, x, &mut scratch);
    NetEval {
        vhat: y[0],
        l: StateVec::new(y[1], y[2]),
        grad_vhat: StateVec::new(yj[0][0], yj[0][1]),
        jac_l: Mat2::new(yj[1][0], yj[1][1], yj[2][0], yj[2][1]),
    }
}

/// Step for the finite-difference Hessian of `vhat`.
pub const HESSIAN_FD_STEP: f64 = 1e-4;

/// Symmetrized central finite differences of the exact input gradient.
pub fn input_hessian(p: &NetParams, x: StateVec) -> Mat2 {
    input_hessian_with_step(p, x, HESSIAN_FD_STEP)
}

/// [`input_hessian`] with an explicit difference step.
pub fn input_hessian_with_step(p: &NetParams, x: StateVec, h: f64) -> Mat2 {
    let gx_p = forward_with_input_grad(p, StateVec::new(x.x1 + h, x.x2)).grad_vhat;
    let gx_m = forward_with_input_grad(p, StateVec::new(x.x1 - h, x.x2)).grad_vhat;
    let gy_p = forward_with_input_grad(p, StateVec::new(x.x1, x.x2 + h)).grad_vhat;
    let gy_m = forward_with_input_grad(p, StateVec::new(x.x1, x.x2 - h)).grad_vhat;
    let col1 = (gx_p - gx_m) / (2.0 * h);
    let col2 = (gy_p - gy_m) / (2.0 * h);
    let raw = Mat2::new(col1.x1, col2.x1, col1.x2, col2.x2);
    (raw + raw.transpose()) * 0.5
}

/// Parameter gradient of `vhat(x)` alone (used by anchor-term checks).
#[cfg(test)]
fn vhat_param_gradient(p: &NetParams, x: StateVec) -> Vec<f64> {
    let mut scratch = Scratch::new();
    let _ = forward_into(p, x, &mut scratch);
    let mut grad = vec![0.0; PARAM_COUNT];
    reverse_from_seeds(
        p,
        x,
        &scratch,
        [1.0, 0.0, 0.0],
        [[0.0; 2]; 3],
        &mut grad,
    );
    grad
}

/// Loss weights: `L = L_dyn + lambda1 L_orth + lambda2 L_0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Denominator regularizer of the orthogonality term.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            delta: 1e-3,
        }
    }
}

/// A collocation point with its frozen drift and diffusion diagonal.
///
/// Neither depends on the parameters, so they are computed once when the
/// point set is assembled and never re-evaluated in the training loop.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainPoint {
    pub x: StateVec,
    pub drift: StateVec,
    /// Diagonal of `a(x) = sigma(x) sigma(x)^T` (both systems are diagonal).
    pub a_diag: StateVec,
}

impl TrainPoint {
    pub fn build(sys: &System, noise: &NoiseParams, x: StateVec) -> Result<Self, ModelError> {
        let drift = sys.drift(x)?;
        let a = sys.diffusion(x, noise);
        Ok(Self {
            x,
            drift,
            a_diag: StateVec::new(a.m11, a.m22),
        })
    }
}

/// The three loss terms, unweighted.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossTerms {
    /// Mean squared decomposition residual `|b + 1/2 a grad V - l|^2`.
    pub dynamics: f64,
    /// Mean normalized squared overlap `(grad V . l)^2 / (|grad V|^2 |l|^2 + delta)`.
    pub orthogonality: f64,
    /// Squared landscape value at the reference attractor, `V(x_ref)^2`.
    pub anchor: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.dynamics + w.lambda1 * self.orthogonality + w.lambda2 * self.anchor
    }

    pub fn is_finite(&self) -> bool {
        self.dynamics.is_finite() && self.orthogonality.is_finite() && self.anchor.is_finite()
    }
}

/// Per-point pieces shared by the loss and its gradient.
struct PointTerms {
    dynamics: f64,
    orthogonality: f64,
    /// Seed on the full landscape gradient `grad V`.
    gbar: StateVec,
    /// Seed on the rotational head `l`.
    lbar: StateVec,
}

fn point_terms(pt: &TrainPoint, x_ref: StateVec, w: &LossWeights, eval: &NetEval) -> PointTerms {
    let shift = (pt.x - x_ref) * 2.0;
    let g = eval.grad_vhat + shift;
    let l = eval.l;
    let r = pt.drift + StateVec::new(0.5 * pt.a_diag.x1 * g.x1, 0.5 * pt.a_diag.x2 * g.x2) - l;
    let dynamics = r.norm_sq();
    let c = g.dot(l);
    let q = g.norm_sq() * l.norm_sq() + w.delta;
    let orthogonality = c * c / q;

    // d dyn / dg = a r ; d dyn / dl = -2 r.
    let mut gbar = StateVec::new(pt.a_diag.x1 * r.x1, pt.a_diag.x2 * r.x2);
    let mut lbar = r * -2.0;
    // Quotient rule for the overlap term, scaled by lambda1.
    let s1 = w.lambda1 * 2.0 * c / q;
    let s2 = w.lambda1 * 2.0 * c * c / (q * q);
    gbar += l * s1 - g * (s2 * l.norm_sq());
    lbar += g * s1 - l * (s2 * g.norm_sq());
    PointTerms {
        dynamics,
        orthogonality,
        gbar,
        lbar,
    }
}

/// Loss terms over a batch (means over points; anchor at `x_ref`).
pub fn batch_loss(
    p: &NetParams,
    pts: &[TrainPoint],
    x_ref: StateVec,
    w: &LossWeights,
) -> Result<LossTerms, AdError> {
    if pts.is_empty() {
        return Err(AdError::EmptyBatch);
    }
    let chunks: Vec<(f64, f64)> = pts
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut scratch = Scratch::new();
            let mut dyn_sum = 0.0;
            let mut orth_sum = 0.0;
            for pt in chunk {
                let (y, yj) = forward_into(p, pt.x, &mut scratch);
                let eval = NetEval {
                    vhat: y[0],
                    l: StateVec::new(y[1], y[2]),
                    grad_vhat: StateVec::new(yj[0][0], yj[0][1]),
                    jac_l: Mat2::new(yj[1][0], yj[1][1], yj[2][0], yj[2][1]),
                };
                let t = point_terms(pt, x_ref, w, &eval);
                dyn_sum += t.dynamics;
                orth_sum += t.orthogonality;
            }
            (dyn_sum, orth_sum)
        })
        .collect();
    let (mut dyn_sum, mut orth_sum) = (0.0, 0.0);
    for (d, o) in chunks {
        dyn_sum += d;
        orth_sum += o;
    }
    let n = pts.len() as f64;
    let (v0, _) = forward(p, x_ref);
    Ok(LossTerms {
        dynamics: dyn_sum / n,
        orthogonality: orth_sum / n,
        anchor: v0 * v0,
    })
}

/// Chunk size for parallel batch reductions; fixed so the reduction order
/// (and therefore every bit of the result) is independent of thread count.
const CHUNK: usize = 256;

/// Loss terms and the exact flat gradient of the weighted total.
pub fn batch_loss_gradient(
    p: &NetParams,
    pts: &[TrainPoint],
    x_ref: StateVec,
    w: &LossWeights,
) -> Result<(LossTerms, Vec<f64>), AdError> {
    if pts.is_empty() {
        return Err(AdError::EmptyBatch);
    }
    struct Partial {
        dyn_sum: f64,
        orth_sum: f64,
        grad: Vec<f64>,
    }
    let partials: Vec<Partial> = pts
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut scratch = Scratch::new();
            let mut acc = Partial {
                dyn_sum: 0.0,
                orth_sum: 0.0,
                grad: vec![0.0; PARAM_COUNT],
            };
            for pt in chunk {
                let (y, yj) = forward_into(p, pt.x, &mut scratch);
                let eval = NetEval {
                    vhat: y[0],
                    l: StateVec::new(y[1], y[2]),
                    grad_vhat: StateVec::new(yj[0][0], yj[0][1]),
                    jac_l: Mat2::new(yj[1][0], yj[1][1], yj[2][0], yj[2][1]),
                };
                let t = point_terms(pt, x_ref, w, &eval);
                acc.dyn_sum += t.dynamics;
                acc.orth_sum += t.orthogonality;
                let ybar = [0.0, t.lbar.x1, t.lbar.x2];
                let yjbar = [[t.gbar.x1, t.gbar.x2], [0.0, 0.0], [0.0, 0.0]];
                reverse_from_seeds(p, pt.x, &scratch, ybar, yjbar, &mut acc.grad);
            }
            acc
        })
        .collect();
    let n = pts.len() as f64;
    let mut grad = vec![0.0; PARAM_COUNT];
    let (mut dyn_sum, mut orth_sum) = (0.0, 0.0);
    for part in &partials {
        dyn_sum += part.dyn_sum;
        orth_sum += part.orth_sum;
        for (g, pg) in grad.iter_mut().zip(&part.grad) {
            *g += pg;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    // Anchor term: V(x_ref) = vhat(x_ref) exactly (the shift vanishes there).
    let mut scratch = Scratch::new();
    let (y, _) = forward_into(p, x_ref, &mut scratch);
    let anchor = y[0] * y[0];
    reverse_from_seeds(
        p,
        x_ref,
        &scratch,
        [w.lambda2 * 2.0 * y[0], 0.0, 0.0],
        [[0.0; 2]; 3],
        &mut grad,
    );
    Ok((
        LossTerms {
            dynamics: dyn_sum / n,
            orthogonality: orth_sum / n,
            anchor,
        },
        grad,
    ))
}

/// Randomized central-finite-difference audit of the differentiation engine.
///
/// Performs exactly `checks` comparisons, split evenly between the two
/// derivative flavors the trainer relies on:
///
/// - parameter gradients of the full batch loss, at randomly drawn parameter
///   coordinates, against `(L(p + h e_i) - L(p - h e_i)) / 2h`; and
/// - input gradients of the network heads (`vhat`, `l1`, `l2`) at randomly
///   drawn batch states and coordinates, against the same central stencil on
///   the plain forward pass.
///
/// Returns the largest relative error `|exact - fd| / max(|exact|, |fd|)`
/// observed. Coordinates whose exact derivative is vanishingly small
/// relative to the gradient's scale are redrawn — a relative comparison is
/// meaningless where the finite difference is pure cancellation noise.
pub fn gradient_check_sweep(
    p: &NetParams,
    pts: &[TrainPoint],
    x_ref: StateVec,
    w: &LossWeights,
    checks: usize,
    seed: u64,
) -> Result<f64, AdError> {
    let (_, grad) = batch_loss_gradient(p, pts, x_ref, w)?;
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut flat = p.flat().to_vec();
    let loss_at = |flat: &[f64]| -> Result<f64, AdError> {
        Ok(batch_loss(&NetParams::from_flat(flat.to_vec())?, pts, x_ref, w)?.total(w))
    };

    let param_checks = checks / 2;
    let mut done = 0usize;
    // The redraw loop terminates: a constant zero loss would make every
    // coordinate ill-scaled, so cap the redraws and accept what was measured.
    let mut draws = 0usize;
    while done < param_checks && draws < 200 * checks.max(1) {
        draws += 1;
        let i = rng.random_range(0..PARAM_COUNT);
        if grad[i].abs() < 1e-4 * gmax.max(1e-9) {
            continue;
        }
        let keep = flat[i];
        flat[i] = keep + h;
        let fp = loss_at(&flat)?;
        flat[i] = keep - h;
        let fm = loss_at(&flat)?;
        flat[i] = keep;
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()));
        done += 1;
    }

    let head_at = |x: StateVec, head: usize| -> f64 {
        let (vhat, l) = forward(p, x);
        match head {
            0 => vhat,
            1 => l.x1,
            _ => l.x2,
        }
    };
    let mut draws = 0usize;
    while done < checks && draws < 200 * checks.max(1) {
        draws += 1;
        let x = pts[rng.random_range(0..pts.len())].x;
        let head = rng.random_range(0..OUTPUT_DIM);
        let coord = rng.random_range(0..INPUT_DIM);
        let e = forward_with_input_grad(p, x);
        let exact = match (head, coord) {
            (0, 0) => e.grad_vhat.x1,
            (0, 1) => e.grad_vhat.x2,
            (1, 0) => e.jac_l.m11,
            (1, 1) => e.jac_l.m12,
            (2, 0) => e.jac_l.m21,
            _ => e.jac_l.m22,
        };
        let step = if coord == 0 {
            StateVec::new(h, 0.0)
        } else {
            StateVec::new(0.0, h)
        };
        let fd = (head_at(x + step, head) - head_at(x - step, head)) / (2.0 * h);
        if exact.abs().max(fd.abs()) < 1e-4 * (1.0 + e.vhat.abs()) {
            continue;
        }
        worst = worst.max((exact - fd).abs() / exact.abs().max(fd.abs()));
        done += 1;
    }
    Ok(worst)
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators and step counter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    hyper: AdamHyper,
}

impl AdamState {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            m: vec![0.0; PARAM_COUNT],
            v: vec![0.0; PARAM_COUNT],
            step: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    pub fn validate(&self) -> Result<(), AdError> {
        for len in [self.m.len(), self.v.len()] {
            if len != PARAM_COUNT {
                return Err(AdError::ShapeMismatch {
                    expected: PARAM_COUNT,
                    got: len,
                });
            }
        }
        Ok(())
    }

    /// One Adam update with bias correction, in place.
    pub fn step(&mut self, p: &mut NetParams, grad: &[f64]) -> Result<(), AdError> {
        if grad.len() != PARAM_COUNT {
            return Err(AdError::ShapeMismatch {
                expected: PARAM_COUNT,
                got: grad.len(),
            });
        }
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        for i in 0..PARAM_COUNT {
            let g = grad[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            p.flat[i] -= h.lr * mhat / (vhat.sqrt() + h.epsilon);
        }
        Ok(())
    }
}
