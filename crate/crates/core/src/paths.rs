//! Most probable transition paths, two independent ways.
//!
//! The *learned* route integrates the fluctuation field of a trained
//! landscape backwards in time: uphill trajectories obey
//!
//! ```text
//!     dx/dt = b(x) + a(x) grad V(x)
//! ```
//!
//! so running `dx/dt = -(b + a grad V)` from a boundary point relaxes onto
//! the attractor, and reversing the record yields the most probable path
//! from the attractor outward. The *shooting* route needs no network at
//! all: it integrates the Hamiltonian characteristics
//!
//! ```text
//!     dx/dt = b + a p,      dp/dt = -(grad b)^T p - 1/2 grad_x <p, a(x) p>
//! ```
//!
//! seeded on the unstable subspace of the linearized characteristic flow at
//! `(x_ref, 0)`. That subspace is exactly the graph `{(v, H v)}` of the
//! fixed-point Hessian `H` solving the Riccati equation — the invariant
//! unstable plane of the block matrix `[[J, a], [0, -J^T]]` — so launches
//! use `x0 = x_ref + r d(theta)`, `p0 = H (x0 - x_ref)` and a search over
//! the angle `theta`. Both routes report the Freidlin--Wentzell action
//! `1/2 integral (xdot - b)^T a^{-1} (xdot - b) dt`, which for the shooting
//! form reduces to `1/2 integral <p, a p> dt`.

use crate::dynsys::{self, DynError};
use crate::landscape::{lyapunov_hessian, LandscapeError, QuasipotentialModel};
use crate::linalg::{point_segment_distance, BoxRegion, StateVec};
use crate::model::{ModelError, NoiseParams, System};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathError {
    #[error(
        "reverse integration missed the attractor: closest approach {closest:.3e} after {steps} steps"
    )]
    NoConvergence { closest: f64, steps: u64 },
    #[error("reverse integration left the working region near ({x1:.4}, {x2:.4})")]
    LeftRegion { x1: f64, x2: f64 },
    #[error("no launch angle reaches the target: best miss distance {best_miss:.3e}")]
    TargetMissed { best_miss: f64 },
    #[error("path endpoint coincides with the attractor")]
    DegenerateTarget,
    #[error("state became non-finite during path integration")]
    NonFinite,
    #[error("operation needs momentum samples, but the path carries none")]
    MissingMomenta,
    #[error("path has too few samples")]
    TooShort,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
}

/// How a path was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    /// Reverse-time integration of a trained fluctuation field.
    Learned,
    /// Hamiltonian characteristic shooting (network-independent).
    Shooting,
}

/// An ordered transition path from the attractor toward a boundary point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Path {
    pub kind: PathKind,
    /// Strictly increasing sample times.
    pub t: Vec<f64>,
    /// States, aligned with `t`.
    pub x: Vec<StateVec>,
    /// Momenta aligned with `t`; present only for shooting paths.
    pub p: Option<Vec<StateVec>>,
    /// Running action from the first sample; non-decreasing.
    pub cumulative_action: Vec<f64>,
}

impl Path {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn start(&self) -> StateVec {
        self.x[0]
    }

    pub fn end(&self) -> StateVec {
        *self.x.last().expect("paths are never empty")
    }

    /// Total accumulated action.
    pub fn action(&self) -> f64 {
        *self.cumulative_action.last().unwrap_or(&0.0)
    }

    /// Structural invariants: aligned lengths, finite states, strictly
    /// monotone time, non-decreasing and non-negative action.
    pub fn validate(&self) -> Result<(), PathError> {
        if self.x.len() < 2 {
            return Err(PathError::TooShort);
        }
        let aligned = self.t.len() == self.x.len()
            && self.cumulative_action.len() == self.x.len()
            && self.p.as_ref().is_none_or(|p| p.len() == self.x.len());
        if !aligned {
            return Err(PathError::TooShort);
        }
        for w in self.t.windows(2) {
            if !(w[1] > w[0]) {
                return Err(PathError::NonFinite);
            }
        }
        let states_ok = self.x.iter().all(|x| x.is_finite());
        let action_ok = self.cumulative_action.windows(2).all(|w| w[1] >= w[0] - 1e-12)
            && self.cumulative_action.iter().all(|a| *a >= 0.0 && a.is_finite());
        if !states_ok || !action_ok {
            return Err(PathError::NonFinite);
        }
        Ok(())
    }

    /// Linear interpolation of `x2` at the first segment crossing `x1 = c`.
    pub fn x2_at_x1(&self, c: f64) -> Option<f64> {
        for w in self.x.windows(2) {
            let (a, b) = (w[0], w[1]);
            if (a.x1 - c) * (b.x1 - c) <= 0.0 && a.x1 != b.x1 {
                let s = (c - a.x1) / (b.x1 - a.x1);
                if (0.0..=1.0).contains(&s) {
                    return Some(a.x2 + s * (b.x2 - a.x2));
                }
            }
        }
        None
    }
}

/// Controls for reverse-time fluctuation-field integration.
#[derive(Clone, Copy, Debug)]
pub struct ReverseOptions {
    /// Fixed RK4 step.
    pub step: f64,
    pub max_steps: u64,
    /// Stop once within this distance of the attractor.
    pub converge_radius: f64,
    /// Initial displacement from the end point toward the attractor,
    /// stepping off the fluctuation field's equilibrium at a landscape
    /// saddle or boundary extremum.
    pub start_offset: f64,
    /// Keep every n-th integration step as a path sample.
    pub sample_every: u64,
    /// Working box; `None` derives one from the system's fixed points.
    pub region: Option<BoxRegion>,
}

impl Default for ReverseOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_steps: 10_000_000,
            converge_radius: 1e-3,
            start_offset: 1e-3,
            sample_every: 10,
            region: None,
        }
    }
}

/// Working box enclosing every fixed point with generous margins, kept
/// clear of the vegetation drift's pole.
fn default_region(sys: &System) -> Result<BoxRegion, DynError> {
    let fps = dynsys::find_fixed_points(sys)?;
    let mut bbox = BoxRegion::new(
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for fp in &fps {
        bbox.x1_min = bbox.x1_min.min(fp.location.x1);
        bbox.x1_max = bbox.x1_max.max(fp.location.x1);
        bbox.x2_min = bbox.x2_min.min(fp.location.x2);
        bbox.x2_max = bbox.x2_max.max(fp.location.x2);
    }
    Ok(dynsys::padded_window(sys, &bbox.padded(1.0)))
}

/// Fluctuation-field descent rate and action integrand in one landscape
/// evaluation: returns `(-(b + a grad V), 1/2 <grad V, a grad V>)`.
fn reverse_rhs(model: &QuasipotentialModel, x: StateVec) -> Result<(StateVec, f64), PathError> {
    let e = model.eval(x);
    let b = model.system().drift(x)?;
    let ag = model.system().diffusion(x, model.noise()).mul_vec(e.grad_v);
    Ok((-(b + ag), 0.5 * e.grad_v.dot(ag)))
}

/// Most probable path from the attractor to `end`, by reverse-time
/// integration of the learned fluctuation field.
///
/// Integrates `dx/dt = -(b + a grad V)` from `end` (displaced by
/// `start_offset` toward the attractor) until within `converge_radius` of
/// the attractor, then reverses the record so the result runs attractor to
/// `end`. The action is accumulated as `1/2 integral <grad V, a grad V> dt`,
/// the Freidlin--Wentzell integrand along a fluctuation trajectory.
pub fn mpp_reverse(
    model: &QuasipotentialModel,
    end: StateVec,
    opts: &ReverseOptions,
) -> Result<Path, PathError> {
    let x_ref = model.x_ref();
    let toward = (x_ref - end).unit().ok_or(PathError::DegenerateTarget)?;
    let start = end + toward * opts.start_offset;
    let region = match opts.region {
        Some(r) => r,
        None => default_region(model.system())?,
    };
    let h = opts.step;

    let mut rev_t = vec![0.0];
    let mut rev_x = vec![start];
    let mut rev_cum = vec![0.0];

    let mut y = start;
    let (mut k1, mut g_here) = reverse_rhs(model, y)?;
    let mut cum = 0.0;
    let mut closest = (y - x_ref).norm();
    let mut converged = false;
    let mut step_idx: u64 = 0;
    while step_idx < opts.max_steps {
        let k2 = reverse_rhs(model, y + k1 * (0.5 * h))?.0;
        let k3 = reverse_rhs(model, y + k2 * (0.5 * h))?.0;
        let k4 = reverse_rhs(model, y + k3 * h)?.0;
        y += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        step_idx += 1;
        if !y.is_finite() {
            return Err(PathError::NonFinite);
        }
        if !region.contains(y) {
            return Err(PathError::LeftRegion { x1: y.x1, x2: y.x2 });
        }
        let (k1_next, g_next) = reverse_rhs(model, y)?;
        cum += 0.5 * (g_here + g_next) * h;
        k1 = k1_next;
        g_here = g_next;
        let dist = (y - x_ref).norm();
        closest = closest.min(dist);
        let done = dist <= opts.converge_radius;
        if done || step_idx % opts.sample_every == 0 {
            rev_t.push(step_idx as f64 * h);
            rev_x.push(y);
            rev_cum.push(cum);
        }
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PathError::NoConvergence {
            closest,
            steps: opts.max_steps,
        });
    }

    // Flip to run attractor -> end; re-zero time and action at the new start.
    let total_t = *rev_t.last().unwrap();
    let total_a = *rev_cum.last().unwrap();
    let n = rev_x.len();
    let mut t = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut cumulative_action = Vec::with_capacity(n);
    for i in (0..n).rev() {
        t.push(total_t - rev_t[i]);
        x.push(rev_x[i]);
        cumulative_action.push((total_a - rev_cum[i]).max(0.0));
    }
    Ok(Path {
        kind: PathKind::Learned,
        t,
        x,
        p: None,
        cumulative_action,
    })
}

/// Controls for Hamiltonian shooting.
#[derive(Clone, Copy, Debug)]
pub struct ShootingOptions {
    /// Seed displacement from the attractor along the unstable subspace.
    pub launch_radius: f64,
    /// Accept a trajectory passing within this distance of the target.
    pub hit_tolerance: f64,
    /// Fixed RK4 step.
    pub step: f64,
    /// Per-trajectory time horizon.
    pub max_time: f64,
    /// Number of launch angles in the coarse scan.
    pub coarse_angles: usize,
    /// Abandon a trajectory whose action exceeds this bound.
    pub action_cap: f64,
    /// Keep every n-th integration step as a path sample.
    pub sample_every: u64,
    /// Working box; `None` derives one from the system's fixed points.
    pub region: Option<BoxRegion>,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            launch_radius: 1e-4,
            hit_tolerance: 1e-3,
            step: 1e-3,
            max_time: 400.0,
            coarse_angles: 256,
            action_cap: 5.0,
            sample_every: 10,
            region: None,
        }
    }
}

/// Characteristic right-hand side and action integrand:
/// `(dx/dt, dp/dt, 1/2 <p, a p>)`.
fn characteristic_rhs(
    sys: &System,
    noise: &NoiseParams,
    x: StateVec,
    p: StateVec,
) -> Result<(StateVec, StateVec, f64), ModelError> {
    let b = sys.drift(x)?;
    let ap = sys.diffusion(x, noise).mul_vec(p);
    let jt = sys.drift_jacobian(x)?.transpose();
    let pdot = -(jt.mul_vec(p)) - sys.diffusion_quad_gradient(x, p, noise);
    Ok((b + ap, pdot, 0.5 * p.dot(ap)))
}

/// Outcome of integrating one launch angle.
#[derive(Clone, Copy, Debug)]
struct Probe {
    /// Smallest distance to the target along the trajectory.
    best_dist: f64,
    /// Integration step index at the closest approach.
    best_step: u64,
    /// Which side of the motion the target sat on at closest approach
    /// (sign of the cross product of velocity and offset-to-target).
    best_side: f64,
    /// Phase-space state one step before the closest approach.
    pre_best: (StateVec, StateVec, f64, f64), // (x, p, t, cumulative action)
}

/// Recorded samples of the winning trajectory.
struct Trace {
    step_ids: Vec<u64>,
    t: Vec<f64>,
    x: Vec<StateVec>,
    p: Vec<StateVec>,
    cum: Vec<f64>,
}

/// Integrates one characteristic trajectory, tracking the closest approach
/// to `target`. Drift-domain violations and non-finite states terminate the
/// trajectory (they mark hopeless launch angles, not caller errors).
fn shoot_trace(
    sys: &System,
    noise: &NoiseParams,
    seed_x: StateVec,
    seed_p: StateVec,
    target: StateVec,
    opts: &ShootingOptions,
    region: &BoxRegion,
    mut store: Option<&mut Trace>,
) -> Probe {
    let h = opts.step;
    let max_steps = (opts.max_time / h).ceil() as u64;
    // Once this far beyond the best approach, the pass is over.
    let leave_margin = 0.5;

    let (mut x, mut p) = (seed_x, seed_p);
    let mut cum = 0.0;
    let mut t = 0.0;
    let Ok((mut kx1, mut kp1, mut g_here)) = characteristic_rhs(sys, noise, x, p) else {
        return Probe {
            best_dist: f64::INFINITY,
            best_step: 0,
            best_side: 0.0,
            pre_best: (seed_x, seed_p, 0.0, 0.0),
        };
    };
    let mut probe = Probe {
        best_dist: (x - target).norm(),
        best_step: 0,
        best_side: kx1.cross(target - x),
        pre_best: (x, p, 0.0, 0.0),
    };
    if let Some(trace) = &mut store {
        trace.step_ids.push(0);
        trace.t.push(0.0);
        trace.x.push(x);
        trace.p.push(p);
        trace.cum.push(0.0);
    }

    let mut step_idx: u64 = 0;
    while step_idx < max_steps {
        let (prev_x, prev_p, prev_t, prev_cum) = (x, p, t, cum);
        let step = (|| -> Result<(StateVec, StateVec), ModelError> {
            let (kx2, kp2, _) =
                characteristic_rhs(sys, noise, x + kx1 * (0.5 * h), p + kp1 * (0.5 * h))?;
            let (kx3, kp3, _) =
                characteristic_rhs(sys, noise, x + kx2 * (0.5 * h), p + kp2 * (0.5 * h))?;
            let (kx4, kp4, _) = characteristic_rhs(sys, noise, x + kx3 * h, p + kp3 * h)?;
            Ok((
                x + (kx1 + (kx2 + kx3) * 2.0 + kx4) * (h / 6.0),
                p + (kp1 + (kp2 + kp3) * 2.0 + kp4) * (h / 6.0),
            ))
        })();
        let Ok((x_next, p_next)) = step else { break };
        if !x_next.is_finite() || !p_next.is_finite() || !region.contains(x_next) {
            break;
        }
        let Ok((kx_next, kp_next, g_next)) = characteristic_rhs(sys, noise, x_next, p_next)
        else {
            break;
        };
        x = x_next;
        p = p_next;
        cum += 0.5 * (g_here + g_next) * h;
        t += h;
        step_idx += 1;
        kx1 = kx_next;
        kp1 = kp_next;
        g_here = g_next;

        let dist = (x - target).norm();
        if dist < probe.best_dist {
            probe.best_dist = dist;
            probe.best_step = step_idx;
            probe.best_side = kx1.cross(target - x);
            probe.pre_best = (prev_x, prev_p, prev_t, prev_cum);
        }
        if let Some(trace) = &mut store {
            if step_idx % opts.sample_every == 0 {
                trace.step_ids.push(step_idx);
                trace.t.push(t);
                trace.x.push(x);
                trace.p.push(p);
                trace.cum.push(cum);
            }
        }
        if cum > opts.action_cap || dist > probe.best_dist + leave_margin {
            break;
        }
    }
    probe
}

/// Most probable path from the attractor at `from` to `target` by shooting
/// Hamiltonian characteristics — an oracle independent of any trained
/// network.
///
/// A coarse scan over launch angles is refined by bisection on the signed
/// side of the closest approach (golden-section on the miss distance when
/// no sign change brackets the target). The winner is re-integrated with
/// sample storage and trimmed at its closest approach via one partial RK4
/// step. Selection is deterministic: smallest miss, ties to the smaller
/// angle.
pub fn shooting_mpp(
    sys: &System,
    noise: &NoiseParams,
    from: StateVec,
    target: StateVec,
    opts: &ShootingOptions,
) -> Result<Path, PathError> {
    if (target - from).norm() <= opts.launch_radius {
        return Err(PathError::DegenerateTarget);
    }
    let j = sys.drift_jacobian(from)?;
    let a0 = sys.diffusion(from, noise);
    let h_ref = lyapunov_hessian(j, a0)?;
    let region = match opts.region {
        Some(r) => r,
        None => default_region(sys)?,
    };
    let seed = |theta: f64| {
        let d = StateVec::new(theta.cos(), theta.sin());
        let x0 = from + d * opts.launch_radius;
        (x0, h_ref.mul_vec(x0 - from))
    };
    let probe_at = |theta: f64| {
        let (x0, p0) = seed(theta);
        shoot_trace(sys, noise, x0, p0, target, opts, &region, None)
    };

    // Coarse scan over the full circle of launch angles.
    let n = opts.coarse_angles.max(8);
    let step_angle = std::f64::consts::TAU / n as f64;
    let mut scan = Vec::with_capacity(n);
    for i in 0..n {
        let theta = step_angle * i as f64;
        scan.push((theta, probe_at(theta)));
    }
    let mut best_theta = scan[0].0;
    let mut best_dist = scan[0].1.best_dist;
    for (theta, probe) in &scan {
        if probe.best_dist < best_dist {
            best_dist = probe.best_dist;
            best_theta = *theta;
        }
    }

    // Refinement 1: bisection on the signed side over the adjacent scan
    // pair that brackets a sign change closest to the target.
    let gate = 0.5;
    let mut bracket: Option<(f64, f64, f64)> = None; // (theta_lo, side_lo, theta_hi)
    let mut bracket_score = f64::INFINITY;
    for i in 0..n {
        let (theta_lo, probe_lo) = &scan[i];
        let (_, probe_hi) = &scan[(i + 1) % n];
        let theta_hi = theta_lo + step_angle;
        if probe_lo.best_dist < gate
            && probe_hi.best_dist < gate
            && probe_lo.best_side * probe_hi.best_side < 0.0
        {
            let closeness = probe_lo.best_dist.min(probe_hi.best_dist);
            if closeness < bracket_score {
                bracket_score = closeness;
                bracket = Some((*theta_lo, probe_lo.best_side, theta_hi));
            }
        }
    }
    if let Some((mut lo, side_lo, mut hi)) = bracket {
        let mut side_lo = side_lo;
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            let probe = probe_at(mid);
            if probe.best_dist < best_dist {
                best_dist = probe.best_dist;
                best_theta = mid;
            }
            if probe.best_side * side_lo <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
                side_lo = probe.best_side;
            }
            if best_dist < opts.hit_tolerance * 1e-3 {
                break;
            }
        }
    }
    // Refinement 2: golden-section on the miss distance around the best
    // angle (covers tangential approaches with no side flip).
    if best_dist > opts.hit_tolerance {
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (best_theta - step_angle, best_theta + step_angle);
        let (mut t1, mut t2) = (b - phi * (b - a), a + phi * (b - a));
        let (mut f1, mut f2) = (probe_at(t1).best_dist, probe_at(t2).best_dist);
        for _ in 0..70 {
            if f1 < f2 {
                b = t2;
                t2 = t1;
                f2 = f1;
                t1 = b - phi * (b - a);
                f1 = probe_at(t1).best_dist;
            } else {
                a = t1;
                t1 = t2;
                f1 = f2;
                t2 = a + phi * (b - a);
                f2 = probe_at(t2).best_dist;
            }
        }
        let (theta_g, dist_g) = if f1 < f2 { (t1, f1) } else { (t2, f2) };
        if dist_g < best_dist {
            best_dist = dist_g;
            best_theta = theta_g;
        }
    }
    if best_dist > opts.hit_tolerance {
        return Err(PathError::TargetMissed {
            best_miss: best_dist,
        });
    }

    // Final pass: re-integrate the winner with sample storage.
    let mut trace = Trace {
        step_ids: Vec::new(),
        t: Vec::new(),
        x: Vec::new(),
        p: Vec::new(),
        cum: Vec::new(),
    };
    let (x0, p0) = seed(best_theta);
    let probe = shoot_trace(sys, noise, x0, p0, target, opts, &region, Some(&mut trace));

    // Keep samples strictly before the closest approach, then append a
    // refined terminal point: one partial RK4 step from the pre-approach
    // state, sized by projecting the remaining offset on the velocity.
    let keep = trace
        .step_ids
        .iter()
        .take_while(|id| **id < probe.best_step)
        .count()
        .max(1);
    trace.step_ids.truncate(keep);
    trace.t.truncate(keep);
    trace.x.truncate(keep);
    trace.p.truncate(keep);
    trace.cum.truncate(keep);

    let (xb, pb, tb, cumb) = probe.pre_best;
    let (kx, kp, g_here) = characteristic_rhs(sys, noise, xb, pb)?;
    let speed_sq = kx.norm_sq().max(1e-300);
    let tau = ((target - xb).dot(kx) / speed_sq).clamp(0.0, 2.0 * opts.step);
    let (x_end, p_end, g_end) = if tau > 0.0 {
        let (kx2, kp2, _) =
            characteristic_rhs(sys, noise, xb + kx * (0.5 * tau), pb + kp * (0.5 * tau))?;
        let (kx3, kp3, _) =
            characteristic_rhs(sys, noise, xb + kx2 * (0.5 * tau), pb + kp2 * (0.5 * tau))?;
        let (kx4, kp4, _) = characteristic_rhs(sys, noise, xb + kx3 * tau, pb + kp3 * tau)?;
        let xe = xb + (kx + (kx2 + kx3) * 2.0 + kx4) * (tau / 6.0);
        let pe = pb + (kp + (kp2 + kp3) * 2.0 + kp4) * (tau / 6.0);
        let ge = characteristic_rhs(sys, noise, xe, pe)?.2;
        (xe, pe, ge)
    } else {
        (xb, pb, g_here)
    };
    let end_miss = (x_end - target).norm();
    if end_miss > opts.hit_tolerance {
        return Err(PathError::TargetMissed { best_miss: end_miss });
    }
    if trace.t.len() > 1 && trace.t.last().copied().unwrap_or(0.0) >= tb + tau {
        // The last kept sample was the pre-approach state itself.
        trace.t.pop();
        trace.x.pop();
        trace.p.pop();
        trace.cum.pop();
    }
    trace.t.push(tb + tau.max(opts.step * 1e-6));
    trace.x.push(x_end);
    trace.p.push(p_end);
    trace.cum.push(cumb + 0.5 * (g_here + g_end) * tau);

    let path = Path {
        kind: PathKind::Shooting,
        t: trace.t,
        x: trace.x,
        p: Some(trace.p),
        cumulative_action: trace.cum,
    };
    path.validate()?;
    Ok(path)
}

/// Symmetric Hausdorff distance between two path polylines, measured after
/// resampling both to fine uniform arc spacing.
pub fn path_distance(p1: &Path, p2: &Path) -> f64 {
    const SPACING: f64 = 2e-3;
    let a = dynsys::resample_polyline(&p1.x, SPACING);
    let b = dynsys::resample_polyline(&p2.x, SPACING);
    let one_sided = |from: &[StateVec], to: &[StateVec]| {
        from.iter()
            .map(|q| {
                to.windows(2)
                    .map(|w| point_segment_distance(*q, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0f64, f64::max)
    };
    one_sided(&a, &b).max(one_sided(&b, &a))
}

/// Location and verdict of the transient-dip test on a coordinate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MoistureDip {
    /// State at the minimum of `x2` along the path.
    pub location: StateVec,
    /// True when the minimum is strictly interior and strictly below both
    /// endpoint values — the "down, then up" signature.
    pub verdict: bool,
}

/// Checks whether `x2` dips strictly below both endpoints in the interior
/// of the path.
pub fn moisture_dip_check(path: &Path) -> MoistureDip {
    let mut arg = 0usize;
    for (i, x) in path.x.iter().enumerate() {
        if x.x2 < path.x[arg].x2 {
            arg = i;
        }
    }
    let interior = arg > 0 && arg + 1 < path.x.len();
    let min_x2 = path.x[arg].x2;
    MoistureDip {
        location: path.x[arg],
        verdict: interior && min_x2 < path.start().x2 && min_x2 < path.end().x2,
    }
}

/// Largest absolute Hamiltonian value `<b, p> + 1/2 <p, a p>` over a
/// shooting path's samples; characteristics live on the zero-energy shell.
pub fn max_hamiltonian(path: &Path, sys: &System, noise: &NoiseParams) -> Result<f64, PathError> {
    let momenta = path.p.as_ref().ok_or(PathError::MissingMomenta)?;
    let mut worst = 0.0f64;
    for (x, p) in path.x.iter().zip(momenta) {
        let b = sys.drift(*x)?;
        let ap = sys.diffusion(*x, noise).mul_vec(*p);
        worst = worst.max((b.dot(*p) + 0.5 * p.dot(ap)).abs());
    }
    Ok(worst)
}

/// Trapezoidal `1/2 integral <p, a p> dt` over a shooting path's stored
/// samples. The stored cumulative action integrates the same quantity at
/// full step resolution; this sample-grid form exists to be compared with
/// [`action_from_velocity`] on an identical quadrature grid.
pub fn action_from_momentum(
    path: &Path,
    sys: &System,
    noise: &NoiseParams,
) -> Result<f64, PathError> {
    let momenta = path.p.as_ref().ok_or(PathError::MissingMomenta)?;
    let mut integrand = Vec::with_capacity(path.len());
    for (x, p) in path.x.iter().zip(momenta) {
        let ap = sys.diffusion(*x, noise).mul_vec(*p);
        integrand.push(0.5 * p.dot(ap));
    }
    let mut total = 0.0;
    for i in 1..path.len() {
        total += 0.5 * (integrand[i - 1] + integrand[i]) * (path.t[i] - path.t[i - 1]);
    }
    Ok(total)
}

/// Recomputes a shooting path's action through the Freidlin--Wentzell
/// integrand `1/2 (xdot - b)^T a^{-1} (xdot - b)`, with the velocity taken
/// from the characteristic equations at each sample. Algebraically equal to
/// [`action_from_momentum`] on the same sample grid; exercises the
/// inverse-diffusion code path.
pub fn action_from_velocity(
    path: &Path,
    sys: &System,
    noise: &NoiseParams,
) -> Result<f64, PathError> {
    let momenta = path.p.as_ref().ok_or(PathError::MissingMomenta)?;
    let mut integrand = Vec::with_capacity(path.len());
    for (x, p) in path.x.iter().zip(momenta) {
        let b = sys.drift(*x)?;
        let a = sys.diffusion(*x, noise);
        let xdot = b + a.mul_vec(*p);
        let r = xdot - b;
        let ainv_r = a.solve(r).ok_or(PathError::NonFinite)?;
        integrand.push(0.5 * r.dot(ainv_r));
    }
    let mut total = 0.0;
    for i in 1..path.len() {
        total += 0.5 * (integrand[i - 1] + integrand[i]) * (path.t[i] - path.t[i - 1]);
    }
    Ok(total)
}

/// Whether the landscape value is non-decreasing along the path within
/// `slack` — the Lyapunov property of the reversed fluctuation flow.
pub fn landscape_monotone(path: &Path, model: &QuasipotentialModel, slack: f64) -> bool {
    let mut prev = f64::NEG_INFINITY;
    for x in &path.x {
        let v = model.v(*x);
        if v < prev - slack {
            return false;
        }
        prev = v;
    }
    true
}
