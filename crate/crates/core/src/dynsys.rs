//! Deterministic skeleton of the drift: equilibria, bifurcations, and
//! invariant manifolds.
//!
//! For the vegetation--water system the interior equilibria are the positive
//! roots of the cubic from [`crate::model::equilibrium_cubic`]; the desert
//! state `SN1 = (0, R/alpha)` always exists. At the baseline rainfall the
//! system is bistable: two stable nodes separated by a saddle whose stable
//! manifold — the separatrix — divides the plane into basins of attraction.
//! Everything here is network-free and doubles as the oracle layer for the
//! learned landscape: collocation sampling filters by [`BasinClassifier`],
//! Monte Carlo exits cross the [`Separatrix`] polyline, and the saddle data
//! feed the exit-time prefactors.

use crate::linalg::{self, rk4_step, BoxRegion, Mat2, StateVec};
use crate::model::{equilibrium_cubic, equilibrium_moisture, ModelError, System, SystemParams};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Newton iteration failed to converge: {0}")]
    NewtonStalled(&'static str),
    #[error("system has no saddle point to grow a manifold from")]
    NoSaddle,
    #[error("manifold integration exhausted {0} steps before leaving the working box")]
    ManifoldStalled(usize),
    #[error("basin classification could not be resolved at ({0}, {1})")]
    UnresolvedSide(f64, f64),
}

/// Linear stability class of a fixed point.
///
/// A zero eigenvalue (saddle-node degeneracy) is reported as `Unstable`
/// since the point is not asymptotically stable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FixedPointKind {
    StableNode,
    Saddle,
    Unstable,
}

impl std::fmt::Display for FixedPointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FixedPointKind::StableNode => "stable-node",
            FixedPointKind::Saddle => "saddle",
            FixedPointKind::Unstable => "unstable",
        };
        f.write_str(s)
    }
}

/// An equilibrium of the drift together with its linearization data.
///
/// For a complex eigenvalue pair the two `eigenvectors` hold the real and
/// imaginary parts of the (single) complex eigenvector.
#[derive(Clone, Debug)]
pub struct FixedPoint {
    pub location: StateVec,
    pub kind: FixedPointKind,
    pub eigenvalues: [Complex64; 2],
    pub eigenvectors: [StateVec; 2],
}

impl FixedPoint {
    /// Eigen-direction for the eigenvalue selected by `pick` (real case).
    fn direction_for(&self, pick: impl Fn(&Complex64) -> bool) -> Option<StateVec> {
        self.eigenvalues
            .iter()
            .position(|ev| pick(ev))
            .map(|i| self.eigenvectors[i])
    }
}

fn classify(j: Mat2) -> (FixedPointKind, [Complex64; 2], [StateVec; 2]) {
    let eigenvalues = j.eigenvalues();
    let kind = if j.det() < -1e-12 {
        FixedPointKind::Saddle
    } else if eigenvalues.iter().all(|ev| ev.re < -1e-9) {
        FixedPointKind::StableNode
    } else {
        FixedPointKind::Unstable
    };
    let eigenvectors = if eigenvalues[0].im == 0.0 {
        [
            j.real_eigenvector(eigenvalues[0].re),
            j.real_eigenvector(eigenvalues[1].re),
        ]
    } else {
        // Complex pair a +- ib: v = (m12, lambda - m11) gives real/imag parts.
        let vr = StateVec::new(j.m12, eigenvalues[0].re - j.m11);
        let vi = StateVec::new(0.0, eigenvalues[0].im);
        [
            vr.unit().unwrap_or(StateVec::new(1.0, 0.0)),
            vi.unit().unwrap_or(StateVec::new(0.0, 1.0)),
        ]
    };
    (kind, eigenvalues, eigenvectors)
}

/// Newton polish of `b(x) = 0` from a near-equilibrium guess.
fn polish_equilibrium(sys: &System, mut x: StateVec) -> Result<StateVec, DynError> {
    for _ in 0..60 {
        let b = sys.drift(x)?;
        if b.norm() <= 1e-13 {
            return Ok(x);
        }
        let j = sys.drift_jacobian(x)?;
        let step = j
            .solve(-b)
            .ok_or(DynError::NewtonStalled("singular Jacobian at equilibrium"))?;
        x += step;
    }
    let b = sys.drift(x)?;
    if b.norm() <= 1e-10 {
        Ok(x)
    } else {
        Err(DynError::NewtonStalled("equilibrium polish"))
    }
}

/// Upper bound on the biomass of any interior equilibrium.
///
/// From the moisture balance `x2 = R/(lambda x1 + alpha)` and the biomass
/// balance `x1/K < x2`, equilibria satisfy
/// `lambda x1^2 + alpha x1 < K R`, so the positive root of that quadratic
/// bounds the search range (it can exceed `K` at high rainfall).
fn interior_biomass_bound(p: &SystemParams) -> f64 {
    let disc = p.alpha * p.alpha + 4.0 * p.lambda * p.k * p.rainfall;
    let bound = (-p.alpha + disc.sqrt()) / (2.0 * p.lambda);
    bound.max(p.k) + 1.0
}

/// Positive roots of the equilibrium cubic, isolated on the monotone
/// intervals between the roots of `f'` and polished by bisection + Newton.
fn interior_cubic_roots(p: &SystemParams) -> Vec<f64> {
    let hi = interior_biomass_bound(p);
    let lo = 1e-9;
    // Breakpoints: domain ends plus any critical points of the cubic inside.
    let mut breaks = vec![lo, hi];
    let c3 = p.rho * p.lambda;
    let c2 = p.rho * (p.lambda * p.x0 + p.alpha);
    let c1 = p.rho * p.alpha * p.x0 + p.k * p.beta * p.lambda - p.rho * p.rainfall * p.k;
    let disc = c2 * c2 - 3.0 * c3 * c1;
    if disc > 0.0 {
        let s = disc.sqrt();
        for r in [(-c2 - s) / (3.0 * c3), (-c2 + s) / (3.0 * c3)] {
            if r > lo && r < hi {
                breaks.push(r);
            }
        }
    }
    breaks.sort_by(f64::total_cmp);

    let scale = p.k * p.beta * p.alpha; // magnitude of the constant term
    let mut roots: Vec<f64> = Vec::new();
    let push_root = |r: f64, roots: &mut Vec<f64>| {
        if roots.iter().all(|&q| (q - r).abs() > 1e-8) {
            roots.push(r);
        }
    };
    for win in breaks.windows(2) {
        let (mut a, mut b) = (win[0], win[1]);
        let (mut fa, _) = equilibrium_cubic(a, p);
        let (fb, _) = equilibrium_cubic(b, p);
        // Tangency at a breakpoint (double root) shows up as |f| ~ 0 there.
        if fa.abs() <= 1e-12 * scale {
            push_root(a, &mut roots);
            continue;
        }
        if fb.abs() <= 1e-12 * scale {
            push_root(b, &mut roots);
            continue;
        }
        if fa * fb > 0.0 {
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let (fm, _) = equilibrium_cubic(mid, p);
            if fm == 0.0 || (b - a) < 1e-15 * mid.max(1.0) {
                a = mid;
                break;
            }
            if fa * fm < 0.0 {
                b = mid;
            } else {
                a = mid;
                fa = fm;
            }
        }
        // Newton polish on the cubic.
        let mut r = a;
        for _ in 0..8 {
            let (f, fp) = equilibrium_cubic(r, p);
            if fp.abs() > 1e-300 {
                r -= f / fp;
            }
        }
        if r > 0.0 {
            push_root(r, &mut roots);
        }
    }
    roots.sort_by(f64::total_cmp);
    roots
}

/// All fixed points of the drift, sorted by increasing `x1`.
///
/// Every returned location satisfies `|b(x)| <= 1e-10`.
pub fn find_fixed_points(sys: &System) -> Result<Vec<FixedPoint>, DynError> {
    let mut points = Vec::new();
    match sys {
        System::OrnsteinUhlenbeck => {
            let j = sys.drift_jacobian(StateVec::ZERO)?;
            let (kind, eigenvalues, eigenvectors) = classify(j);
            points.push(FixedPoint {
                location: StateVec::ZERO,
                kind,
                eigenvalues,
                eigenvectors,
            });
        }
        System::Vegetation(p) => {
            p.validate()?;
            // Desert state: exactly (0, R/alpha), drift vanishes identically.
            let sn1 = StateVec::new(0.0, p.rainfall / p.alpha);
            let j = sys.drift_jacobian(sn1)?;
            let (kind, eigenvalues, eigenvectors) = classify(j);
            points.push(FixedPoint {
                location: sn1,
                kind,
                eigenvalues,
                eigenvectors,
            });
            for x1 in interior_cubic_roots(p) {
                let guess = StateVec::new(x1, equilibrium_moisture(x1, p));
                let location = polish_equilibrium(sys, guess)?;
                let j = sys.drift_jacobian(location)?;
                let (kind, eigenvalues, eigenvectors) = classify(j);
                points.push(FixedPoint {
                    location,
                    kind,
                    eigenvalues,
                    eigenvectors,
                });
            }
        }
    }
    points.sort_by(|a, b| a.location.x1.total_cmp(&b.location.x1));
    Ok(points)
}

/// The saddle-node point `(R_c, x1_c)` where the interior branches merge.
///
/// Solves `f(x1; R) = f'(x1; R) = 0` by 2-D Newton in `(x1, R)`.
pub fn saddle_node_critical(p: &SystemParams) -> Result<(f64, f64), DynError> {
    let mut x = 2.0;
    let mut r = 1.5;
    for _ in 0..100 {
        let q = SystemParams {
            rainfall: r,
            ..*p
        };
        let (f, fp) = equilibrium_cubic(x, &q);
        if f.abs() < 1e-12 && fp.abs() < 1e-12 {
            return Ok((r, x));
        }
        let fpp = 6.0 * p.rho * p.lambda * x + 2.0 * p.rho * (p.lambda * p.x0 + p.alpha);
        let f_r = -p.rho * p.k * (x + p.x0);
        let fp_r = -p.rho * p.k;
        let jac = Mat2::new(fp, f_r, fpp, fp_r);
        let step = jac
            .solve(StateVec::new(-f, -fp))
            .ok_or(DynError::NewtonStalled("saddle-node Jacobian singular"))?;
        x += step.x1;
        r += step.x2;
    }
    Err(DynError::NewtonStalled("saddle-node continuation"))
}

/// Rainfall at which the interior saddle collides with the desert state,
/// i.e. the root of `f(0; R) = K beta alpha - rho R K x0 = 0`.
///
/// Beyond this threshold the desert state loses stability (the Jacobian at
/// SN1 is triangular with leading eigenvalue `rho R/alpha - beta/x0`, which
/// changes sign at the same rainfall).
pub fn sn1_stability_threshold(p: &SystemParams) -> f64 {
    // f(0; R) is linear in R; one Newton step is exact.
    p.beta * p.alpha / (p.rho * p.x0)
}

/// One row of the bifurcation diagram: an equilibrium at a rainfall level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BifurcationPoint {
    pub rainfall: f64,
    pub x1: f64,
    pub x2: f64,
    pub kind: FixedPointKind,
}

/// Equilibria (desert state and interior branch) over a rainfall grid.
pub fn bifurcation_branch(
    p: &SystemParams,
    rainfall_grid: &[f64],
) -> Result<Vec<BifurcationPoint>, DynError> {
    let mut rows = Vec::new();
    for &r in rainfall_grid {
        let q = SystemParams {
            rainfall: r,
            ..*p
        };
        let sys = System::Vegetation(q);
        for fixed_point in find_fixed_points(&sys)? {
            rows.push(BifurcationPoint {
                rainfall: r,
                x1: fixed_point.location.x1,
                x2: fixed_point.location.x2,
                kind: fixed_point.kind,
            });
        }
    }
    Ok(rows)
}

/// Which side of the separatrix a state lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Same basin as the reference attractor (the vegetated state).
    Interior,
    /// The other basin.
    Exterior,
}

/// Arc-length parameterized polyline of the saddle's stable manifold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Separatrix {
    points: Vec<StateVec>,
    /// Cumulative arc length per vertex; same length as `points`.
    arclen: Vec<f64>,
    saddle: StateVec,
}

impl Separatrix {
    pub fn points(&self) -> &[StateVec] {
        &self.points
    }

    pub fn saddle(&self) -> StateVec {
        self.saddle
    }

    pub fn total_length(&self) -> f64 {
        *self.arclen.last().unwrap_or(&0.0)
    }

    pub fn arclen(&self) -> &[f64] {
        &self.arclen
    }

    /// Shortest distance from `x` to the polyline.
    pub fn distance_to(&self, x: StateVec) -> f64 {
        self.points
            .windows(2)
            .map(|w| linalg::point_segment_distance(x, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether the segment `a`--`b` crosses the polyline anywhere.
    pub fn crossed_by(&self, a: StateVec, b: StateVec) -> bool {
        self.points
            .windows(2)
            .any(|w| linalg::segments_intersect(a, b, w[0], w[1]))
    }

    /// Largest spacing between consecutive vertices.
    pub fn max_spacing(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[0].dist(w[1]))
            .fold(0.0, f64::max)
    }

    fn from_vertices(points: Vec<StateVec>, saddle: StateVec) -> Self {
        let mut arclen = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        arclen.push(0.0);
        for w in points.windows(2) {
            acc += w[0].dist(w[1]);
            arclen.push(acc);
        }
        Self {
            points,
            arclen,
            saddle,
        }
    }
}

/// Resamples a polyline to uniform spacing `<= spacing` by linear
/// interpolation along arc length; endpoints are preserved.
pub(crate) fn resample_polyline(points: &[StateVec], spacing: f64) -> Vec<StateVec> {
    assert!(points.len() >= 2, "polyline needs at least two vertices");
    let mut cumulative = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for w in points.windows(2) {
        acc += w[0].dist(w[1]);
        cumulative.push(acc);
    }
    let total = acc;
    let n_seg = (total / spacing).ceil().max(1.0) as usize;
    let step = total / n_seg as f64;
    let mut out = Vec::with_capacity(n_seg + 1);
    let mut seg = 0usize;
    for i in 0..=n_seg {
        let target = step * i as f64;
        while seg + 2 < cumulative.len() && cumulative[seg + 1] < target {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > 0.0 {
            ((target - cumulative[seg]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(points[seg] + (points[seg + 1] - points[seg]) * t);
    }
    out
}

/// Adaptive RK4 (step doubling) integration of `dx/dt = dir * b(x)` until
/// the trajectory leaves `window` or triggers `stop`.
fn integrate_branch(
    sys: &System,
    start: StateVec,
    dir: f64,
    window: &BoxRegion,
    rel_tol: f64,
    mut stop: impl FnMut(StateVec) -> bool,
) -> Result<Vec<StateVec>, DynError> {
    const MAX_ACCEPTED: usize = 400_000;
    let mut f = |y: &[f64; 2]| -> Result<[f64; 2], ModelError> {
        let b = sys.drift(StateVec::new(y[0], y[1]))?;
        Ok([dir * b.x1, dir * b.x2])
    };
    let mut h = 1e-3;
    let mut y = [start.x1, start.x2];
    let mut out = vec![start];
    for _ in 0..MAX_ACCEPTED {
        let current = StateVec::new(y[0], y[1]);
        if !window.contains(current) || stop(current) {
            return Ok(out);
        }
        loop {
            let full = rk4_step(&mut f, &y, h)?;
            let half = rk4_step(&mut f, &y, 0.5 * h)?;
            let half2 = rk4_step(&mut f, &half, 0.5 * h)?;
            let err = ((full[0] - half2[0]).powi(2) + (full[1] - half2[1]).powi(2)).sqrt() / 15.0;
            let scale = rel_tol * (1.0 + (y[0] * y[0] + y[1] * y[1]).sqrt());
            if err <= scale || h <= 1e-10 {
                // Accept the Richardson-extrapolated half-step pair.
                y = half2;
                let grow = if err > 0.0 {
                    0.9 * (scale / err).powf(0.2)
                } else {
                    5.0
                };
                h = (h * grow.clamp(0.2, 5.0)).clamp(1e-10, 0.02);
                break;
            }
            h *= 0.5;
        }
        out.push(StateVec::new(y[0], y[1]));
    }
    Err(DynError::ManifoldStalled(MAX_ACCEPTED))
}

/// Spacing used for separatrix and manifold polylines.
pub const MANIFOLD_SPACING: f64 = 0.01;
/// Offset along the saddle eigen-direction seeding manifold integrations.
const SADDLE_OFFSET: f64 = 1e-4;
/// Relative tolerance of the adaptive manifold integrator.
const MANIFOLD_RTOL: f64 = 1e-8;

/// Grows the saddle's stable manifold (the separatrix) across the box.
///
/// Both branches are integrated in reverse time from `saddle +- 1e-4 v_s`
/// until they leave the box padded by one unit, then joined through the
/// saddle and resampled to spacing `<= 0.01`. The polyline therefore spans
/// the training box with its endpoints outside of it.
pub fn stable_manifold(
    sys: &System,
    saddle: &FixedPoint,
    training_box: &BoxRegion,
) -> Result<Separatrix, DynError> {
    if saddle.kind != FixedPointKind::Saddle {
        return Err(DynError::NoSaddle);
    }
    let v_s = saddle
        .direction_for(|ev| ev.im == 0.0 && ev.re < 0.0)
        .ok_or(DynError::NoSaddle)?;
    let window = padded_window(sys, training_box);
    let plus = integrate_branch(
        sys,
        saddle.location + v_s * SADDLE_OFFSET,
        -1.0,
        &window,
        MANIFOLD_RTOL,
        |_| false,
    )?;
    let minus = integrate_branch(
        sys,
        saddle.location - v_s * SADDLE_OFFSET,
        -1.0,
        &window,
        MANIFOLD_RTOL,
        |_| false,
    )?;
    let mut joined: Vec<StateVec> = minus.into_iter().rev().collect();
    joined.push(saddle.location);
    joined.extend(plus);
    let resampled = resample_polyline(&joined, MANIFOLD_SPACING);
    Ok(Separatrix::from_vertices(resampled, saddle.location))
}

/// One branch of the saddle's unstable manifold.
#[derive(Clone, Debug)]
pub struct ManifoldBranch {
    pub points: Vec<StateVec>,
    /// Attractor the branch converged into, if any.
    pub limit: Option<StateVec>,
}

/// Grows both unstable-manifold branches forward in time until they enter a
/// small ball around one of `attractors` (or leave the padded box).
pub fn unstable_manifold(
    sys: &System,
    saddle: &FixedPoint,
    attractors: &[StateVec],
    training_box: &BoxRegion,
) -> Result<[ManifoldBranch; 2], DynError> {
    if saddle.kind != FixedPointKind::Saddle {
        return Err(DynError::NoSaddle);
    }
    let v_u = saddle
        .direction_for(|ev| ev.im == 0.0 && ev.re > 0.0)
        .ok_or(DynError::NoSaddle)?;
    let window = padded_window(sys, training_box);
    let capture = 0.02;
    let grow = |seed: StateVec| -> Result<ManifoldBranch, DynError> {
        let targets = attractors.to_vec();
        let raw = integrate_branch(sys, seed, 1.0, &window, MANIFOLD_RTOL, move |x| {
            targets.iter().any(|&t| x.dist(t) < capture)
        })?;
        let limit = attractors
            .iter()
            .copied()
            .find(|&t| raw.last().is_some_and(|&x| x.dist(t) < 2.0 * capture));
        Ok(ManifoldBranch {
            points: resample_polyline(&raw, MANIFOLD_SPACING),
            limit,
        })
    };
    Ok([
        grow(saddle.location + v_u * SADDLE_OFFSET)?,
        grow(saddle.location - v_u * SADDLE_OFFSET)?,
    ])
}

/// Integration window: the training box padded by one unit, clipped away
/// from the vegetation drift's pole at `x1 = -x0`.
pub(crate) fn padded_window(sys: &System, training_box: &BoxRegion) -> BoxRegion {
    let mut window = training_box.padded(1.0);
    if let System::Vegetation(p) = sys {
        window.x1_min = window.x1_min.max(-p.x0 + 0.05);
    }
    window
}

/// Splits states into basins by parity of separatrix crossings.
///
/// A state is `Interior` when the straight segment from it to the interior
/// attractor crosses the separatrix an even number of times. Points within
/// `1e-6` of the polyline — and the measure-zero degenerate crossings the
/// parity rule cannot decide — fall back to integrating the flow until it
/// enters a small ball around one of the attractors.
pub struct BasinClassifier<'a> {
    sys: &'a System,
    separatrix: &'a Separatrix,
    /// Attractor whose basin is called `Interior` (the vegetated state).
    interior: StateVec,
    /// The opposing attractor (the desert state).
    exterior: StateVec,
}

impl<'a> BasinClassifier<'a> {
    pub fn new(
        sys: &'a System,
        separatrix: &'a Separatrix,
        interior: StateVec,
        exterior: StateVec,
    ) -> Self {
        Self {
            sys,
            separatrix,
            interior,
            exterior,
        }
    }

    pub fn separatrix(&self) -> &Separatrix {
        self.separatrix
    }

    /// Basin membership of `x`.
    pub fn side(&self, x: StateVec) -> Result<Side, DynError> {
        if self.separatrix.distance_to(x) < 1e-6 {
            return self.side_by_flow(x);
        }
        match self.crossing_parity(x) {
            Some(crossings) => Ok(if crossings % 2 == 0 {
                Side::Interior
            } else {
                Side::Exterior
            }),
            None => self.side_by_flow(x),
        }
    }

    /// Counts strict crossings of the segment `x -> interior attractor`;
    /// `None` when a degenerate (touching/collinear) configuration shows up.
    fn crossing_parity(&self, x: StateVec) -> Option<usize> {
        let a = x;
        let b = self.interior;
        let (lo1, hi1) = (a.x1.min(b.x1), a.x1.max(b.x1));
        let (lo2, hi2) = (a.x2.min(b.x2), a.x2.max(b.x2));
        let dir = b - a;
        let scale = dir.norm().max(1.0);
        let tol = 1e-12 * scale * scale;
        let mut crossings = 0usize;
        for w in self.separatrix.points().windows(2) {
            // Disjoint bounding boxes exclude intersection and touching alike.
            if w[0].x1.max(w[1].x1) < lo1
                || w[0].x1.min(w[1].x1) > hi1
                || w[0].x2.max(w[1].x2) < lo2
                || w[0].x2.min(w[1].x2) > hi2
            {
                continue;
            }
            let d1 = dir.cross(w[0] - a);
            let d2 = dir.cross(w[1] - a);
            let seg = w[1] - w[0];
            let d3 = seg.cross(a - w[0]);
            let d4 = seg.cross(b - w[0]);
            let strict =
                d1 * d2 < 0.0 && d3 * d4 < 0.0 && d1.abs() > tol && d2.abs() > tol
                    && d3.abs() > tol && d4.abs() > tol;
            if strict {
                crossings += 1;
            } else if d1 * d2 <= 0.0 && d3 * d4 <= 0.0 {
                // Potential grazing contact the sign test cannot certify.
                if d1.abs() <= tol || d2.abs() <= tol || d3.abs() <= tol || d4.abs() <= tol {
                    return None;
                }
            }
        }
        Some(crossings)
    }

    /// Integrates the deterministic flow until it commits to an attractor.
    fn side_by_flow(&self, x: StateVec) -> Result<Side, DynError> {
        let mut f = |y: &[f64; 2]| -> Result<[f64; 2], ModelError> {
            let b = self.sys.drift(StateVec::new(y[0], y[1]))?;
            Ok([b.x1, b.x2])
        };
        let mut y = [x.x1, x.x2];
        let h = 0.02;
        for _ in 0..200_000 {
            let p = StateVec::new(y[0], y[1]);
            if p.dist(self.interior) < 0.05 {
                return Ok(Side::Interior);
            }
            if p.dist(self.exterior) < 0.05 {
                return Ok(Side::Exterior);
            }
            if !p.is_finite() {
                return Err(DynError::UnresolvedSide(x.x1, x.x2));
            }
            y = rk4_step(&mut f, &y, h)?;
        }
        Err(DynError::UnresolvedSide(x.x1, x.x2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseParams;
    use approx::assert_relative_eq;

    fn default_box() -> BoxRegion {
        BoxRegion::new(1.0, 7.0, 0.0, 2.0)
    }

    fn vegetation_fixed_points() -> (System, Vec<FixedPoint>) {
        let sys = System::vegetation_default();
        let fps = find_fixed_points(&sys).unwrap();
        (sys, fps)
    }

    #[test]
    fn baseline_fixed_points_match_known_values() {
        let (sys, fps) = vegetation_fixed_points();
        assert_eq!(fps.len(), 3, "bistable regime has three equilibria");
        let [sn1, us, sn2] = [&fps[0], &fps[1], &fps[2]];

        assert_relative_eq!(sn1.location.x1, 0.0, epsilon = 1e-12);
        assert_relative_eq!(sn1.location.x2, 1.55, epsilon = 1e-12);
        assert_eq!(sn1.kind, FixedPointKind::StableNode);

        assert_relative_eq!(us.location.x1, 5.0 / 3.0, epsilon = 1e-4);
        assert_relative_eq!(us.location.x2, 1.2917, epsilon = 1e-4);
        assert_eq!(us.kind, FixedPointKind::Saddle);

        assert_relative_eq!(sn2.location.x1, 4.6366, epsilon = 1e-4);
        assert_relative_eq!(sn2.location.x2, 0.9959, epsilon = 1e-4);
        assert_eq!(sn2.kind, FixedPointKind::StableNode);

        for fp in &fps {
            let residual = sys.drift(fp.location).unwrap().norm();
            assert!(residual <= 1e-10, "drift residual {residual} at equilibrium");
        }
        // Saddle eigenvalues: positive rate 0.3721, negative -1.0357.
        assert_relative_eq!(us.eigenvalues[0].re, 0.3721, epsilon = 1e-4);
        assert_relative_eq!(us.eigenvalues[1].re, -1.0357, epsilon = 1e-4);
    }

    #[test]
    fn low_rainfall_leaves_only_the_desert_state() {
        let sys = System::Vegetation(SystemParams::with_rainfall(1.0));
        let fps = find_fixed_points(&sys).unwrap();
        assert_eq!(fps.len(), 1);
        assert_eq!(fps[0].kind, FixedPointKind::StableNode);
        assert_relative_eq!(fps[0].location.x2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn saddle_node_location() {
        let p = SystemParams::default();
        let (r_c, x1_c) = saddle_node_critical(&p).unwrap();
        assert_relative_eq!(r_c, 1.4278, epsilon = 1e-3);
        let q = SystemParams {
            rainfall: r_c,
            ..p
        };
        let (f, fp) = equilibrium_cubic(x1_c, &q);
        assert!(f.abs() < 1e-10 && fp.abs() < 1e-10, "not a double root");

        // Just above the fold the branch separation scales like sqrt(dR).
        let above = SystemParams {
            rainfall: r_c + 1e-5,
            ..p
        };
        let roots = interior_cubic_roots(&above);
        assert_eq!(roots.len(), 2);
        assert!(
            (roots[1] - roots[0]).abs() < 0.05,
            "branches too far apart just past the fold: {roots:?}"
        );
        assert!(
            roots[0] < x1_c && x1_c < roots[1],
            "fold point must sit between the emerging branches"
        );
        // Below the fold no interior equilibria survive.
        for dr in [0.01, 0.05, 0.2] {
            let below = SystemParams {
                rainfall: r_c - dr,
                ..p
            };
            assert!(interior_cubic_roots(&below).is_empty());
        }
    }

    #[test]
    fn desert_state_stability_exchange() {
        let p = SystemParams::default();
        let threshold = sn1_stability_threshold(&p);
        assert_relative_eq!(threshold, 3.0, epsilon = 1e-12);
        // f(0; R) vanishes exactly at the threshold.
        let at = SystemParams {
            rainfall: threshold,
            ..p
        };
        let (f0, _) = equilibrium_cubic(0.0, &at);
        assert!(f0.abs() < 1e-12);
        // Past the exchange the desert state is a saddle (one eigenvalue of
        // the triangular Jacobian, rho R / alpha - beta / x0, turns positive).
        for (r, expected) in [
            (threshold - 0.1, FixedPointKind::StableNode),
            (threshold + 0.1, FixedPointKind::Saddle),
        ] {
            let sys = System::Vegetation(SystemParams { rainfall: r, ..p });
            let sn1 = &find_fixed_points(&sys).unwrap()[0];
            assert_eq!(sn1.kind, expected, "at rainfall {r}");
        }
    }

    #[test]
    fn bifurcation_table_carries_stability() {
        let p = SystemParams::default();
        let rows = bifurcation_branch(&p, &[1.0, 1.55]).unwrap();
        let at_low: Vec<_> = rows.iter().filter(|r| r.rainfall == 1.0).collect();
        assert_eq!(at_low.len(), 1);
        let at_base: Vec<_> = rows.iter().filter(|r| r.rainfall == 1.55).collect();
        assert_eq!(at_base.len(), 3);
        let kinds: Vec<_> = at_base.iter().map(|r| r.kind).collect();
        assert_eq!(
            kinds,
            vec![
                FixedPointKind::StableNode,
                FixedPointKind::Saddle,
                FixedPointKind::StableNode
            ]
        );
    }

    #[test]
    fn separatrix_spans_box_and_holds_saddle() {
        let (sys, fps) = vegetation_fixed_points();
        let sep = stable_manifold(&sys, &fps[1], &default_box()).unwrap();
        assert!(
            sep.max_spacing() <= MANIFOLD_SPACING + 1e-12,
            "resampling must bound vertex spacing"
        );
        let min_dist_to_saddle = sep
            .points()
            .iter()
            .map(|&q| q.dist(fps[1].location))
            .fold(f64::INFINITY, f64::min);
        assert!(
            min_dist_to_saddle <= MANIFOLD_SPACING,
            "saddle {min_dist_to_saddle} away from polyline"
        );
        let inner = default_box();
        let first = *sep.points().first().unwrap();
        let last = *sep.points().last().unwrap();
        assert!(
            !inner.contains(first) && !inner.contains(last),
            "separatrix endpoints {first:?} {last:?} must leave the box"
        );
    }

    #[test]
    fn basin_parity_agrees_with_flow() {
        let (sys, fps) = vegetation_fixed_points();
        let sep = stable_manifold(&sys, &fps[1], &default_box()).unwrap();
        let classifier = BasinClassifier::new(&sys, &sep, fps[2].location, fps[0].location);
        assert_eq!(classifier.side(fps[2].location).unwrap(), Side::Interior);
        assert_eq!(
            classifier.side(StateVec::new(0.5, 1.55)).unwrap(),
            Side::Exterior
        );
        // Parity vs. direct flow integration on a deterministic point cloud.
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(7);
        let window = default_box();
        for _ in 0..40 {
            let x = StateVec::new(
                rng.random_range(window.x1_min..window.x1_max),
                rng.random_range(window.x2_min..window.x2_max),
            );
            if sep.distance_to(x) < 1e-3 {
                continue; // stay off the knife edge, flow decides both ways
            }
            let by_parity = classifier.side(x).unwrap();
            let by_flow = classifier.side_by_flow(x).unwrap();
            assert_eq!(by_parity, by_flow, "disagreement at {x:?}");
        }
    }

    #[test]
    fn classification_flips_once_along_a_crossing_segment() {
        let (sys, fps) = vegetation_fixed_points();
        let sep = stable_manifold(&sys, &fps[1], &default_box()).unwrap();
        let classifier = BasinClassifier::new(&sys, &sep, fps[2].location, fps[0].location);
        let from = StateVec::new(1.05, 1.9); // deep desert-side corner
        let to = fps[2].location;
        let mut flips = 0;
        let mut prev = classifier.side(from).unwrap();
        for i in 1..=200 {
            let t = i as f64 / 200.0;
            let x = from + (to - from) * t;
            if sep.distance_to(x) < 1e-6 {
                continue;
            }
            let side = classifier.side(x).unwrap();
            if side != prev {
                flips += 1;
                prev = side;
            }
        }
        assert_eq!(flips, 1, "expected exactly one basin change on the segment");
    }

    #[test]
    fn unstable_branches_run_to_both_attractors() {
        let (sys, fps) = vegetation_fixed_points();
        let attractors = [fps[0].location, fps[2].location];
        let branches =
            unstable_manifold(&sys, &fps[1], &attractors, &default_box()).unwrap();
        let limits: Vec<_> = branches.iter().filter_map(|b| b.limit).collect();
        assert_eq!(limits.len(), 2, "both branches must settle");
        assert!(limits.iter().any(|&l| l.dist(fps[0].location) < 1e-9));
        assert!(limits.iter().any(|&l| l.dist(fps[2].location) < 1e-9));
    }

    #[test]
    fn ou_has_a_single_stable_origin() {
        let fps = find_fixed_points(&System::OrnsteinUhlenbeck).unwrap();
        assert_eq!(fps.len(), 1);
        assert_eq!(fps[0].kind, FixedPointKind::StableNode);
        assert_eq!(fps[0].location, StateVec::ZERO);
    }

    #[test]
    fn noise_params_do_not_perturb_skeleton() {
        // The skeleton is a drift-only construction; diffusion never enters.
        let sys = System::vegetation_default();
        let noise = NoiseParams::new(0.1, 1.0, 0.05).unwrap();
        let _ = noise;
        let fps = find_fixed_points(&sys).unwrap();
        assert_eq!(fps.len(), 3);
    }
}
