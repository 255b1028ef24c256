//! Euler–Maruyama simulation and first-exit-time sampling.
//!
//! This module is the empirical oracle for the asymptotic exit-time results:
//! it integrates the stochastic system directly and measures when trajectories
//! leave a prescribed region, with no input from the learned landscape.
//!
//! One step of the scheme, driven by a pair of standard normals `z`:
//!
//! ```text
//! x_{k+1} = x_k + b(x_k) dt + sigma(x_k) sqrt(eps dt) z_k
//! ```
//!
//! where `sigma(x)` is the amplitude matrix whose square is the diffusion
//! `a(x) = sigma sigma^T`. Two exit rules are supported:
//!
//! - [`ExitSpec::Line`]: the trajectory exits once `x1 <= c`. The threshold
//!   must sit strictly between zero and the starting biomass, so the start is
//!   interior.
//! - [`ExitSpec::Separatrix`]: the trajectory exits when the step segment
//!   `(x_k, x_{k+1})` crosses the separatrix polyline, or — as a fallback for
//!   steps that jump past the sampled curve — when the state enters a small
//!   capture ball around the opposite attractor. When both predicates fire on
//!   the same step the crossing is reported, so the fallback only rescues
//!   grazing passes.
//!
//! Per-step crossing tests run against a uniform spatial hash of the polyline
//! segments ([`SegGrid`]), turning the naive scan over ~10^3 segments into a
//! handful of candidate tests per step.
//!
//! Ensembles are embarrassingly parallel: trajectory `i` draws from its own
//! generator seeded with `trajectory_seed(master_seed, i)` (a splitmix64
//! finalizer over the pair), so results are independent of the number of
//! worker threads, and aggregation walks trajectories in index order with
//! compensated summation. Censored trajectories (no exit within `max_steps`)
//! are counted and excluded from the mean, which therefore reads as a lower
//! bound when censoring occurred; an ensemble with no uncensored exit at all
//! is an error, never a silent zero.
//!
//! States are free to make excursions outside the physical quadrant — the
//! drift restores them — but a non-finite state aborts the trajectory as an
//! error rather than contributing a sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynsys::Separatrix;
use crate::linalg::{segments_intersect, StateVec};
use crate::model::{ModelError, NoiseParams, System};

/// Radius of the capture ball around the opposite attractor that backs up the
/// separatrix crossing test.
pub const CAPTURE_RADIUS: f64 = 0.05;

/// Cell size of the segment spatial hash; a few polyline spacings wide.
const SEG_GRID_CELL: f64 = 0.05;

/// Two-sided 95% quantile of the standard normal.
const Z_95: f64 = 1.959963984540054;

/// Failures while configuring or running a Monte Carlo ensemble.
#[derive(Debug, Error)]
pub enum McError {
    /// A config or exit rule failed validation; the message names the field.
    #[error("invalid Monte Carlo setup: {0}")]
    Invalid(String),
    /// A trajectory blew up; it contributes an error, not a sample.
    #[error("trajectory state became non-finite at step {step}")]
    NonFiniteState { step: u64 },
    /// Every trajectory hit the step cap, so no exit time was observed.
    #[error(
        "all {trajectories} trajectories were censored at {max_steps} steps; \
         the mean exit time is unresolved at this budget"
    )]
    AllCensored { trajectories: usize, max_steps: u64 },
    /// The drift rejected a state (pole crossing) or a step parameter.
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One Euler–Maruyama step driven by the standard-normal pair `z`.
///
/// Returns `x + b(x) dt + sigma(x) sqrt(eps dt) z`. The state is not checked
/// for finiteness here — callers that iterate the map own that check — but a
/// non-positive `dt` or a state at the drift's pole is rejected.
pub fn em_step(
    x: StateVec,
    dt: f64,
    sys: &System,
    noise: &NoiseParams,
    z: StateVec,
) -> Result<StateVec, ModelError> {
    if !(dt > 0.0) {
        return Err(ModelError::NonPositiveParam {
            name: "dt",
            value: dt,
        });
    }
    let b = sys.drift(x)?;
    let sig = sys.sigma_matrix(x, noise);
    let s = (noise.eps * dt).sqrt();
    Ok(StateVec::new(
        x.x1 + b.x1 * dt + s * (sig.m11 * z.x1 + sig.m12 * z.x2),
        x.x2 + b.x2 * dt + s * (sig.m21 * z.x1 + sig.m22 * z.x2),
    ))
}

/// Deterministic per-trajectory seed: a splitmix64 finalizer over
/// `(master_seed, index)`.
///
/// For a fixed master seed the map `index -> seed` is injective (odd-constant
/// multiply, constant add, bijective finalizer), so every trajectory in an
/// ensemble gets a distinct generator regardless of worker scheduling.
pub fn trajectory_seed(master_seed: u64, index: u64) -> u64 {
    let mut z = master_seed.wrapping_add(
        index
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform spatial hash over the segments of a planar polyline.
///
/// Each grid cell lists the indices of the polyline segments whose bounding
/// box touches it. A query for segment `(a, b)` visits only the cells under
/// the query's bounding box, so a step far from the curve costs a couple of
/// empty bucket lookups. The candidate set is a superset of the segments that
/// can intersect the query (any intersection point lies in a visited cell and
/// its segment is registered there), and each candidate is confirmed with the
/// exact orientation test — so the answer always equals the brute-force scan.
#[derive(Clone, Debug)]
pub struct SegGrid {
    cell: f64,
    x1_min: f64,
    x2_min: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
    pts: Vec<StateVec>,
}

impl SegGrid {
    /// Indexes the polyline `points` with square cells of size `cell`.
    pub fn new(points: &[StateVec], cell: f64) -> Result<Self, McError> {
        if points.len() < 2 {
            return Err(McError::Invalid(
                "separatrix polyline needs at least two vertices".into(),
            ));
        }
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(McError::Invalid(format!(
                "grid cell size must be positive and finite, got {cell}"
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(McError::Invalid(
                "separatrix polyline vertices must be finite".into(),
            ));
        }
        let x1_min = points.iter().map(|p| p.x1).fold(f64::INFINITY, f64::min) - cell;
        let x1_max = points.iter().map(|p| p.x1).fold(f64::NEG_INFINITY, f64::max) + cell;
        let x2_min = points.iter().map(|p| p.x2).fold(f64::INFINITY, f64::min) - cell;
        let x2_max = points.iter().map(|p| p.x2).fold(f64::NEG_INFINITY, f64::max) + cell;
        let nx = (((x1_max - x1_min) / cell).ceil() as usize).max(1);
        let ny = (((x2_max - x2_min) / cell).ceil() as usize).max(1);
        let mut grid = Self {
            cell,
            x1_min,
            x2_min,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
            pts: points.to_vec(),
        };
        for i in 0..points.len() - 1 {
            let (a, b) = (points[i], points[i + 1]);
            // Register the segment in every cell under its bounding box; a
            // conservative superset of the cells it actually passes through.
            let (ix0, ix1) = grid.axis_range(a.x1.min(b.x1), a.x1.max(b.x1), grid.x1_min, grid.nx);
            let (iy0, iy1) = grid.axis_range(a.x2.min(b.x2), a.x2.max(b.x2), grid.x2_min, grid.ny);
            for iy in iy0..=iy1 {
                for ix in ix0..=ix1 {
                    grid.buckets[iy * grid.nx + ix].push(i as u32);
                }
            }
        }
        Ok(grid)
    }

    /// Clamped cell index range covering `[lo, hi]` along one axis.
    fn axis_range(&self, lo: f64, hi: f64, origin: f64, n: usize) -> (usize, usize) {
        let i0 = ((lo - origin) / self.cell).floor().max(0.0) as usize;
        let i1 = (((hi - origin) / self.cell).floor().max(0.0) as usize).min(n - 1);
        (i0.min(n - 1), i1)
    }

    /// Whether segment `(a, b)` intersects any polyline segment.
    pub fn crosses(&self, a: StateVec, b: StateVec) -> bool {
        let (lo1, hi1) = (a.x1.min(b.x1), a.x1.max(b.x1));
        let (lo2, hi2) = (a.x2.min(b.x2), a.x2.max(b.x2));
        // Entirely outside the indexed bounding box: no polyline point can
        // be on the query segment.
        if hi1 < self.x1_min
            || lo1 > self.x1_min + self.cell * self.nx as f64
            || hi2 < self.x2_min
            || lo2 > self.x2_min + self.cell * self.ny as f64
        {
            return false;
        }
        let (ix0, ix1) = self.axis_range(lo1, hi1, self.x1_min, self.nx);
        let (iy0, iy1) = self.axis_range(lo2, hi2, self.x2_min, self.ny);
        for iy in iy0..=iy1 {
            for ix in ix0..=ix1 {
                // A segment spanning several visited cells is tested more
                // than once; queries are a few cells wide, so deduplication
                // would cost more than the repeated exact test.
                for &i in &self.buckets[iy * self.nx + ix] {
                    let i = i as usize;
                    if segments_intersect(a, b, self.pts[i], self.pts[i + 1]) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// Which predicate ended a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitKind {
    /// The step segment crossed the boundary (line or polyline).
    Crossing,
    /// The state entered the capture ball without a detected crossing.
    Capture,
}

/// Exit rule for first-exit sampling.
#[derive(Clone, Debug)]
pub enum ExitSpec {
    /// Exit once the biomass coordinate drops to the threshold: `x1 <= c`.
    Line { c: f64 },
    /// Exit on crossing the indexed separatrix polyline, with a capture ball
    /// around the opposite attractor as a grazing-step fallback.
    Separatrix {
        grid: SegGrid,
        capture: StateVec,
        capture_radius: f64,
    },
}

impl ExitSpec {
    /// Non-characteristic rule `x1 <= c`; the threshold must be positive.
    pub fn line(c: f64) -> Result<Self, McError> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(McError::Invalid(format!(
                "line threshold must be positive and finite, got {c}"
            )));
        }
        Ok(Self::Line { c })
    }

    /// Characteristic rule for `sep` with the default capture ball radius.
    pub fn separatrix(sep: &Separatrix, capture: StateVec) -> Result<Self, McError> {
        Self::separatrix_with_radius(sep, capture, CAPTURE_RADIUS)
    }

    /// Characteristic rule with an explicit capture ball radius.
    pub fn separatrix_with_radius(
        sep: &Separatrix,
        capture: StateVec,
        capture_radius: f64,
    ) -> Result<Self, McError> {
        if !(capture_radius > 0.0 && capture_radius.is_finite()) {
            return Err(McError::Invalid(format!(
                "capture radius must be positive and finite, got {capture_radius}"
            )));
        }
        if !capture.is_finite() {
            return Err(McError::Invalid(
                "capture point must be finite".into(),
            ));
        }
        Ok(Self::Separatrix {
            grid: SegGrid::new(sep.points(), SEG_GRID_CELL)?,
            capture,
            capture_radius,
        })
    }

    /// Checks that `x0` is a legal starting state for this rule.
    fn validate_start(&self, x0: StateVec) -> Result<(), McError> {
        if !x0.is_finite() {
            return Err(McError::Invalid(format!(
                "start state must be finite, got ({}, {})",
                x0.x1, x0.x2
            )));
        }
        match self {
            Self::Line { c } => {
                if !(x0.x1 > *c) {
                    return Err(McError::Invalid(format!(
                        "line threshold {c} must lie strictly below the start biomass {}",
                        x0.x1
                    )));
                }
            }
            Self::Separatrix {
                capture,
                capture_radius,
                ..
            } => {
                if x0.dist(*capture) <= *capture_radius {
                    return Err(McError::Invalid(
                        "start state must lie outside the capture ball".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Step size, budget, ensemble size, and master seed of a Monte Carlo run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Euler–Maruyama step size.
    pub dt: f64,
    /// Per-trajectory step budget; hitting it censors the trajectory.
    pub max_steps: u64,
    /// Number of independent trajectories.
    pub trajectories: usize,
    /// Master seed from which every trajectory seed is derived.
    pub master_seed: u64,
}

impl Default for McConfig {
    /// `dt = 1e-3` with a step cap of `1e8` (time horizon `1e5`).
    fn default() -> Self {
        Self {
            dt: 1e-3,
            max_steps: 100_000_000,
            trajectories: 500,
            master_seed: 42,
        }
    }
}

impl McConfig {
    /// Rejects non-positive step sizes and empty budgets by name.
    pub fn validate(&self) -> Result<(), McError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(McError::Invalid(format!(
                "dt must be positive and finite, got {}",
                self.dt
            )));
        }
        if self.max_steps == 0 {
            return Err(McError::Invalid("max_steps must be at least one".into()));
        }
        if self.trajectories == 0 {
            return Err(McError::Invalid(
                "trajectory count must be at least one".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of a single trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FirstExit {
    /// The exit predicate fired after `steps` steps (time `steps * dt`).
    Exited { steps: u64, kind: ExitKind },
    /// No exit within the step budget.
    Censored,
}

impl FirstExit {
    /// Exit time `steps * dt`, or `None` when censored.
    pub fn time(&self, dt: f64) -> Option<f64> {
        match self {
            Self::Exited { steps, .. } => Some(*steps as f64 * dt),
            Self::Censored => None,
        }
    }
}

/// Simulates one trajectory from `x0` until the exit rule fires or the step
/// budget runs out.
///
/// The exit time is always a strictly positive multiple of `dt`: predicates
/// are evaluated on the state *after* each step, so the earliest possible
/// exit is at `t = dt`. On a step where both separatrix predicates fire, the
/// crossing wins.
pub fn first_exit(
    x0: StateVec,
    spec: &ExitSpec,
    sys: &System,
    noise: &NoiseParams,
    cfg: &McConfig,
    seed: u64,
) -> Result<FirstExit, McError> {
    cfg.validate()?;
    spec.validate_start(x0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0;
    for step in 1..=cfg.max_steps {
        let z = StateVec::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        let next = em_step(x, cfg.dt, sys, noise, z)?;
        if !next.is_finite() {
            return Err(McError::NonFiniteState { step });
        }
        match spec {
            ExitSpec::Line { c } => {
                if next.x1 <= *c {
                    return Ok(FirstExit::Exited {
                        steps: step,
                        kind: ExitKind::Crossing,
                    });
                }
            }
            ExitSpec::Separatrix {
                grid,
                capture,
                capture_radius,
            } => {
                if grid.crosses(x, next) {
                    return Ok(FirstExit::Exited {
                        steps: step,
                        kind: ExitKind::Crossing,
                    });
                }
                if next.dist(*capture) <= *capture_radius {
                    return Ok(FirstExit::Exited {
                        steps: step,
                        kind: ExitKind::Capture,
                    });
                }
            }
        }
        x = next;
    }
    Ok(FirstExit::Censored)
}

/// Ensemble statistics of first-exit sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    /// Per-trajectory exit times in index order; `None` marks a censored run.
    pub times: Vec<Option<f64>>,
    /// Exits that fired the crossing predicate.
    pub crossings: usize,
    /// Exits that fired the capture fallback (always zero for line rules).
    pub captures: usize,
    /// Trajectories that hit the step budget without exiting.
    pub censored: usize,
    /// Arithmetic mean over uncensored exit times only; a lower bound on the
    /// true mean whenever `censored > 0`.
    pub mean: f64,
    /// Lower 95% bound: normal approximation on log exit times, exponentiated.
    pub ci_low: f64,
    /// Upper 95% bound of the same interval.
    pub ci_high: f64,
    /// Total Euler–Maruyama steps over all trajectories (censored runs
    /// contribute the full budget).
    pub total_steps: u64,
}

/// Runs `cfg.trajectories` independent trajectories and aggregates them in
/// index order.
///
/// Trajectory `i` is seeded with `trajectory_seed(cfg.master_seed, i)`, so an
/// ensemble is bit-reproducible for a fixed master seed no matter how many
/// worker threads execute it. Sums use compensated summation over trajectory
/// index order. An ensemble in which every trajectory was censored returns
/// [`McError::AllCensored`].
pub fn exit_ensemble(
    x0: StateVec,
    spec: &ExitSpec,
    sys: &System,
    noise: &NoiseParams,
    cfg: &McConfig,
) -> Result<McResult, McError> {
    cfg.validate()?;
    spec.validate_start(x0)?;
    let runs: Vec<Result<FirstExit, McError>> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| {
            first_exit(
                x0,
                spec,
                sys,
                noise,
                cfg,
                trajectory_seed(cfg.master_seed, i as u64),
            )
        })
        .collect();
    // Surface the first failure in index order, independent of scheduling.
    let mut outcomes = Vec::with_capacity(runs.len());
    for run in runs {
        outcomes.push(run?);
    }
    aggregate(&outcomes, cfg)
}

/// Index-order aggregation of trajectory outcomes into an [`McResult`].
fn aggregate(outcomes: &[FirstExit], cfg: &McConfig) -> Result<McResult, McError> {
    let times: Vec<Option<f64>> = outcomes.iter().map(|o| o.time(cfg.dt)).collect();
    let mut crossings = 0usize;
    let mut captures = 0usize;
    let mut censored = 0usize;
    let mut total_steps = 0u64;
    for outcome in outcomes {
        match outcome {
            FirstExit::Exited { steps, kind } => {
                total_steps += steps;
                match kind {
                    ExitKind::Crossing => crossings += 1,
                    ExitKind::Capture => captures += 1,
                }
            }
            FirstExit::Censored => {
                censored += 1;
                total_steps += cfg.max_steps;
            }
        }
    }
    let exited: Vec<f64> = times.iter().flatten().copied().collect();
    if exited.is_empty() {
        return Err(McError::AllCensored {
            trajectories: outcomes.len(),
            max_steps: cfg.max_steps,
        });
    }
    let n = exited.len() as f64;
    let mean = neumaier_sum(exited.iter().copied()) / n;
    let logs: Vec<f64> = exited.iter().map(|t| t.ln()).collect();
    let log_mean = neumaier_sum(logs.iter().copied()) / n;
    let log_var = if exited.len() > 1 {
        neumaier_sum(logs.iter().map(|l| (l - log_mean) * (l - log_mean))) / (n - 1.0)
    } else {
        0.0
    };
    let half_width = Z_95 * (log_var / n).sqrt();
    Ok(McResult {
        times,
        crossings,
        captures,
        censored,
        mean,
        ci_low: (log_mean - half_width).exp(),
        ci_high: (log_mean + half_width).exp(),
        total_steps,
    })
}

/// Compensated (Neumaier) summation; exact to one rounding of the true sum
/// for the ensemble sizes used here.
fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{find_fixed_points, stable_manifold};
    use crate::linalg::BoxRegion;
    use crate::model::{NoiseCase, SystemParams};
    use proptest::prelude::*;
    use rand::Rng;

    fn veg() -> System {
        System::Vegetation(SystemParams::default())
    }

    fn case_i(eps: f64) -> NoiseParams {
        NoiseParams::for_case(NoiseCase::I, eps).expect("case (i) noise must be valid")
    }

    fn training_box() -> BoxRegion {
        BoxRegion::new(1.0, 7.0, 0.0, 2.0)
    }

    #[test]
    fn zero_intensity_freezes_the_noise_and_never_exits() {
        let sys = veg();
        let noise = case_i(0.05);
        let x = StateVec::new(2.0, 1.0);
        let dt = 1e-3;

        // A zero normal pair reduces the step to plain Euler, bit for bit.
        let b = sys.drift(x).expect("drift at an interior state");
        let euler = StateVec::new(x.x1 + b.x1 * dt, x.x2 + b.x2 * dt);
        let stepped =
            em_step(x, dt, &sys, &noise, StateVec::new(0.0, 0.0)).expect("step must succeed");
        assert_eq!(
            stepped, euler,
            "zero noise draw must reproduce the deterministic Euler step exactly"
        );

        // Zero intensity from the vegetated attractor: the drift residual at
        // the solved fixed point is ~1e-14, so the state never reaches the
        // line and every trajectory censors.
        let frozen = NoiseParams {
            sigma1: noise.sigma1,
            sigma2: noise.sigma2,
            eps: 0.0,
        };
        let fps = find_fixed_points(&sys).expect("vegetation fixed points");
        let sn2 = fps[2].location;
        let spec = ExitSpec::line(3.0).expect("line rule");
        let cfg = McConfig {
            max_steps: 400,
            trajectories: 3,
            ..McConfig::default()
        };
        let single = first_exit(sn2, &spec, &sys, &frozen, &cfg, 1).expect("trajectory runs");
        assert_eq!(
            single,
            FirstExit::Censored,
            "a noiseless trajectory at the attractor must never exit"
        );
        let err = exit_ensemble(sn2, &spec, &sys, &frozen, &cfg)
            .expect_err("an all-censored ensemble must be an error");
        assert!(
            matches!(err, McError::AllCensored { trajectories: 3, max_steps: 400 }),
            "expected AllCensored with the configured counts, got {err:?}"
        );
    }

    #[test]
    fn the_biomass_axis_is_invariant_under_multiplicative_noise() {
        let sys = veg();
        let noise = case_i(0.3);
        // At x1 = 0 both the biomass drift and the x1^2 noise amplitude
        // vanish, so no draw can move the state off the axis.
        let x = StateVec::new(0.0, 0.7);
        let z = StateVec::new(3.7, -1.2);
        let stepped = em_step(x, 1e-3, &sys, &noise, z).expect("axis state is inside the domain");
        assert_eq!(
            stepped.x1, 0.0,
            "biomass must stay exactly zero on the degenerate axis"
        );
        assert!(
            stepped.x2 != x.x2,
            "the additive moisture noise must still act on the axis"
        );
    }

    #[test]
    fn one_step_increments_match_the_diffusion_covariance() {
        let sys = veg();
        let noise = case_i(0.3);
        let x = StateVec::new(2.0, 1.0);
        let dt = 1e-3;
        let n = 100_000usize;
        let b = sys.drift(x).expect("drift at the frozen state");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut d1 = Vec::with_capacity(n);
        let mut d2 = Vec::with_capacity(n);
        for _ in 0..n {
            let z = StateVec::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let next = em_step(x, dt, &sys, &noise, z).expect("frozen-state step");
            d1.push(next.x1 - x.x1 - b.x1 * dt);
            d2.push(next.x2 - x.x2 - b.x2 * dt);
        }
        let nf = n as f64;
        let mean = |v: &[f64]| neumaier_sum(v.iter().copied()) / nf;
        let (m1, m2) = (mean(&d1), mean(&d2));
        let a = sys.diffusion(x, &noise);
        let (v1_true, v2_true) = (a.m11 * noise.eps * dt, a.m22 * noise.eps * dt);

        // Mean of each increment is zero within three standard errors.
        assert!(
            m1.abs() <= 3.0 * (v1_true / nf).sqrt(),
            "biomass increments must be centred: mean {m1:.3e}"
        );
        assert!(
            m2.abs() <= 3.0 * (v2_true / nf).sqrt(),
            "moisture increments must be centred: mean {m2:.3e}"
        );

        // Sample variances match a(x) eps dt within three sigma of the
        // chi-squared estimator spread var * sqrt(2/(n-1)).
        let var = |v: &[f64], m: f64| {
            neumaier_sum(v.iter().map(|d| (d - m) * (d - m))) / (nf - 1.0)
        };
        let (v1, v2) = (var(&d1, m1), var(&d2, m2));
        assert!(
            (v1 - v1_true).abs() <= 3.0 * v1_true * (2.0 / (nf - 1.0)).sqrt(),
            "biomass variance {v1:.4e} must match a11 eps dt = {v1_true:.4e}"
        );
        assert!(
            (v2 - v2_true).abs() <= 3.0 * v2_true * (2.0 / (nf - 1.0)).sqrt(),
            "moisture variance {v2:.4e} must match a22 eps dt = {v2_true:.4e}"
        );

        // Cross-covariance is zero within three sigma of sqrt(v1 v2 / n).
        let cov = neumaier_sum(d1.iter().zip(&d2).map(|(a, b)| (a - m1) * (b - m2))) / (nf - 1.0);
        assert!(
            cov.abs() <= 3.0 * (v1_true * v2_true / nf).sqrt(),
            "increment components must be uncorrelated: cov {cov:.3e}"
        );
    }

    #[test]
    fn ensembles_are_bitwise_reproducible_and_seed_sensitive() {
        let sys = System::OrnsteinUhlenbeck;
        let noise = NoiseParams::new(1.0, 1.0, 0.5).expect("benchmark noise");
        let x0 = StateVec::new(2.0, 0.0);
        let spec = ExitSpec::line(1.0).expect("line rule");
        let cfg = McConfig {
            max_steps: 200_000,
            trajectories: 64,
            master_seed: 99,
            ..McConfig::default()
        };
        let a = exit_ensemble(x0, &spec, &sys, &noise, &cfg).expect("ensemble a");
        let b = exit_ensemble(x0, &spec, &sys, &noise, &cfg).expect("ensemble b");
        assert_eq!(
            a, b,
            "the same master seed must reproduce the ensemble bit for bit"
        );
        assert_eq!(
            a.mean.to_bits(),
            b.mean.to_bits(),
            "ensemble means must agree in bits, not just value"
        );
        let c = exit_ensemble(
            x0,
            &spec,
            &sys,
            &noise,
            &McConfig {
                master_seed: 100,
                ..cfg
            },
        )
        .expect("ensemble c");
        assert!(
            a.times != c.times,
            "a different master seed must produce different trajectories"
        );
    }

    #[test]
    fn exit_times_are_positive_multiples_of_the_step() {
        let sys = System::OrnsteinUhlenbeck;
        let noise = NoiseParams::new(1.0, 1.0, 0.5).expect("benchmark noise");
        let x0 = StateVec::new(2.0, 0.0);
        let spec = ExitSpec::line(1.0).expect("line rule");
        let cfg = McConfig {
            max_steps: 200_000,
            trajectories: 32,
            master_seed: 5,
            ..McConfig::default()
        };
        let result = exit_ensemble(x0, &spec, &sys, &noise, &cfg).expect("ensemble");
        assert_eq!(result.times.len(), cfg.trajectories, "one entry per trajectory");
        for (i, time) in result.times.iter().enumerate() {
            let t = time.unwrap_or_else(|| panic!("trajectory {i} unexpectedly censored"));
            let k = (t / cfg.dt).round();
            assert!(
                k >= 1.0 && t == k * cfg.dt,
                "exit time {t} of trajectory {i} must be a positive multiple of dt"
            );
        }
        assert_eq!(
            result.crossings + result.captures + result.censored,
            cfg.trajectories,
            "every trajectory is a crossing, a capture, or censored"
        );
        assert_eq!(
            result.captures, 0,
            "line exits never use the capture fallback"
        );
        let naive: f64 = result.times.iter().flatten().sum::<f64>() / 32.0;
        assert!(
            (result.mean - naive).abs() <= 1e-12 * naive.abs(),
            "compensated mean {} must agree with the naive mean {naive}",
            result.mean
        );
        assert!(
            result.ci_low <= result.mean && result.mean <= result.ci_high * 1.2,
            "the interval must bracket the scale of the mean"
        );
    }

    #[test]
    fn halving_the_step_keeps_the_ensemble_mean_stable() {
        // Weak-order-one sanity on the benchmark system: the drift carries
        // the state from x1 = 2 through the line at x1 = 1, so exit times
        // concentrate near the deterministic passage and expose any O(dt)
        // bias well inside the tolerance band.
        let sys = System::OrnsteinUhlenbeck;
        let noise = NoiseParams::new(1.0, 1.0, 0.5).expect("benchmark noise");
        let x0 = StateVec::new(2.0, 0.0);
        let spec = ExitSpec::line(1.0).expect("line rule");
        let coarse_cfg = McConfig {
            dt: 2e-3,
            max_steps: 100_000,
            trajectories: 1500,
            master_seed: 7,
        };
        let fine_cfg = McConfig {
            dt: 1e-3,
            max_steps: 200_000,
            ..coarse_cfg
        };
        let coarse = exit_ensemble(x0, &spec, &sys, &noise, &coarse_cfg).expect("coarse ensemble");
        let fine = exit_ensemble(x0, &spec, &sys, &noise, &fine_cfg).expect("fine ensemble");
        assert_eq!(coarse.censored, 0, "drift-dominated passage must always exit");
        assert_eq!(fine.censored, 0, "drift-dominated passage must always exit");
        let rel = (coarse.mean - fine.mean).abs() / fine.mean;
        assert!(
            rel <= 0.10,
            "halving dt moved the mean by {:.1}% (coarse {:.4}, fine {:.4})",
            rel * 100.0,
            coarse.mean,
            fine.mean
        );
    }

    #[test]
    fn separatrix_exits_mostly_fire_the_crossing_test() {
        let sys = veg();
        let noise = case_i(0.09);
        let fps = find_fixed_points(&sys).expect("vegetation fixed points");
        let sep = stable_manifold(&sys, &fps[1], &training_box()).expect("separatrix");
        let sn1 = fps[0].location;
        let sn2 = fps[2].location;
        let spec = ExitSpec::separatrix(&sep, sn1).expect("separatrix rule");
        let cfg = McConfig {
            max_steps: 2_000_000,
            trajectories: 80,
            master_seed: 11,
            ..McConfig::default()
        };
        let result = exit_ensemble(sn2, &spec, &sys, &noise, &cfg).expect("ensemble");
        let exits = result.crossings + result.captures;
        assert!(exits > 0, "at this intensity most trajectories must exit");
        let crossing_share = result.crossings as f64 / exits as f64;
        assert!(
            crossing_share >= 0.95,
            "the crossing test must catch at least 95% of exits; got {:.1}% over {exits} exits",
            crossing_share * 100.0
        );

        // The spatial hash must agree with the brute-force polyline scan on
        // step-sized segments sampled around the basin.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = StateVec::new(rng.random_range(0.0..6.0), rng.random_range(0.0..2.2));
            let b = StateVec::new(
                a.x1 + rng.random_range(-0.1..0.1),
                a.x2 + rng.random_range(-0.1..0.1),
            );
            match &spec {
                ExitSpec::Separatrix { grid, .. } => assert_eq!(
                    grid.crosses(a, b),
                    sep.crossed_by(a, b),
                    "grid and brute-force crossing tests disagree on ({a:?}, {b:?})"
                ),
                ExitSpec::Line { .. } => unreachable!(),
            }
        }
    }

    #[test]
    fn rejects_misconfigured_runs_by_name() {
        let sys = veg();
        let noise = case_i(0.05);
        let x0 = StateVec::new(2.0, 1.0);

        let bad_dt = McConfig {
            dt: 0.0,
            ..McConfig::default()
        };
        assert!(
            matches!(bad_dt.validate(), Err(McError::Invalid(m)) if m.contains("dt")),
            "zero dt must be rejected by name"
        );
        let bad_steps = McConfig {
            max_steps: 0,
            ..McConfig::default()
        };
        assert!(
            matches!(bad_steps.validate(), Err(McError::Invalid(m)) if m.contains("max_steps")),
            "zero step budget must be rejected by name"
        );
        let bad_count = McConfig {
            trajectories: 0,
            ..McConfig::default()
        };
        assert!(
            matches!(bad_count.validate(), Err(McError::Invalid(m)) if m.contains("trajectory")),
            "empty ensembles must be rejected by name"
        );
        McConfig::default().validate().expect("the default config is valid");

        assert!(
            ExitSpec::line(-3.0).is_err(),
            "a negative line threshold must be rejected"
        );
        assert!(
            ExitSpec::line(f64::NAN).is_err(),
            "a NaN line threshold must be rejected"
        );
        let spec = ExitSpec::line(3.0).expect("line rule");
        let err = first_exit(x0, &spec, &sys, &noise, &McConfig::default(), 1)
            .expect_err("a start left of the line must be rejected");
        assert!(
            matches!(err, McError::Invalid(ref m) if m.contains("start biomass")),
            "expected a start-vs-threshold rejection, got {err:?}"
        );

        let fps = find_fixed_points(&sys).expect("fixed points");
        let sep = stable_manifold(&sys, &fps[1], &training_box()).expect("separatrix");
        assert!(
            ExitSpec::separatrix_with_radius(&sep, fps[0].location, 0.0).is_err(),
            "a zero capture radius must be rejected"
        );
        let sep_spec = ExitSpec::separatrix(&sep, fps[0].location).expect("separatrix rule");
        let err = first_exit(
            fps[0].location,
            &sep_spec,
            &sys,
            &noise,
            &McConfig::default(),
            1,
        )
        .expect_err("starting inside the capture ball must be rejected");
        assert!(
            matches!(err, McError::Invalid(ref m) if m.contains("capture ball")),
            "expected a capture-ball rejection, got {err:?}"
        );

        // A state that blows up aborts as an error, not a sample: an
        // astronomical moisture level launches the biomass upward and the
        // quadratic saturation overflows on the following step, away from
        // the exit line.
        let cfg = McConfig {
            max_steps: 50,
            ..McConfig::default()
        };
        let err = first_exit(
            StateVec::new(10.0, 1e160),
            &ExitSpec::line(3.0).expect("line rule"),
            &sys,
            &noise,
            &cfg,
            1,
        )
        .expect_err("an exploding trajectory must abort");
        assert!(
            matches!(err, McError::NonFiniteState { .. }),
            "expected a non-finite-state abort, got {err:?}"
        );

        // Beyond the drift pole the model itself rejects the state.
        let err = first_exit(StateVec::new(-2.0, 1.0), &sep_spec, &sys, &noise, &cfg, 1)
            .expect_err("a start beyond the pole must be rejected");
        assert!(
            matches!(err, McError::Model(ModelError::OutOfDomain { .. })),
            "expected the drift's domain rejection, got {err:?}"
        );
    }

    proptest! {
        /// The spatial hash answers exactly like the brute-force scan over
        /// every polyline segment, for arbitrary polylines and queries —
        /// including queries far outside the indexed bounding box.
        #[test]
        fn grid_crossing_matches_the_brute_force_scan(
            poly in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..40),
            a1 in -2.0f64..2.0,
            a2 in -2.0f64..2.0,
            b1 in -2.0f64..2.0,
            b2 in -2.0f64..2.0,
        ) {
            let pts: Vec<StateVec> = poly.into_iter().map(|(x, y)| StateVec::new(x, y)).collect();
            let grid = SegGrid::new(&pts, 0.05).expect("grid over a finite polyline");
            let (a, b) = (StateVec::new(a1, a2), StateVec::new(b1, b2));
            let brute = pts
                .windows(2)
                .any(|w| segments_intersect(a, b, w[0], w[1]));
            prop_assert_eq!(grid.crosses(a, b), brute);
        }
    }
}
