//! Sharp exit-time asymptotics assembled from the learned landscape.
//!
//! For small noise intensity `eps`, the mean first exit time from the
//! attractor's basin is exponentially large in the quasipotential barrier
//! `V*`, with a prefactor `L` fixed by the geometry of the exit:
//!
//! ```text
//!     E[tau] ~ L(eps) exp{ V* / eps }
//! ```
//!
//! Two boundary regimes arise. Where the drift crosses the boundary
//! strictly inward (non-characteristic; here a vertical line `x1 = c`),
//! exits concentrate at the boundary minimizer `x*` of `V` and
//!
//! ```text
//!     L(eps) = (1 / mu*) sqrt( det h* / (2 pi eps) ) exp{ I_F }
//!     mu*    = <(1/2) a grad V + l, n> (x*)    outward escape speed
//!     det h* = d^2 V / d x2^2 (x*)             curvature along the line
//!     I_F    = integral of F dt over (-inf, 0]  transport along the path
//! ```
//!
//! Where the drift is tangent to the boundary (characteristic; here the
//! separatrix, with exits funneling through the saddle), the path spends
//! infinite time at both ends and
//!
//! ```text
//!     L = (pi / lambda*) sqrt( |det H*| / det Hbar ) exp{ I_F }
//! ```
//!
//! with `lambda*` the positive drift eigenvalue at the saddle, `H*` and
//! `Hbar` the quasipotential Hessians at the saddle and the attractor
//! (Lyapunov/Riccati solves — exact at fixed points, no network involved),
//! and `I_F` over the full line. The transport integrand is
//!
//! ```text
//!     F = div l + (1/2) <A, grad V>,    A_i = sum_j d a_ij / d x_j
//! ```
//!
//! which vanishes at fixed points of an exactly decomposed field (trace the
//! Riccati identity `H J + J^T H + H a H = 0` against `grad l = J + a H / 2`),
//! so `I_F` converges despite the infinite time tails. Quadrature trims
//! samples within [`TRANSPORT_TRIM`] of a fixed point, where the learned
//! integrand is pure approximation error.
//!
//! Ingredients are frozen into an [`ExitAsymptotics`] value once, so the
//! mean-first-passage evaluations are pure arithmetic afterwards.

use crate::dynsys::{find_fixed_points, DynError, FixedPoint, FixedPointKind};
use crate::landscape::{self, LandscapeError, QuasipotentialModel};
use crate::linalg::StateVec;
use crate::model::ModelError;
use crate::paths::{Path, PathError};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExitError {
    #[error("invalid exit ingredients: {0}")]
    Invalid(String),
    #[error("noise intensity must be positive, got {eps}")]
    NonPositiveIntensity { eps: f64 },
    #[error("transport integrand is not finite at path time {t}")]
    NonFiniteTransport { t: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Distance from a fixed point below which transport samples are dropped.
pub const TRANSPORT_TRIM: f64 = 1e-3;

/// How far a supplied path may end from the exit point it claims to reach.
const ENDPOINT_SLACK: f64 = 0.05;

/// Frozen ingredients of the sharp mean-first-exit-time law for one
/// boundary. Build with [`line_exit_asymptotics`] or
/// [`separatrix_exit_asymptotics`]; evaluate with [`Self::mfpt`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExitAsymptotics {
    /// Exit through a boundary the drift crosses strictly inward.
    NonCharacteristic {
        barrier: f64,
        mu_star: f64,
        det_h_star: f64,
        f_integral: f64,
    },
    /// Exit through a boundary tangent to the drift, via the saddle.
    Characteristic {
        barrier: f64,
        lambda_star: f64,
        det_h_saddle: f64,
        det_h_attractor: f64,
        f_integral: f64,
    },
}

impl ExitAsymptotics {
    /// Quasipotential barrier in the exponent.
    pub fn barrier(&self) -> f64 {
        match *self {
            ExitAsymptotics::NonCharacteristic { barrier, .. }
            | ExitAsymptotics::Characteristic { barrier, .. } => barrier,
        }
    }

    /// Transport-term integral along the most probable exit path.
    pub fn f_integral(&self) -> f64 {
        match *self {
            ExitAsymptotics::NonCharacteristic { f_integral, .. }
            | ExitAsymptotics::Characteristic { f_integral, .. } => f_integral,
        }
    }

    /// Checks the sign and finiteness constraints the formulas require.
    pub fn validate(&self) -> Result<(), ExitError> {
        let fail = |msg: &str| Err(ExitError::Invalid(msg.into()));
        let barrier = self.barrier();
        if !barrier.is_finite() || barrier <= 0.0 {
            return fail("barrier must be positive and finite");
        }
        if !self.f_integral().is_finite() {
            return fail("transport integral must be finite");
        }
        match *self {
            ExitAsymptotics::NonCharacteristic {
                mu_star,
                det_h_star,
                ..
            } => {
                if !mu_star.is_finite() || mu_star <= 0.0 {
                    return fail("escape speed mu* must be positive at a non-characteristic exit");
                }
                if !det_h_star.is_finite() || det_h_star <= 0.0 {
                    return fail("boundary curvature det h* must be positive");
                }
            }
            ExitAsymptotics::Characteristic {
                lambda_star,
                det_h_saddle,
                det_h_attractor,
                ..
            } => {
                if !lambda_star.is_finite() || lambda_star <= 0.0 {
                    return fail("saddle eigenvalue lambda* must be positive");
                }
                if !det_h_saddle.is_finite() || det_h_saddle >= 0.0 {
                    return fail("saddle Hessian determinant must be negative");
                }
                if !det_h_attractor.is_finite() || det_h_attractor <= 0.0 {
                    return fail("attractor Hessian determinant must be positive");
                }
            }
        }
        Ok(())
    }

    /// Prefactor `L(eps)`; independent of `eps` in the characteristic case.
    pub fn prefactor(&self, eps: f64) -> Result<f64, ExitError> {
        self.validate()?;
        if !eps.is_finite() || eps <= 0.0 {
            return Err(ExitError::NonPositiveIntensity { eps });
        }
        Ok(match *self {
            ExitAsymptotics::NonCharacteristic {
                mu_star,
                det_h_star,
                f_integral,
                ..
            } => (det_h_star / (2.0 * PI * eps)).sqrt() / mu_star * f_integral.exp(),
            ExitAsymptotics::Characteristic {
                lambda_star,
                det_h_saddle,
                det_h_attractor,
                f_integral,
                ..
            } => {
                PI / lambda_star * (-det_h_saddle / det_h_attractor).sqrt() * f_integral.exp()
            }
        })
    }

    /// Mean first exit time `L(eps) exp{barrier / eps}`.
    ///
    /// Overflows to `+inf` once `barrier / eps` exceeds the exponent range
    /// (~709); use [`Self::ln_mfpt`] in that regime.
    pub fn mfpt(&self, eps: f64) -> Result<f64, ExitError> {
        Ok(self.prefactor(eps)? * (self.barrier() / eps).exp())
    }

    /// `ln E[tau]`, finite for every positive `eps`.
    pub fn ln_mfpt(&self, eps: f64) -> Result<f64, ExitError> {
        Ok(self.prefactor(eps)?.ln() + self.barrier() / eps)
    }
}

/// Transport integral with the default fixed-point trim radius.
pub fn transport_integral(
    path: &Path,
    model: &QuasipotentialModel,
) -> Result<f64, ExitError> {
    transport_integral_trimmed(path, model, TRANSPORT_TRIM)
}

/// Trapezoidal `integral F dt` over the path's time grid, skipping samples
/// within `trim` of any fixed point of the model's drift (the integrand
/// vanishes there up to learning error, and the time parameterization has
/// infinite tails at the path's fixed-point endpoints).
pub fn transport_integral_trimmed(
    path: &Path,
    model: &QuasipotentialModel,
    trim: f64,
) -> Result<f64, ExitError> {
    let fixed_points = find_fixed_points(model.system())?;
    let keep: Vec<bool> = path
        .x
        .iter()
        .map(|x| fixed_points.iter().all(|fp| x.dist(fp.location) > trim))
        .collect();
    let mut integrand = vec![0.0; path.len()];
    let mut kept_any = false;
    for i in 0..path.len() {
        if keep[i] {
            let f = model.f_transport(path.x[i]);
            if !f.is_finite() {
                return Err(ExitError::NonFiniteTransport { t: path.t[i] });
            }
            integrand[i] = f;
            kept_any = true;
        }
    }
    if !kept_any {
        return Err(ExitError::Invalid(
            "path lies entirely within the fixed-point trim radius".into(),
        ));
    }
    let mut total = 0.0;
    for i in 1..path.len() {
        if keep[i - 1] && keep[i] {
            total += 0.5 * (integrand[i - 1] + integrand[i]) * (path.t[i] - path.t[i - 1]);
        }
    }
    Ok(total)
}

/// Assembles the non-characteristic exit law through the vertical line
/// `x1 = c`, at the boundary minimizer `x_star` (see
/// [`landscape::boundary_argmin_line`]), with `path` the transition path
/// from the attractor into `x_star` providing the transport integral.
pub fn line_exit_asymptotics(
    model: &QuasipotentialModel,
    c: f64,
    x_star: StateVec,
    path: &Path,
) -> Result<ExitAsymptotics, ExitError> {
    path.validate()?;
    if (x_star.x1 - c).abs() > 1e-9 {
        return Err(ExitError::Invalid(format!(
            "exit point x1 = {} is not on the boundary line x1 = {c}",
            x_star.x1
        )));
    }
    if path.end().dist(x_star) > ENDPOINT_SLACK {
        return Err(ExitError::Invalid(format!(
            "path ends {:.3} away from the exit point",
            path.end().dist(x_star)
        )));
    }
    let asym = ExitAsymptotics::NonCharacteristic {
        barrier: model.v(x_star),
        mu_star: landscape::mu_star(model, x_star),
        det_h_star: landscape::det_h_star(model, x_star),
        f_integral: transport_integral(path, model)?,
    };
    asym.validate()?;
    Ok(asym)
}

/// Assembles the characteristic exit law through the separatrix, with
/// `path` the transition path from the attractor into the saddle. Fixed
/// point curvatures come from the Riccati solves; only the barrier and the
/// transport integral read the learned field.
pub fn separatrix_exit_asymptotics(
    model: &QuasipotentialModel,
    path: &Path,
) -> Result<ExitAsymptotics, ExitError> {
    path.validate()?;
    let fixed_points = find_fixed_points(model.system())?;
    let saddle = fixed_points
        .iter()
        .find(|fp| fp.kind == FixedPointKind::Saddle)
        .ok_or_else(|| ExitError::Invalid("the system has no saddle to exit through".into()))?;
    let attractor = nearest_attractor(&fixed_points, model.x_ref())?;
    if path.end().dist(saddle.location) > ENDPOINT_SLACK {
        return Err(ExitError::Invalid(format!(
            "path ends {:.3} away from the saddle",
            path.end().dist(saddle.location)
        )));
    }
    if path.start().dist(attractor.location) > ENDPOINT_SLACK {
        return Err(ExitError::Invalid(format!(
            "path starts {:.3} away from the attractor",
            path.start().dist(attractor.location)
        )));
    }
    let lambda_star = saddle
        .eigenvalues
        .iter()
        .map(|ev| ev.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let h_saddle = landscape::hessian_riccati(saddle, model.system(), model.noise())?;
    let h_attractor = landscape::hessian_riccati(attractor, model.system(), model.noise())?;
    let asym = ExitAsymptotics::Characteristic {
        barrier: model.v(saddle.location),
        lambda_star,
        det_h_saddle: h_saddle.det(),
        det_h_attractor: h_attractor.det(),
        f_integral: transport_integral(path, model)?,
    };
    asym.validate()?;
    Ok(asym)
}

fn nearest_attractor(
    fixed_points: &[FixedPoint],
    x_ref: StateVec,
) -> Result<&FixedPoint, ExitError> {
    fixed_points
        .iter()
        .filter(|fp| fp.kind == FixedPointKind::StableNode)
        .min_by(|a, b| {
            a.location
                .dist(x_ref)
                .total_cmp(&b.location.dist(x_ref))
        })
        .ok_or_else(|| ExitError::Invalid("the system has no stable attractor".into()))
}

/// One row of a mean-first-exit-time curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfptRow {
    pub eps: f64,
    pub prefactor: f64,
    pub mfpt: f64,
    pub ln_mfpt: f64,
}

/// Evaluates the frozen law on a grid of noise intensities.
pub fn mfpt_curve(
    asym: &ExitAsymptotics,
    eps_grid: &[f64],
) -> Result<Vec<MfptRow>, ExitError> {
    eps_grid
        .iter()
        .map(|&eps| {
            Ok(MfptRow {
                eps,
                prefactor: asym.prefactor(eps)?,
                mfpt: asym.mfpt(eps)?,
                ln_mfpt: asym.ln_mfpt(eps)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adnet::NetParams;
    use crate::landscape::boundary_argmin_line;
    use crate::model::{NoiseParams, System};
    use crate::paths::{mpp_reverse, shooting_mpp, PathKind, ReverseOptions, ShootingOptions};
    use approx::assert_relative_eq;

    /// Exactly solvable surrogate: zero network on the benchmark system
    /// makes `V = |x|^2` the true quasipotential with `l = 0` and `F = 0`.
    fn ou_surrogate(eps: f64) -> QuasipotentialModel {
        QuasipotentialModel::new(
            System::OrnsteinUhlenbeck,
            NoiseParams::new(1.0, 1.0, eps).unwrap(),
            StateVec::ZERO,
            NetParams::zeros(),
        )
    }

    /// Zero network on the vegetation system: a quadratic landscape bowl
    /// around the vegetated attractor. Not decomposition-consistent, but
    /// every network-independent ingredient is exact.
    fn veg_surrogate() -> QuasipotentialModel {
        QuasipotentialModel::new(
            System::vegetation_default(),
            NoiseParams::new(0.1, 1.0, 0.05).unwrap(),
            StateVec::new(4.636567466356647, 0.9958587892916611),
            NetParams::zeros(),
        )
    }

    fn straight_path(from: StateVec, to: StateVec, n: usize) -> Path {
        let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let x: Vec<StateVec> = (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                from + (to - from) * s
            })
            .collect();
        Path {
            kind: PathKind::Learned,
            t,
            x,
            p: None,
            cumulative_action: vec![0.0; n],
        }
    }

    #[test]
    fn benchmark_line_exit_matches_the_closed_form() {
        let model = ou_surrogate(0.1);
        let c = 1.0;
        let bmin = boundary_argmin_line(&model, c, -1.5, 1.5);
        assert!(!bmin.at_edge);
        assert_relative_eq!(bmin.point.x2, 0.0, epsilon = 1e-9);
        let path = mpp_reverse(&model, bmin.point, &ReverseOptions::default()).unwrap();
        let asym = line_exit_asymptotics(&model, c, bmin.point, &path).unwrap();

        match asym {
            ExitAsymptotics::NonCharacteristic {
                barrier,
                mu_star,
                det_h_star,
                f_integral,
            } => {
                assert_relative_eq!(barrier, 1.0, epsilon = 1e-9);
                assert_relative_eq!(mu_star, 1.0, epsilon = 1e-9);
                assert_relative_eq!(det_h_star, 2.0, epsilon = 1e-5);
                assert!(
                    f_integral.abs() <= 1e-12,
                    "transport vanishes identically, got {f_integral}"
                );
            }
            other => panic!("expected a non-characteristic law, got {other:?}"),
        }

        // Closed form: L(eps) = (1/mu*) sqrt(det h* / (2 pi eps)) with
        // mu* = 1, det h* = 2 collapses to 1/sqrt(pi eps).
        for eps in [0.03, 0.05, 0.08, 0.1] {
            let expected = 1.0 / (PI * eps).sqrt();
            assert_relative_eq!(
                asym.prefactor(eps).unwrap(),
                expected,
                max_relative = 1e-5
            );
        }

        // The scaling law: prefactor * sqrt(eps) has no eps left in it.
        let scale = |eps: f64| asym.prefactor(eps).unwrap() * eps.sqrt();
        let reference = scale(0.05);
        for eps in [0.03, 0.08] {
            assert_relative_eq!(scale(eps), reference, max_relative = 1e-12);
        }

        // Exponential dominance: mean exit times fall as the noise grows,
        // and eps ln E[tau] recovers the barrier as eps shrinks.
        let m = |eps: f64| asym.mfpt(eps).unwrap();
        assert!(m(0.02) > m(0.05) && m(0.05) > m(0.1));
        let slope = 0.005 * asym.ln_mfpt(0.005).unwrap();
        assert!(
            (slope - 1.0).abs() <= 0.02,
            "eps ln mfpt at eps=0.005 must approach the barrier 1, got {slope}"
        );
    }

    #[test]
    fn assembly_rejects_wiring_mistakes() {
        let model = ou_surrogate(0.1);
        let x_star = StateVec::new(1.0, 0.0);
        let path = straight_path(StateVec::new(0.2, 0.0), x_star, 50);

        let off_line = line_exit_asymptotics(&model, 2.0, x_star, &path);
        assert!(
            matches!(&off_line, Err(ExitError::Invalid(msg)) if msg.contains("boundary line")),
            "got {off_line:?}"
        );

        let wrong_end = straight_path(StateVec::new(0.2, 0.0), StateVec::new(0.5, 0.7), 50);
        let mismatched = line_exit_asymptotics(&model, 1.0, x_star, &wrong_end);
        assert!(
            matches!(&mismatched, Err(ExitError::Invalid(msg)) if msg.contains("away from the exit point")),
            "got {mismatched:?}"
        );
    }

    #[test]
    fn hand_valued_characteristic_prefactor_and_intensity_independence() {
        let asym = ExitAsymptotics::Characteristic {
            barrier: 0.1643,
            lambda_star: 0.3721,
            det_h_saddle: -0.238,
            det_h_attractor: 0.1546,
            f_integral: 0.0,
        };
        asym.validate().unwrap();
        // The curvature ratio sqrt(0.238 / 0.1546) on its own.
        let ratio = asym.prefactor(0.05).unwrap() * 0.3721 / PI;
        assert_relative_eq!(ratio, 1.2407, max_relative = 0.01);
        // No eps anywhere in the characteristic prefactor.
        assert_eq!(
            asym.prefactor(0.01).unwrap().to_bits(),
            asym.prefactor(0.9).unwrap().to_bits()
        );
        let eps = 0.05;
        assert_relative_eq!(
            asym.mfpt(eps).unwrap(),
            asym.prefactor(eps).unwrap() * (0.1643f64 / eps).exp(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn invalid_ingredients_are_rejected_by_name() {
        let rejects = |asym: ExitAsymptotics, needle: &str| {
            let err = asym.validate().unwrap_err();
            assert!(
                matches!(&err, ExitError::Invalid(msg) if msg.contains(needle)),
                "expected a complaint about {needle:?}, got {err}"
            );
            assert!(asym.prefactor(0.05).is_err(), "prefactor must refuse too");
        };
        let valid_a = ExitAsymptotics::NonCharacteristic {
            barrier: 0.0691,
            mu_star: 0.022,
            det_h_star: 2.2602,
            f_integral: 0.0,
        };
        valid_a.validate().unwrap();
        let tweak_a = |barrier: f64, mu_star: f64, det_h_star: f64, f_integral: f64| {
            ExitAsymptotics::NonCharacteristic {
                barrier,
                mu_star,
                det_h_star,
                f_integral,
            }
        };

        rejects(tweak_a(-0.1, 0.022, 2.2602, 0.0), "barrier");
        rejects(tweak_a(0.0691, -0.022, 2.2602, 0.0), "mu*");
        rejects(tweak_a(0.0691, 0.022, 0.0, 0.0), "det h*");
        rejects(tweak_a(0.0691, 0.022, 2.2602, f64::NAN), "transport");
        rejects(
            ExitAsymptotics::Characteristic {
                barrier: 0.1643,
                lambda_star: -0.3721,
                det_h_saddle: -0.238,
                det_h_attractor: 0.1546,
                f_integral: 0.0,
            },
            "lambda*",
        );
        rejects(
            ExitAsymptotics::Characteristic {
                barrier: 0.1643,
                lambda_star: 0.3721,
                det_h_saddle: 0.238,
                det_h_attractor: 0.1546,
                f_integral: 0.0,
            },
            "saddle Hessian",
        );
        rejects(
            ExitAsymptotics::Characteristic {
                barrier: 0.1643,
                lambda_star: 0.3721,
                det_h_saddle: -0.238,
                det_h_attractor: -0.1546,
                f_integral: 0.0,
            },
            "attractor Hessian",
        );

        for bad_eps in [0.0, -0.3, f64::NAN] {
            let err = valid_a.mfpt(bad_eps).unwrap_err();
            assert!(
                matches!(err, ExitError::NonPositiveIntensity { .. }),
                "eps = {bad_eps} must be refused"
            );
        }
    }

    #[test]
    fn vegetation_saddle_assembly_collects_exact_fixed_point_data() {
        let model = veg_surrogate();
        let sn2 = model.x_ref();
        let us = StateVec::new(5.0 / 3.0, 1.55 / 1.2);
        let opts = ShootingOptions {
            hit_tolerance: 0.02,
            ..ShootingOptions::default()
        };
        let path = shooting_mpp(model.system(), model.noise(), sn2, us, &opts).unwrap();
        let asym = separatrix_exit_asymptotics(&model, &path).unwrap();
        match asym {
            ExitAsymptotics::Characteristic {
                barrier,
                lambda_star,
                det_h_saddle,
                det_h_attractor,
                f_integral,
            } => {
                // The surrogate landscape is the exact squared distance.
                assert_relative_eq!(barrier, us.dist(sn2).powi(2), max_relative = 1e-9);
                // Everything else is independent of the landscape head.
                assert_relative_eq!(lambda_star, 0.3721, epsilon = 1e-3);
                assert_relative_eq!(det_h_saddle, -0.238, epsilon = 1e-3);
                assert_relative_eq!(det_h_attractor, 0.1546, epsilon = 5e-4);
                assert!(f_integral.is_finite());
            }
            other => panic!("expected a characteristic law, got {other:?}"),
        }
        assert_eq!(
            asym.prefactor(0.04).unwrap().to_bits(),
            asym.prefactor(0.9).unwrap().to_bits(),
            "characteristic prefactor carries no intensity dependence"
        );
    }

    #[test]
    fn log_mfpt_is_affine_in_inverse_intensity() {
        let asym = ExitAsymptotics::NonCharacteristic {
            barrier: 1.0,
            mu_star: 1.0,
            det_h_star: 2.0,
            f_integral: 0.0,
        };
        // After removing the known sqrt(eps) prefactor dependence, what is
        // left must regress onto 1/eps with the barrier as slope.
        let grid: Vec<f64> = (2..=10).map(|i| i as f64 * 0.01).collect();
        let xs: Vec<f64> = grid.iter().map(|eps| 1.0 / eps).collect();
        let ys: Vec<f64> = grid
            .iter()
            .map(|&eps| asym.ln_mfpt(eps).unwrap() + 0.5 * eps.ln())
            .collect();
        let n = xs.len() as f64;
        let xbar = xs.iter().sum::<f64>() / n;
        let ybar = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
        let syy: f64 = ys.iter().map(|y| (y - ybar).powi(2)).sum();
        let slope = sxy / sxx;
        let r2 = sxy * sxy / (sxx * syy);
        assert!(r2 >= 0.999, "affine form violated: R^2 = {r2}");
        assert_relative_eq!(slope, 1.0, max_relative = 1e-9);

        // Deep small-noise regime: the plain mean overflows, its log stays
        // evaluable.
        assert!(asym.mfpt(1e-3).unwrap().is_infinite());
        let ln = asym.ln_mfpt(1e-3).unwrap();
        assert!(ln.is_finite() && ln > 999.0);

        // The curve rows agree with direct evaluation.
        let rows = mfpt_curve(&asym, &grid).unwrap();
        assert_eq!(rows.len(), grid.len());
        for row in &rows {
            assert_eq!(row.mfpt.to_bits(), asym.mfpt(row.eps).unwrap().to_bits());
            assert_eq!(
                row.prefactor.to_bits(),
                asym.prefactor(row.eps).unwrap().to_bits()
            );
        }
        assert!(mfpt_curve(&asym, &[0.05, -0.01]).is_err());
    }

    #[test]
    fn reloaded_checkpoint_reproduces_the_mean_exit_time_bitwise() {
        use crate::linalg::BoxRegion;
        use crate::trainer::{self, BasinFilter, TrainConfig};

        let sys = System::OrnsteinUhlenbeck;
        let noise = NoiseParams::new(1.0, 1.0, 0.1).unwrap();
        let cfg = TrainConfig {
            domain: BoxRegion::new(-2.0, 2.0, -2.0, 2.0),
            raw_samples: 64,
            epochs: 30,
            history_every: 10,
            ..TrainConfig::default()
        };
        let colloc = trainer::sample_collocation(&sys, &noise, &cfg, &BasinFilter::All).unwrap();
        let run = trainer::train(&sys, &noise, StateVec::ZERO, &cfg, &colloc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("model.json");
        run.checkpoint.save(&file).unwrap();
        let reloaded = crate::trainer::Checkpoint::load(&file).unwrap();

        let original = QuasipotentialModel::from_checkpoint(&run.checkpoint, 0.1).unwrap();
        let restored = QuasipotentialModel::from_checkpoint(&reloaded, 0.1).unwrap();

        let c = 1.0;
        let build = |model: &QuasipotentialModel| {
            let bmin = boundary_argmin_line(model, c, -1.5, 1.5);
            let path = straight_path(StateVec::new(0.1, 0.02), bmin.point, 200);
            line_exit_asymptotics(model, c, bmin.point, &path).unwrap()
        };
        let a = build(&original);
        let b = build(&restored);
        assert_eq!(
            a.mfpt(0.07).unwrap().to_bits(),
            b.mfpt(0.07).unwrap().to_bits(),
            "every ingredient must survive the round trip bit-exactly"
        );
        assert_eq!(
            a.prefactor(0.07).unwrap().to_bits(),
            b.prefactor(0.07).unwrap().to_bits()
        );
    }

    #[test]
    fn transport_quadrature_trims_fixed_point_neighborhoods() {
        let model = veg_surrogate();
        let sn2 = model.x_ref();
        // March straight into the attractor; the last samples sit inside
        // the trim ball and must not contribute.
        let path = straight_path(sn2 + StateVec::new(0.5, 0.0), sn2, 501);
        let trimmed = transport_integral(&path, &model).unwrap();

        // Hand quadrature over exactly the kept segments.
        let mut by_hand = 0.0;
        for i in 1..path.len() {
            let (xa, xb) = (path.x[i - 1], path.x[i]);
            if xa.dist(sn2) > TRANSPORT_TRIM && xb.dist(sn2) > TRANSPORT_TRIM {
                by_hand += 0.5
                    * (model.f_transport(xa) + model.f_transport(xb))
                    * (path.t[i] - path.t[i - 1]);
            }
        }
        assert_relative_eq!(trimmed, by_hand, max_relative = 1e-12);

        // The surrogate's transport does not vanish at the attractor, so
        // shrinking the trim radius must change the answer: the quadrature
        // really is dropping those samples.
        let tighter = transport_integral_trimmed(&path, &model, 1e-6).unwrap();
        assert!(
            (tighter - trimmed).abs() > 0.0,
            "trim radius had no effect on a path entering the ball"
        );

        // A path living entirely inside the ball has nothing to integrate.
        let inside = straight_path(sn2, sn2 + StateVec::new(5e-4, 0.0), 20);
        assert!(matches!(
            transport_integral(&inside, &model),
            Err(ExitError::Invalid(_))
        ));
    }

}
