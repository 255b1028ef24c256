//! Drift, diffusion, and parameter records for the dynamical systems.
//!
//! The working model couples vegetation biomass `x1` with soil moisture `x2`:
//!
//! ```text
//! dx1 = [ rho x1 (x2 - x1/K) - beta x1 / (x1 + x0) ] dt + sqrt(eps) sigma1 x1^2 dW1
//! dx2 = [ R - alpha x2 - lambda x1 x2 ] dt            + sqrt(eps) sigma2       dW2
//! ```
//!
//! Biomass grows logistically in the moisture level with carrying capacity
//! `K` and is grazed through a saturating Holling term `beta x1/(x1+x0)`;
//! moisture is recharged by rainfall `R`, lost at rate `alpha`, and
//! transpired by vegetation at rate `lambda x1`. State-dependent noise
//! enters biomass with amplitude `sigma1 x1^2` and moisture additively with
//! `sigma2`, so the diffusion matrix and its row divergence are
//!
//! ```text
//! a(x) = diag(sigma1^2 x1^4, sigma2^2),     A_i(x) = sum_j d a_ij / d x_j
//! A(x) = (4 sigma1^2 x1^3, 0)
//! ```
//!
//! Interior equilibria sit on `x2 = R / (lambda x1 + alpha)` at positive
//! roots of the cubic returned by [`equilibrium_cubic`].
//!
//! A 2-D Ornstein--Uhlenbeck process (`b = -x`, `a = I`) is bundled as an
//! exactly solvable benchmark: its quasipotential relative to the origin is
//! `|x|^2`, with zero rotational component.

use crate::linalg::{Mat2, StateVec};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Identifier of the vegetation--water system in configs and artifacts.
pub const VEGETATION_ID: &str = "vegetation";
/// Identifier of the Ornstein--Uhlenbeck benchmark system.
pub const OU_ID: &str = "ou2d";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state x1 = {x1} is at or beyond the pole x1 = -x0 = {pole}")]
    OutOfDomain { x1: f64, pole: f64 },
    #[error("parameter `{name}` must be strictly positive, got {value}")]
    NonPositiveParam { name: &'static str, value: f64 },
    #[error("noise amplitude `{name}` must be non-negative, got {value}")]
    NegativeNoise { name: &'static str, value: f64 },
    #[error("unknown system id `{0}` (expected `vegetation` or `ou2d`)")]
    UnknownSystem(String),
    #[error("unknown noise case `{0}` (expected `i`, `ii`, or `iii`)")]
    UnknownNoiseCase(String),
}

/// Parameters of the vegetation--water drift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemParams {
    /// Vegetation growth rate `rho`.
    pub rho: f64,
    /// Carrying capacity `K`.
    pub k: f64,
    /// Maximal grazing rate `beta`.
    pub beta: f64,
    /// Half-saturation biomass `x0` of the grazing term.
    pub x0: f64,
    /// Moisture loss rate `alpha`.
    pub alpha: f64,
    /// Transpiration rate `lambda`.
    pub lambda: f64,
    /// Average rainfall `R`; the bifurcation parameter.
    pub rainfall: f64,
}

impl Default for SystemParams {
    /// Baseline parameter set at the bistable working rainfall `R = 1.55`.
    fn default() -> Self {
        Self {
            rho: 1.0,
            k: 10.0,
            beta: 3.0,
            x0: 1.0,
            alpha: 1.0,
            lambda: 0.12,
            rainfall: 1.55,
        }
    }
}

impl SystemParams {
    /// Baseline parameters with a different rainfall level.
    pub fn with_rainfall(rainfall: f64) -> Self {
        Self {
            rainfall,
            ..Self::default()
        }
    }

    /// All parameters must be strictly positive.
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("rho", self.rho),
            ("k", self.k),
            ("beta", self.beta),
            ("x0", self.x0),
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("rainfall", self.rainfall),
        ];
        for (name, value) in fields {
            if !(value > 0.0) {
                return Err(ModelError::NonPositiveParam { name, value });
            }
        }
        Ok(())
    }
}

/// Noise configuration: amplitudes `sigma1`, `sigma2` and overall intensity
/// `eps`.
///
/// The amplitudes shape the diffusion matrix `a(x)` and therefore select
/// which quasipotential is being learned; `eps` only scales time in the
/// exit asymptotics and the Monte Carlo step, so trained landscapes remain
/// valid across `eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Multiplicative biomass noise amplitude (stored non-negative).
    pub sigma1: f64,
    /// Additive moisture noise amplitude (stored non-negative).
    pub sigma2: f64,
    /// Small-noise intensity `eps`.
    pub eps: f64,
}

impl NoiseParams {
    pub fn new(sigma1: f64, sigma2: f64, eps: f64) -> Result<Self, ModelError> {
        if !(sigma1 >= 0.0) {
            return Err(ModelError::NegativeNoise {
                name: "sigma1",
                value: sigma1,
            });
        }
        if !(sigma2 >= 0.0) {
            return Err(ModelError::NegativeNoise {
                name: "sigma2",
                value: sigma2,
            });
        }
        if !(eps > 0.0) {
            return Err(ModelError::NonPositiveParam {
                name: "eps",
                value: eps,
            });
        }
        Ok(Self {
            sigma1,
            sigma2,
            eps,
        })
    }

    /// Named amplitude pair at intensity `eps`.
    pub fn for_case(case: NoiseCase, eps: f64) -> Result<Self, ModelError> {
        let (sigma1, sigma2) = case.amplitudes();
        Self::new(sigma1, sigma2, eps)
    }

    /// Same amplitudes at a different intensity.
    pub fn with_eps(self, eps: f64) -> Result<Self, ModelError> {
        Self::new(self.sigma1, self.sigma2, eps)
    }
}

/// The three studied noise amplitude pairs.
///
/// Case II lowers the biomass amplitude (`sigma1`: 0.1 -> 0.08) and case III
/// lowers the moisture amplitude (`sigma2`: 1.0 -> 0.8), each relative to
/// the benchmark case I.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseCase {
    I,
    II,
    III,
}

impl NoiseCase {
    pub const ALL: [NoiseCase; 3] = [NoiseCase::I, NoiseCase::II, NoiseCase::III];

    pub fn amplitudes(self) -> (f64, f64) {
        match self {
            NoiseCase::I => (0.1, 1.0),
            NoiseCase::II => (0.08, 1.0),
            NoiseCase::III => (0.1, 0.8),
        }
    }
}

impl fmt::Display for NoiseCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NoiseCase::I => "i",
            NoiseCase::II => "ii",
            NoiseCase::III => "iii",
        };
        f.write_str(s)
    }
}

impl FromStr for NoiseCase {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(NoiseCase::I),
            "ii" | "2" => Ok(NoiseCase::II),
            "iii" | "3" => Ok(NoiseCase::III),
            other => Err(ModelError::UnknownNoiseCase(other.to_string())),
        }
    }
}

/// A concrete 2-D stochastic system: drift, Jacobian, and noise geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum System {
    Vegetation(SystemParams),
    OrnsteinUhlenbeck,
}

impl System {
    /// Vegetation system at the baseline bistable parameters.
    pub fn vegetation_default() -> Self {
        System::Vegetation(SystemParams::default())
    }

    /// Looks a system up by its artifact identifier.
    pub fn by_id(id: &str, params: Option<SystemParams>) -> Result<Self, ModelError> {
        match id {
            VEGETATION_ID => {
                let p = params.unwrap_or_default();
                p.validate()?;
                Ok(System::Vegetation(p))
            }
            OU_ID => Ok(System::OrnsteinUhlenbeck),
            other => Err(ModelError::UnknownSystem(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            System::Vegetation(_) => VEGETATION_ID,
            System::OrnsteinUhlenbeck => OU_ID,
        }
    }

    pub fn params(&self) -> Option<&SystemParams> {
        match self {
            System::Vegetation(p) => Some(p),
            System::OrnsteinUhlenbeck => None,
        }
    }

    /// Drift field `b(x)`.
    ///
    /// The vegetation drift has a pole at `x1 = -x0`; states at or beyond it
    /// are rejected as out of domain.
    pub fn drift(&self, x: StateVec) -> Result<StateVec, ModelError> {
        match self {
            System::Vegetation(p) => {
                if x.x1 <= -p.x0 {
                    return Err(ModelError::OutOfDomain {
                        x1: x.x1,
                        pole: -p.x0,
                    });
                }
                let b1 = p.rho * x.x1 * (x.x2 - x.x1 / p.k) - p.beta * x.x1 / (x.x1 + p.x0);
                let b2 = p.rainfall - p.alpha * x.x2 - p.lambda * x.x1 * x.x2;
                Ok(StateVec::new(b1, b2))
            }
            System::OrnsteinUhlenbeck => Ok(-x),
        }
    }

    /// Jacobian `grad b(x)` of the drift.
    pub fn drift_jacobian(&self, x: StateVec) -> Result<Mat2, ModelError> {
        match self {
            System::Vegetation(p) => {
                if x.x1 <= -p.x0 {
                    return Err(ModelError::OutOfDomain {
                        x1: x.x1,
                        pole: -p.x0,
                    });
                }
                let denom = x.x1 + p.x0;
                Ok(Mat2::new(
                    p.rho * (x.x2 - 2.0 * x.x1 / p.k) - p.beta * p.x0 / (denom * denom),
                    p.rho * x.x1,
                    -p.lambda * x.x2,
                    -p.alpha - p.lambda * x.x1,
                ))
            }
            System::OrnsteinUhlenbeck => Ok(Mat2::diag(-1.0, -1.0)),
        }
    }

    /// Diffusion matrix `a(x) = sigma(x) sigma(x)^T`.
    pub fn diffusion(&self, x: StateVec, noise: &NoiseParams) -> Mat2 {
        match self {
            System::Vegetation(_) => {
                let x1sq = x.x1 * x.x1;
                Mat2::diag(
                    noise.sigma1 * noise.sigma1 * x1sq * x1sq,
                    noise.sigma2 * noise.sigma2,
                )
            }
            System::OrnsteinUhlenbeck => Mat2::IDENTITY,
        }
    }

    /// Noise amplitude matrix `sigma(x)` multiplying the Wiener increments.
    pub fn sigma_matrix(&self, x: StateVec, noise: &NoiseParams) -> Mat2 {
        match self {
            System::Vegetation(_) => Mat2::diag(noise.sigma1 * x.x1 * x.x1, noise.sigma2),
            System::OrnsteinUhlenbeck => Mat2::IDENTITY,
        }
    }

    /// Row divergence of the diffusion matrix, `A_i = sum_j d a_ij / d x_j`.
    pub fn divergence_vector(&self, x: StateVec, noise: &NoiseParams) -> StateVec {
        match self {
            System::Vegetation(_) => StateVec::new(
                4.0 * noise.sigma1 * noise.sigma1 * x.x1 * x.x1 * x.x1,
                0.0,
            ),
            System::OrnsteinUhlenbeck => StateVec::ZERO,
        }
    }

    /// Half the state gradient of the diffusion quadratic form,
    /// `1/2 grad_x <p, a(x) p>` — the momentum source term of the
    /// Hamiltonian characteristic equations.
    pub fn diffusion_quad_gradient(&self, x: StateVec, p: StateVec, noise: &NoiseParams) -> StateVec {
        match self {
            System::Vegetation(_) => StateVec::new(
                2.0 * noise.sigma1 * noise.sigma1 * x.x1 * x.x1 * x.x1 * p.x1 * p.x1,
                0.0,
            ),
            System::OrnsteinUhlenbeck => StateVec::ZERO,
        }
    }
}

/// Moisture level of the interior-equilibrium branch, `x2 = R/(lambda x1 + alpha)`.
pub fn equilibrium_moisture(x1: f64, p: &SystemParams) -> f64 {
    p.rainfall / (p.lambda * x1 + p.alpha)
}

/// Equilibrium cubic `f` and its derivative `f'` at biomass `x1`.
///
/// Positive roots of
///
/// ```text
/// f(x1) = rho lambda x1^3 + rho (lambda x0 + alpha) x1^2
///       + (rho alpha x0 + K beta lambda - rho R K) x1 + K beta alpha - rho R K x0
/// ```
///
/// are exactly the interior equilibria of the drift once paired with
/// [`equilibrium_moisture`]; double roots mark saddle-node points.
pub fn equilibrium_cubic(x1: f64, p: &SystemParams) -> (f64, f64) {
    let c3 = p.rho * p.lambda;
    let c2 = p.rho * (p.lambda * p.x0 + p.alpha);
    let c1 = p.rho * p.alpha * p.x0 + p.k * p.beta * p.lambda - p.rho * p.rainfall * p.k;
    let c0 = p.k * p.beta * p.alpha - p.rho * p.rainfall * p.k * p.x0;
    let f = ((c3 * x1 + c2) * x1 + c1) * x1 + c0;
    let fp = (3.0 * c3 * x1 + 2.0 * c2) * x1 + c1;
    (f, fp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn drift_at_probe_point() {
        let sys = System::vegetation_default();
        let b = sys.drift(StateVec::new(2.0, 1.0)).unwrap();
        assert_relative_eq!(b.x1, -0.4, epsilon = 1e-14);
        assert_relative_eq!(b.x2, 0.31, epsilon = 1e-14);
    }

    #[test]
    fn drift_rejects_pole() {
        let sys = System::vegetation_default();
        let err = sys.drift(StateVec::new(-1.0, 0.5)).unwrap_err();
        assert!(matches!(err, ModelError::OutOfDomain { .. }));
        assert!(sys.drift_jacobian(StateVec::new(-1.5, 0.5)).is_err());
    }

    #[test]
    fn diffusion_and_divergence_at_probe_point() {
        let sys = System::vegetation_default();
        let noise = NoiseParams::new(0.1, 1.0, 0.05).unwrap();
        let a = sys.diffusion(StateVec::new(2.0, 1.0), &noise);
        assert_relative_eq!(a.m11, 0.16, epsilon = 1e-14);
        assert_relative_eq!(a.m22, 1.0, epsilon = 1e-14);
        assert_eq!(a.m12, 0.0);
        let div = sys.divergence_vector(StateVec::new(2.0, 1.0), &noise);
        assert_relative_eq!(div.x1, 0.32, epsilon = 1e-14);
        assert_eq!(div.x2, 0.0);
    }

    #[test]
    fn diffusion_quad_gradient_matches_finite_differences() {
        let noise = NoiseParams::new(0.1, 1.0, 0.05).unwrap();
        let p = StateVec::new(0.7, -0.4);
        let h = 1e-6;
        for sys in [System::vegetation_default(), System::OrnsteinUhlenbeck] {
            let x = StateVec::new(2.5, 1.1);
            let g = sys.diffusion_quad_gradient(x, p, &noise);
            let q = |x: StateVec| 0.5 * p.dot(sys.diffusion(x, &noise).mul_vec(p));
            let fd1 = (q(StateVec::new(x.x1 + h, x.x2)) - q(StateVec::new(x.x1 - h, x.x2)))
                / (2.0 * h);
            let fd2 = (q(StateVec::new(x.x1, x.x2 + h)) - q(StateVec::new(x.x1, x.x2 - h)))
                / (2.0 * h);
            assert_relative_eq!(g.x1, fd1, epsilon = 1e-7, max_relative = 1e-7);
            assert_relative_eq!(g.x2, fd2, epsilon = 1e-7, max_relative = 1e-7);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let sys = System::vegetation_default();
        let h = 1e-5;
        for &(x1, x2) in &[(2.0, 1.0), (4.6, 1.0), (1.2, 1.8), (6.5, 0.2)] {
            let x = StateVec::new(x1, x2);
            let j = sys.drift_jacobian(x).unwrap();
            let dx1 = (sys.drift(StateVec::new(x1 + h, x2)).unwrap()
                - sys.drift(StateVec::new(x1 - h, x2)).unwrap())
                / (2.0 * h);
            let dx2 = (sys.drift(StateVec::new(x1, x2 + h)).unwrap()
                - sys.drift(StateVec::new(x1, x2 - h)).unwrap())
                / (2.0 * h);
            for (analytic, fd) in [
                (j.m11, dx1.x1),
                (j.m21, dx1.x2),
                (j.m12, dx2.x1),
                (j.m22, dx2.x2),
            ] {
                let rel = (analytic - fd).abs() / analytic.abs().max(1.0);
                assert!(rel < 1e-8, "jacobian entry {analytic} vs fd {fd}");
            }
        }
    }

    #[test]
    fn cubic_probe_values() {
        let p = SystemParams::default();
        let (f0, _) = equilibrium_cubic(0.0, &p);
        assert_relative_eq!(f0, 14.5, epsilon = 1e-12);
        // x1 = 5/3 is an exact interior root at the default rainfall.
        let (f_saddle, _) = equilibrium_cubic(5.0 / 3.0, &p);
        assert!(f_saddle.abs() < 1e-12, "f(5/3) = {f_saddle}");
        let x2 = equilibrium_moisture(5.0 / 3.0, &p);
        assert_relative_eq!(x2, 1.55 / 1.2, epsilon = 1e-14);
    }

    #[test]
    fn cubic_roots_are_drift_equilibria() {
        let p = SystemParams::default();
        let sys = System::Vegetation(p);
        // The outer interior root is (-11 + sqrt(411)) / 2 exactly.
        for &x1 in &[5.0 / 3.0, (411f64.sqrt() - 11.0) / 2.0] {
            let x = StateVec::new(x1, equilibrium_moisture(x1, &p));
            let b = sys.drift(x).unwrap();
            assert!(
                b.norm() < 1e-10,
                "drift at cubic root x1={x1} is {:?}",
                b
            );
        }
    }

    #[test]
    fn ou_identities() {
        let sys = System::OrnsteinUhlenbeck;
        let noise = NoiseParams::new(0.3, 0.7, 0.1).unwrap();
        let x = StateVec::new(0.4, -1.2);
        assert_eq!(sys.drift(x).unwrap(), -x);
        assert_eq!(sys.drift_jacobian(x).unwrap(), Mat2::diag(-1.0, -1.0));
        assert_eq!(sys.diffusion(x, &noise), Mat2::IDENTITY);
        assert_eq!(sys.divergence_vector(x, &noise), StateVec::ZERO);
    }

    #[test]
    fn parameter_validation() {
        assert!(SystemParams::default().validate().is_ok());
        let bad = SystemParams {
            k: 0.0,
            ..SystemParams::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(ModelError::NonPositiveParam { name: "k", .. })
        ));
        assert!(NoiseParams::new(-0.1, 1.0, 0.05).is_err());
        assert!(NoiseParams::new(0.1, 1.0, 0.0).is_err());
        assert!(System::by_id("nope", None).is_err());
    }

    #[test]
    fn noise_cases_parse_and_report() {
        assert_eq!("ii".parse::<NoiseCase>().unwrap(), NoiseCase::II);
        assert_eq!(NoiseCase::III.amplitudes(), (0.1, 0.8));
        assert!("iv".parse::<NoiseCase>().is_err());
    }

    proptest! {
        /// a(x) stays symmetric with non-negative diagonal, and equals
        /// sigma(x) sigma(x)^T, on arbitrary states and amplitudes.
        #[test]
        fn diffusion_is_psd_and_consistent(
            x1 in -0.99f64..8.0,
            x2 in -2.0f64..3.0,
            s1 in 0.0f64..0.5,
            s2 in 0.0f64..2.0,
        ) {
            let sys = System::vegetation_default();
            let noise = NoiseParams::new(s1, s2, 0.05).unwrap();
            let x = StateVec::new(x1, x2);
            let a = sys.diffusion(x, &noise);
            prop_assert_eq!(a.m12, a.m21);
            prop_assert!(a.m11 >= 0.0 && a.m22 >= 0.0);
            let s = sys.sigma_matrix(x, &noise);
            let sst = s.mul_mat(s.transpose());
            prop_assert!((sst.m11 - a.m11).abs() <= 1e-12 * a.m11.abs().max(1.0));
            prop_assert!((sst.m22 - a.m22).abs() <= 1e-12 * a.m22.abs().max(1.0));
        }
    }
}
