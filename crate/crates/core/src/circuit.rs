//! DC solution of the two-party resistive loop.
//!
//! Alice's source `U_A` sits behind her private resistor `R_A` and one copy of
//! the shared resistor `R_S`; Bob mirrors this with `R_B`, `R_S`, `U_B`. The
//! two halves meet on a single ideal (lossless, lumped) wire, which is the only
//! place anybody but the owners can measure. Positive current flows from
//! Alice's side toward Bob's side.

use num_traits::{Signed, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::{serde_rational, to_f64, Rational};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CircuitError {
    #[error("resistance must be strictly positive, got {0}")]
    NonPositiveResistance(Rational),
    #[error("both perturbation deltas are nonzero; only one side may move at a time")]
    BothDeltasNonzero,
    #[error("both perturbation deltas are zero")]
    BothDeltasZero,
    #[error("perturbation produced no current change")]
    ZeroCurrentDelta,
    #[error("noise sigma must be non-negative and finite, got {0}")]
    InvalidSigma(f64),
}

/// Strictly positive resistance in ohms.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RationalText", into = "RationalText")]
pub struct Resistance(Rational);

impl Resistance {
    pub fn new(ohms: Rational) -> Result<Self, CircuitError> {
        if ohms.is_positive() {
            Ok(Self(ohms))
        } else {
            Err(CircuitError::NonPositiveResistance(ohms))
        }
    }

    pub fn ohms(&self) -> &Rational {
        &self.0
    }
}

impl TryFrom<RationalText> for Resistance {
    type Error = CircuitError;

    fn try_from(t: RationalText) -> Result<Self, Self::Error> {
        Self::new(t.0)
    }
}

impl From<Resistance> for RationalText {
    fn from(r: Resistance) -> Self {
        RationalText(r.0)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct RationalText(#[serde(with = "serde_rational")] Rational);

/// Voltage in volts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Voltage(#[serde(with = "serde_rational")] pub Rational);

impl Voltage {
    pub fn volts(&self) -> &Rational {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

/// Current in amperes, positive from Alice toward Bob.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Current(#[serde(with = "serde_rational")] pub Rational);

impl Current {
    pub fn amperes(&self) -> &Rational {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

/// The five circuit quantities of one protocol instant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopParams {
    pub r_s: Resistance,
    pub r_a: Resistance,
    pub r_b: Resistance,
    pub u_a: Voltage,
    pub u_b: Voltage,
}

impl LoopParams {
    pub fn with_sources(&self, u_a: Rational, u_b: Rational) -> Self {
        Self {
            u_a: Voltage(u_a),
            u_b: Voltage(u_b),
            ..self.clone()
        }
    }

    /// `R_S + R_A`, the resistance seen looking from the wire into Alice's side.
    pub fn alice_arm(&self) -> Rational {
        self.r_s.ohms() + self.r_a.ohms()
    }

    /// `R_S + R_B`, the resistance seen looking from the wire into Bob's side.
    pub fn bob_arm(&self) -> Rational {
        self.r_s.ohms() + self.r_b.ohms()
    }
}

/// The public wire pair at one instant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LineObservation {
    pub u_c: Voltage,
    pub i_c: Current,
}

impl LineObservation {
    pub fn new(u_c: Rational, i_c: Rational) -> Self {
        Self {
            u_c: Voltage(u_c),
            i_c: Current(i_c),
        }
    }

    pub fn u(&self) -> &Rational {
        &self.u_c.0
    }

    pub fn i(&self) -> &Rational {
        &self.i_c.0
    }
}

/// Exact loop solution.
pub fn solve_loop(params: &LoopParams) -> LineObservation {
    let total = params.r_a.ohms() + params.r_s.ohms() * Rational::from_integer(2.into())
        + params.r_b.ohms();
    let i_c = (params.u_a.volts() - params.u_b.volts()) / total;
    let u_c = params.u_a.volts() - params.alice_arm() * &i_c;
    LineObservation::new(u_c, i_c)
}

/// Baseline and one-sided perturbed observation.
pub fn perturbed_pair(
    params: &LoopParams,
    delta_u_a: &Voltage,
    delta_u_b: &Voltage,
) -> Result<(LineObservation, LineObservation), CircuitError> {
    match (delta_u_a.is_zero(), delta_u_b.is_zero()) {
        (true, true) => Err(CircuitError::BothDeltasZero),
        (false, false) => Err(CircuitError::BothDeltasNonzero),
        _ => {
            let baseline = solve_loop(params);
            let shifted = params.with_sources(
                params.u_a.volts() + delta_u_a.volts(),
                params.u_b.volts() + delta_u_b.volts(),
            );
            Ok((baseline, solve_loop(&shifted)))
        }
    }
}

/// Magnitude of `dU_c / dI_c` between two observations.
///
/// Alice-driven perturbations give `R_S + R_B`, Bob-driven ones `R_S + R_A`.
/// The sign differs between the two under a single current reference, so only
/// the magnitude is returned.
pub fn differential_slope(
    baseline: &LineObservation,
    perturbed: &LineObservation,
) -> Result<Rational, CircuitError> {
    let d_i = perturbed.i() - baseline.i();
    if d_i.is_zero() {
        return Err(CircuitError::ZeroCurrentDelta);
    }
    let d_u = perturbed.u() - baseline.u();
    Ok((d_u / d_i).abs())
}

/// Floating-point observation with measurement noise applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyObservation {
    pub u_c: f64,
    pub i_c: f64,
}

impl NoisyObservation {
    /// The exact dyadic rational each float denotes.
    pub fn to_exact(&self) -> Option<LineObservation> {
        Some(LineObservation::new(
            Rational::from_float(self.u_c)?,
            Rational::from_float(self.i_c)?,
        ))
    }
}

impl From<&LineObservation> for NoisyObservation {
    fn from(obs: &LineObservation) -> Self {
        Self {
            u_c: to_f64(obs.u()),
            i_c: to_f64(obs.i()),
        }
    }
}

/// Adds independent zero-mean Gaussian noise to both line quantities.
pub fn observe_with_noise(
    obs: &LineObservation,
    sigma_u: f64,
    sigma_i: f64,
    seed: u64,
) -> Result<NoisyObservation, CircuitError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    observe_with_noise_rng(obs, sigma_u, sigma_i, &mut rng)
}

/// As [`observe_with_noise`] but drawing from a caller-owned generator.
pub fn observe_with_noise_rng<R: rand::Rng + ?Sized>(
    obs: &LineObservation,
    sigma_u: f64,
    sigma_i: f64,
    rng: &mut R,
) -> Result<NoisyObservation, CircuitError> {
    for sigma in [sigma_u, sigma_i] {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(CircuitError::InvalidSigma(sigma));
        }
    }
    let mut noisy = NoisyObservation::from(obs);
    if sigma_u > 0.0 {
        noisy.u_c += Normal::new(0.0, sigma_u).expect("validated sigma").sample(rng);
    }
    if sigma_i > 0.0 {
        noisy.i_c += Normal::new(0.0, sigma_i).expect("validated sigma").sample(rng);
    }
    Ok(noisy)
}

/// Floating-point counterpart of [`differential_slope`].
pub fn noisy_slope(baseline: &NoisyObservation, perturbed: &NoisyObservation) -> Option<f64> {
    let d_i = perturbed.i_c - baseline.i_c;
    if d_i == 0.0 {
        return None;
    }
    Some(((perturbed.u_c - baseline.u_c) / d_i).abs())
}
