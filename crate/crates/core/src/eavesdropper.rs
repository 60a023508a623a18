//! Passive Eve.
//!
//! Eve sees only the public line. From the differential response of each
//! one-sided perturbation she learns `X_A = R_S + R_A` and `X_B = R_S + R_B`,
//! which is enough to recover both source voltages outright. Given `R_S` at
//! any later time she recovers every resistance and so every key.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{differential_slope, CircuitError, LineObservation, Resistance, Voltage};
use crate::exact::{format_rational, serde_rational, Rational};
use crate::protocol::{derive_key, Key, KeyRound, Palette, Phase, Transcript};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EveError {
    #[error("round {0} does not have all three phases recorded")]
    IncompleteRound(u64),
    #[error("observation for ({round_k}, {phase}) already recorded")]
    AlreadyRecorded { round_k: u64, phase: Phase },
    #[error("round {round_k}: implied value {value} is not in the public palette")]
    ValueNotInPalette { round_k: u64, value: String },
    #[error("transient samples mix phases or rounds")]
    MixedPhases,
    #[error("transient samples must come from a perturbation phase")]
    NotAPerturbation,
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

/// Eve's tap: every public observation, write-once per (round, phase).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EveRecording {
    observations: BTreeMap<(u64, Phase), LineObservation>,
}

impl EveRecording {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_transcript(transcript: &Transcript) -> Result<Self, EveError> {
        let mut rec = Self::new();
        for e in transcript.entries() {
            rec.record(e.round_k, e.phase, e.obs.clone())?;
        }
        Ok(rec)
    }

    pub fn record(
        &mut self,
        round_k: u64,
        phase: Phase,
        obs: LineObservation,
    ) -> Result<(), EveError> {
        if self.observations.contains_key(&(round_k, phase)) {
            return Err(EveError::AlreadyRecorded { round_k, phase });
        }
        self.observations.insert((round_k, phase), obs);
        Ok(())
    }

    pub fn get(&self, round_k: u64, phase: Phase) -> Option<&LineObservation> {
        self.observations.get(&(round_k, phase))
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    /// Distinct round numbers, ascending.
    pub fn rounds(&self) -> Vec<u64> {
        let mut rounds: Vec<u64> = self.observations.keys().map(|(k, _)| *k).collect();
        rounds.dedup();
        rounds
    }

    /// The recording as an ordered transcript.
    pub fn to_transcript(&self) -> Transcript {
        let mut t = Transcript::new();
        for ((k, phase), obs) in &self.observations {
            // Entries are already in (round, phase) order; gaps only occur
            // when a round was cut short, which `push` rejects, so stop there.
            if t.record(*k, *phase, obs.clone()).is_err() {
                break;
            }
        }
        t
    }

    /// Recording restricted to the first `count` recorded rounds.
    pub fn first_rounds(&self, count: usize) -> EveRecording {
        let keep: Vec<u64> = self.rounds().into_iter().take(count).collect();
        EveRecording {
            observations: self
                .observations
                .iter()
                .filter(|((k, _), _)| keep.contains(k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }

    fn round(&self, round_k: u64) -> Result<[&LineObservation; 3], EveError> {
        let get = |phase| self.get(round_k, phase).ok_or(EveError::IncompleteRound(round_k));
        Ok([
            get(Phase::Baseline)?,
            get(Phase::AlicePerturb)?,
            get(Phase::BobPerturb)?,
        ])
    }
}

/// The two loop sums exposed on the line in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct XValues {
    pub round_k: u64,
    /// `R_S + R_A`, from Bob's perturbation.
    #[serde(with = "serde_rational")]
    pub x_a: Rational,
    /// `R_S + R_B`, from Alice's perturbation.
    #[serde(with = "serde_rational")]
    pub x_b: Rational,
}

pub fn eve_x_values(recording: &EveRecording, round_k: u64) -> Result<XValues, EveError> {
    let [baseline, alice_perturbed, bob_perturbed] = recording.round(round_k)?;
    Ok(XValues {
        round_k,
        x_a: differential_slope(baseline, bob_perturbed)?,
        x_b: differential_slope(baseline, alice_perturbed)?,
    })
}

/// Both source voltages from the baseline and the X values; needs no `R_S`.
pub fn eve_recover_voltages(x: &XValues, baseline: &LineObservation) -> (Voltage, Voltage) {
    let u_a = baseline.u() + &x.x_a * baseline.i();
    let u_b = baseline.u() - &x.x_b * baseline.i();
    (Voltage(u_a), Voltage(u_b))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrackedRound {
    pub round_k: u64,
    pub r_a: Resistance,
    pub r_b: Resistance,
    pub u_a: Voltage,
    pub u_b: Voltage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrackResult {
    #[serde(with = "serde_rational")]
    pub r_s: Rational,
    pub rounds: Vec<CrackedRound>,
    pub key: Key,
    /// True when at least one round was cracked and every recorded round was.
    pub complete: bool,
}

/// Public key-derivation palettes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPalettes {
    pub a: Palette,
    pub b: Palette,
}

fn implied_resistance(round_k: u64, x: &Rational, r_s: &Rational) -> Result<Resistance, EveError> {
    let value = x - r_s;
    Resistance::new(value.clone()).map_err(|_| EveError::ValueNotInPalette {
        round_k,
        value: format_rational(&value),
    })
}

/// Cracks every recorded round with a candidate `R_S`.
///
/// Only stored public data is consulted, so it makes no difference whether
/// the rounds were recorded before or after `R_S` became known.
pub fn eve_crack_with_secret(
    recording: &EveRecording,
    r_s: &Rational,
    palettes: &KeyPalettes,
) -> Result<CrackResult, EveError> {
    let mut rounds = Vec::new();
    let mut key_rounds = Vec::new();
    for round_k in recording.rounds() {
        let x = eve_x_values(recording, round_k)?;
        let baseline = recording.get(round_k, Phase::Baseline).expect("complete round");
        let r_a = implied_resistance(round_k, &x.x_a, r_s)?;
        let r_b = implied_resistance(round_k, &x.x_b, r_s)?;
        for (palette, r) in [(&palettes.a, &r_a), (&palettes.b, &r_b)] {
            if !palette.contains(r.ohms()) {
                return Err(EveError::ValueNotInPalette {
                    round_k,
                    value: format_rational(r.ohms()),
                });
            }
        }
        let (u_a, u_b) = eve_recover_voltages(&x, baseline);
        key_rounds.push(KeyRound {
            round_k,
            r_a: r_a.ohms().clone(),
            r_b: r_b.ohms().clone(),
        });
        rounds.push(CrackedRound {
            round_k,
            r_a,
            r_b,
            u_a,
            u_b,
        });
    }
    let key = derive_key(&key_rounds, &palettes.a, &palettes.b)
        .expect("membership checked per round");
    Ok(CrackResult {
        r_s: r_s.clone(),
        complete: !rounds.is_empty(),
        rounds,
        key,
    })
}

/// One line sample taken while a single perturbation was in progress.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransientSample {
    pub round_k: u64,
    pub phase: Phase,
    pub obs: LineObservation,
}

/// Sample a fraction `t` of the way from the baseline to the perturbed
/// endpoint. With a purely resistive loop the path between the two is affine.
pub fn transient_sample(
    recording: &EveRecording,
    round_k: u64,
    phase: Phase,
    t: &Rational,
) -> Result<TransientSample, EveError> {
    if phase == Phase::Baseline {
        return Err(EveError::NotAPerturbation);
    }
    let [baseline, ..] = recording.round(round_k)?;
    let end = recording.get(round_k, phase).expect("complete round");
    let lerp = |a: &Rational, b: &Rational| a + (b - a) * t;
    Ok(TransientSample {
        round_k,
        phase,
        obs: LineObservation::new(lerp(baseline.u(), end.u()), lerp(baseline.i(), end.i())),
    })
}

/// Slope magnitude from any two distinct-current samples of one phase.
pub fn transient_slope(samples: &[TransientSample]) -> Result<(Phase, Rational), EveError> {
    let first = samples.first().ok_or(CircuitError::ZeroCurrentDelta)?;
    if first.phase == Phase::Baseline {
        return Err(EveError::NotAPerturbation);
    }
    if samples
        .iter()
        .any(|s| s.phase != first.phase || s.round_k != first.round_k)
    {
        return Err(EveError::MixedPhases);
    }
    let other = samples
        .iter()
        .find(|s| s.obs.i() != first.obs.i())
        .ok_or(CircuitError::ZeroCurrentDelta)?;
    Ok((first.phase, differential_slope(&first.obs, &other.obs)?))
}

/// X values rebuilt from intermediate samples only.
pub fn transient_view(
    alice_phase: &[TransientSample],
    bob_phase: &[TransientSample],
) -> Result<XValues, EveError> {
    let (pa, x_b) = transient_slope(alice_phase)?;
    let (pb, x_a) = transient_slope(bob_phase)?;
    if pa != Phase::AlicePerturb
        || pb != Phase::BobPerturb
        || alice_phase[0].round_k != bob_phase[0].round_k
    {
        return Err(EveError::MixedPhases);
    }
    Ok(XValues {
        round_k: alice_phase[0].round_k,
        x_a,
        x_b,
    })
}

/// Convenience: X values from the two samples at `t1` and `t2` of each phase.
pub fn transient_view_at(
    recording: &EveRecording,
    round_k: u64,
    t1: &Rational,
    t2: &Rational,
) -> Result<XValues, EveError> {
    let take = |phase| -> Result<Vec<TransientSample>, EveError> {
        Ok(vec![
            transient_sample(recording, round_k, phase, t1)?,
            transient_sample(recording, round_k, phase, t2)?,
        ])
    };
    transient_view(&take(Phase::AlicePerturb)?, &take(Phase::BobPerturb)?)
}
