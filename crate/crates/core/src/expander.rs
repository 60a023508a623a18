//! Hardware-free key expansion: each party publishes `R_S + R_k` for a series
//! of fresh randoms, optionally reduced modulo `q`.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::Resistance;
use crate::eavesdropper::{eve_x_values, EveRecording};
use crate::exact::{serde_bigint, serde_bigint_vec, Rational};
use crate::protocol::{Party, Transcript};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExpanderError {
    #[error("modulus must be at least 2, got {0}")]
    BadModulus(BigInt),
    #[error("{what} {value} is outside [0, {modulus})")]
    OutOfRange {
        what: &'static str,
        value: BigInt,
        modulus: BigInt,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ModulusText", into = "ModulusText")]
pub struct Modulus(BigInt);

#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct ModulusText(#[serde(with = "serde_bigint")] BigInt);

impl Modulus {
    pub fn new(q: BigInt) -> Result<Self, ExpanderError> {
        if q < BigInt::from(2) {
            return Err(ExpanderError::BadModulus(q));
        }
        Ok(Self(q))
    }

    pub fn value(&self) -> &BigInt {
        &self.0
    }

    fn check(&self, what: &'static str, v: &BigInt) -> Result<(), ExpanderError> {
        if v.is_negative() || *v >= self.0 {
            return Err(ExpanderError::OutOfRange {
                what,
                value: v.clone(),
                modulus: self.0.clone(),
            });
        }
        Ok(())
    }
}

impl TryFrom<ModulusText> for Modulus {
    type Error = ExpanderError;

    fn try_from(q: ModulusText) -> Result<Self, Self::Error> {
        Self::new(q.0)
    }
}

impl From<Modulus> for ModulusText {
    fn from(m: Modulus) -> Self {
        ModulusText(m.0)
    }
}

/// One party's batch of published sums.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpanderMessage {
    pub sender: Party,
    /// Index of the first key round covered by `x_list`.
    pub first_round: u64,
    pub modulus: Option<Modulus>,
    #[serde(with = "serde_bigint_vec")]
    pub x_list: Vec<BigInt>,
}

impl ExpanderMessage {
    pub fn compose(
        sender: Party,
        first_round: u64,
        r_s: &BigInt,
        randoms: &[BigInt],
        modulus: Option<&Modulus>,
    ) -> Result<Self, ExpanderError> {
        Ok(Self {
            sender,
            first_round,
            modulus: modulus.cloned(),
            x_list: expand(r_s, randoms, modulus)?,
        })
    }

    /// Round indices covered by this message.
    pub fn rounds(&self) -> std::ops::Range<u64> {
        self.first_round..self.first_round + self.x_list.len() as u64
    }
}

/// Element-wise `r_s + random`, reduced mod `q` when a modulus is given.
pub fn expand(
    r_s: &BigInt,
    randoms: &[BigInt],
    modulus: Option<&Modulus>,
) -> Result<Vec<BigInt>, ExpanderError> {
    match modulus {
        None => Ok(randoms.iter().map(|r| r_s + r).collect()),
        Some(q) => {
            q.check("shared secret", r_s)?;
            randoms
                .iter()
                .map(|r| {
                    q.check("random", r)?;
                    Ok((r_s + r).mod_floor(q.value()))
                })
                .collect()
        }
    }
}

/// `count` uniform draws from `[0, upper)`, reproducible from `seed`.
pub fn draw_randoms(count: usize, upper: u64, seed: u64) -> Vec<BigInt> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| BigInt::from(rng.random_range(0..upper.max(1))))
        .collect()
}

/// Inverse of [`expand`] for a receiver who knows `r_s`.
pub fn recover_partner_randoms(msg: &ExpanderMessage, r_s: &BigInt) -> Vec<BigInt> {
    msg.x_list
        .iter()
        .map(|x| match &msg.modulus {
            None => x - r_s,
            Some(q) => (x - r_s).mod_floor(q.value()),
        })
        .collect()
}

/// Per-round private resistances used in a circuit run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundResistances {
    pub round_k: u64,
    pub r_a: Resistance,
    pub r_b: Resistance,
}

fn as_integer(value: &Rational) -> Option<BigInt> {
    value.denom().is_one().then(|| value.numer().clone())
}

/// True iff the circuit exposes exactly the plain-mode expander sums in every
/// round of the transcript.
pub fn equivalence_check(
    transcript: &Transcript,
    r_s: &Resistance,
    secrets: &[RoundResistances],
) -> bool {
    let Ok(recording) = EveRecording::from_transcript(transcript) else {
        return false;
    };
    let rounds = recording.rounds();
    if rounds.len() != secrets.len() {
        return false;
    }
    let Some(r_s) = as_integer(r_s.ohms()) else {
        return false;
    };
    for (round_k, truth) in rounds.into_iter().zip(secrets) {
        if round_k != truth.round_k {
            return false;
        }
        let Ok(x) = eve_x_values(&recording, round_k) else {
            return false;
        };
        let (Some(r_a), Some(r_b)) = (as_integer(truth.r_a.ohms()), as_integer(truth.r_b.ohms()))
        else {
            return false;
        };
        let expected_a = expand(&r_s, &[r_a], None).expect("plain mode");
        let expected_b = expand(&r_s, &[r_b], None).expect("plain mode");
        let circuit_a = as_integer(&x.x_a);
        let circuit_b = as_integer(&x.x_b);
        if circuit_a.as_ref() != Some(&expected_a[0]) || circuit_b.as_ref() != Some(&expected_b[0])
        {
            return false;
        }
    }
    true
}
