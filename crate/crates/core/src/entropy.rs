//! Eve's uncertainty, computed by exhaustive enumeration.
//!
//! For every candidate shared secret in the public palette Eve cracks the
//! whole recording. Candidates whose implied resistances fall outside the
//! public palettes are eliminated; the rest are equally likely under a uniform
//! prior. Because each consistent candidate implies exactly one key, the key
//! entropy equals the shared-secret entropy however long the key grows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::Resistance;
use crate::eavesdropper::{eve_crack_with_secret, EveRecording, KeyPalettes, XValues};
use crate::exact::{format_rational, serde_rational, Rational};
use crate::expander::{expand, ExpanderError, Modulus};
use crate::protocol::{
    derive_key, draw_round_secrets_among, run_round, AuthKey, Deltas, Key,
    KeyRound, Palette, ProtocolError, SharedSecret,
};

/// Largest shared-secret palette the enumeration accepts.
pub const MAX_SECRET_PALETTE: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EntropyError {
    #[error("shared-secret palette has {0} values; enumeration is capped at {MAX_SECRET_PALETTE}")]
    PaletteTooLarge(usize),
    #[error("palette value {0} is not an integer")]
    NotAnInteger(String),
    #[error("no interior values: palette cannot absorb every shared-secret shift")]
    NoInterior,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Expander(#[from] ExpanderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(with = "serde_rational")]
    pub r_s: Rational,
    pub consistent: bool,
    /// Key implied by this candidate; absent when it was eliminated.
    pub key: Option<Key>,
    /// Why the candidate was eliminated.
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorReport {
    pub candidates: Vec<Candidate>,
    /// Posterior mass per candidate, aligned with `candidates`.
    pub posterior: Vec<f64>,
    pub h_rs_bits: f64,
    pub h_key_bits: f64,
    pub prior_bits: f64,
    pub rounds_used: usize,
}

impl PosteriorReport {
    fn from_candidates(candidates: Vec<Candidate>, rounds_used: usize) -> Self {
        let n_consistent = candidates.iter().filter(|c| c.consistent).count();
        let posterior = candidates
            .iter()
            .map(|c| {
                if c.consistent {
                    1.0 / n_consistent as f64
                } else {
                    0.0
                }
            })
            .collect();
        let rs_groups = vec![1usize; n_consistent];
        let mut key_groups: BTreeMap<&Key, usize> = BTreeMap::new();
        for c in candidates.iter().filter(|c| c.consistent) {
            *key_groups
                .entry(c.key.as_ref().expect("consistent candidates carry a key"))
                .or_default() += 1;
        }
        let key_groups: Vec<usize> = key_groups.into_values().collect();
        Self {
            h_rs_bits: shannon_bits(&rs_groups),
            h_key_bits: shannon_bits(&key_groups),
            prior_bits: (candidates.len() as f64).log2(),
            posterior,
            candidates,
            rounds_used,
        }
    }

    pub fn consistent(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.consistent)
    }

    /// True when distinct consistent candidates always imply distinct keys.
    pub fn is_injective(&self) -> bool {
        let keys: Vec<&Key> = self.consistent().filter_map(|c| c.key.as_ref()).collect();
        let mut unique = keys.clone();
        unique.sort_by_key(|k| k.to_bit_string());
        unique.dedup();
        unique.len() == keys.len()
    }

    /// Plain-text candidate table.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "rounds={} prior={:.3} bits  H(R_S|T)={:.3} bits  H(key|T)={:.3} bits",
            self.rounds_used, self.prior_bits, self.h_rs_bits, self.h_key_bits
        );
        let _ = writeln!(out, "{:>16}  {:>10}  {:>9}  key", "r_s", "consistent", "posterior");
        for (c, p) in self.candidates.iter().zip(&self.posterior) {
            let key = c.key.as_ref().map(Key::to_bit_string).unwrap_or_default();
            let _ = writeln!(
                out,
                "{:>16}  {:>10}  {:>9.6}  {}",
                format_rational(&c.r_s),
                c.consistent,
                p,
                if c.consistent { key } else { c.reason.clone().unwrap_or_default() }
            );
        }
        out
    }
}

/// Shannon entropy in bits of a distribution given as group sizes.
fn shannon_bits(groups: &[usize]) -> f64 {
    let total: usize = groups.iter().sum();
    if total == 0 {
        return 0.0;
    }
    if groups.iter().all(|&g| g == groups[0]) {
        return (total as f64 / groups[0] as f64).log2();
    }
    let n = total as f64;
    groups
        .iter()
        .map(|&g| {
            let p = g as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn check_cap(p_s: &Palette) -> Result<(), EntropyError> {
    if p_s.len() > MAX_SECRET_PALETTE {
        return Err(EntropyError::PaletteTooLarge(p_s.len()));
    }
    Ok(())
}

/// Enumerates every `R_S` candidate against a circuit recording.
pub fn brute_force_posterior(
    recording: &EveRecording,
    p_s: &Palette,
    palettes: &KeyPalettes,
) -> Result<PosteriorReport, EntropyError> {
    check_cap(p_s)?;
    let candidates = p_s
        .values()
        .par_iter()
        .map(|r_s| match eve_crack_with_secret(recording, r_s, palettes) {
            Ok(crack) => Candidate {
                r_s: r_s.clone(),
                consistent: true,
                key: Some(crack.key),
                reason: None,
            },
            Err(e) => Candidate {
                r_s: r_s.clone(),
                consistent: false,
                key: None,
                reason: Some(e.to_string()),
            },
        })
        .collect();
    Ok(PosteriorReport::from_candidates(
        candidates,
        recording.rounds().len(),
    ))
}

/// Enumerates every `R_S` candidate against published expander sums.
pub fn expander_posterior(
    rounds: &[XValues],
    p_s: &Palette,
    palettes: &KeyPalettes,
    modulus: Option<&Modulus>,
) -> Result<PosteriorReport, EntropyError> {
    check_cap(p_s)?;
    let candidates = p_s
        .values()
        .par_iter()
        .map(|r_s| {
            let implied = |x: &Rational| match modulus {
                None => x - r_s,
                Some(q) => {
                    let q = Rational::from_integer(q.value().clone());
                    let v = x - r_s;
                    v.clone() - (v / &q).floor() * q
                }
            };
            let key_rounds: Vec<KeyRound> = rounds
                .iter()
                .map(|x| KeyRound {
                    round_k: x.round_k,
                    r_a: implied(&x.x_a),
                    r_b: implied(&x.x_b),
                })
                .collect();
            match derive_key(&key_rounds, &palettes.a, &palettes.b) {
                Ok(key) => Candidate {
                    r_s: r_s.clone(),
                    consistent: true,
                    key: Some(key),
                    reason: None,
                },
                Err(e) => Candidate {
                    r_s: r_s.clone(),
                    consistent: false,
                    key: None,
                    reason: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(PosteriorReport::from_candidates(candidates, rounds.len()))
}

/// How the key material is exchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpansionMode {
    Circuit,
    ExpanderPlain,
    ExpanderModular(Modulus),
}

/// Which resistance values the parties draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Full,
    /// Only values `v` such that `v + r_s - c` stays in the palette for every
    /// candidate `c`, so no round ever eliminates a candidate.
    Interior,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntropyScenario {
    pub p_s: Palette,
    pub p_a: Palette,
    pub p_b: Palette,
    /// Source voltages (circuit mode only).
    pub p_u: Palette,
    pub deltas: Deltas,
    pub mode: ExpansionMode,
    pub sampling: Sampling,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub k: usize,
    pub h_rs_bits: f64,
    pub h_key_bits: f64,
    pub key_bit_length: usize,
    /// Round `k` on its own eliminated at least one candidate.
    pub edge_round: bool,
    pub true_rs_consistent: bool,
    pub injective: bool,
}

/// Indices of palette values that keep every candidate consistent.
pub fn interior_indices(palette: &Palette, p_s: &Palette, r_s: &Rational) -> Vec<usize> {
    (0..palette.len())
        .filter(|&i| {
            let v = palette.get(i).expect("index in range");
            p_s.values().iter().all(|c| palette.contains(&(v + r_s - c)))
        })
        .collect()
}

fn integer(value: &Rational) -> Result<BigInt, EntropyError> {
    if value.is_integer() {
        Ok(value.to_integer())
    } else {
        Err(EntropyError::NotAnInteger(format_rational(value)))
    }
}

/// Runs `max_rounds` rounds with a fixed shared secret and fresh round
/// secrets, recomputing Eve's posterior after each one.
pub fn entropy_vs_rounds(
    scenario: &EntropyScenario,
    max_rounds: usize,
) -> Result<Vec<EntropyPoint>, EntropyError> {
    check_cap(&scenario.p_s)?;
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
    let r_s = scenario.p_s.values()[rng.random_range(0..scenario.p_s.len())].clone();
    let palettes = KeyPalettes {
        a: scenario.p_a.clone(),
        b: scenario.p_b.clone(),
    };
    let draw_indices = |p: &Palette| -> Result<Vec<usize>, EntropyError> {
        let idx = match (scenario.sampling, &scenario.mode) {
            (Sampling::Full, _) | (_, ExpansionMode::ExpanderModular(_)) => (0..p.len()).collect(),
            (Sampling::Interior, _) => interior_indices(p, &scenario.p_s, &r_s),
        };
        if idx.is_empty() {
            return Err(EntropyError::NoInterior);
        }
        Ok(idx)
    };
    let idx_a = draw_indices(&scenario.p_a)?;
    let idx_b = draw_indices(&scenario.p_b)?;

    let mut points = Vec::with_capacity(max_rounds);
    let mut recording = EveRecording::new();
    let mut x_rounds: Vec<XValues> = Vec::new();
    let shared = match scenario.mode {
        ExpansionMode::Circuit => Some(SharedSecret {
            r_s: Resistance::new(r_s.clone()).map_err(ProtocolError::from)?,
            auth_key: AuthKey::random(&mut rng),
        }),
        _ => None,
    };

    for k in 0..max_rounds {
        let round_k = k as u64;
        let single = match (&scenario.mode, &shared) {
            (ExpansionMode::Circuit, Some(shared)) => {
                let alice =
                    draw_round_secrets_among(&scenario.p_a, &scenario.p_u, &idx_a, &mut rng)?;
                let bob = draw_round_secrets_among(&scenario.p_b, &scenario.p_u, &idx_b, &mut rng)?;
                let (_, segment) = run_round(round_k, shared, &alice, &bob, &scenario.deltas)?;
                let single = EveRecording::from_transcript(&segment).expect("fresh segment");
                for e in segment.entries() {
                    recording
                        .record(e.round_k, e.phase, e.obs.clone())
                        .expect("rounds are distinct");
                }
                brute_force_posterior(&single, &scenario.p_s, &palettes)?
            }
            _ => {
                let modulus = match &scenario.mode {
                    ExpansionMode::ExpanderModular(q) => Some(q),
                    _ => None,
                };
                let mut draw = |p: &Palette, idx: &[usize]| {
                    integer(p.get(idx[rng.random_range(0..idx.len())]).expect("index in range"))
                };
                let r_a = draw(&scenario.p_a, &idx_a)?;
                let r_b = draw(&scenario.p_b, &idx_b)?;
                let r_s_int = integer(&r_s)?;
                let x_a = expand(&r_s_int, &[r_a], modulus)?;
                let x_b = expand(&r_s_int, &[r_b], modulus)?;
                let x = XValues {
                    round_k,
                    x_a: Rational::from_integer(x_a[0].clone()),
                    x_b: Rational::from_integer(x_b[0].clone()),
                };
                x_rounds.push(x.clone());
                expander_posterior(&[x], &scenario.p_s, &palettes, modulus)?
            }
        };
        let report = match scenario.mode {
            ExpansionMode::Circuit => brute_force_posterior(&recording, &scenario.p_s, &palettes)?,
            ExpansionMode::ExpanderPlain => {
                expander_posterior(&x_rounds, &scenario.p_s, &palettes, None)?
            }
            ExpansionMode::ExpanderModular(ref q) => {
                expander_posterior(&x_rounds, &scenario.p_s, &palettes, Some(q))?
            }
        };
        let key_bit_length = report
            .consistent()
            .find(|c| c.r_s == r_s)
            .and_then(|c| c.key.as_ref())
            .map_or(0, Key::len);
        points.push(EntropyPoint {
            k: k + 1,
            h_rs_bits: report.h_rs_bits,
            h_key_bits: report.h_key_bits,
            key_bit_length,
            edge_round: single.consistent().count() < scenario.p_s.len(),
            true_rs_consistent: report.consistent().any(|c| c.r_s == r_s),
            injective: report.is_injective(),
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::Voltage;
    use crate::exact::int;
    use crate::protocol::PartySecrets;

    fn res(v: i64) -> Resistance {
        Resistance::new(int(v)).unwrap()
    }

    fn one_round(r_s: i64, r_a: i64, r_b: i64) -> EveRecording {
        let shared = SharedSecret {
            r_s: res(r_s),
            auth_key: AuthKey::new(vec![0; 16]).unwrap(),
        };
        let a = PartySecrets { r: res(r_a), u: Voltage(int(3)), r_index: 0 };
        let b = PartySecrets { r: res(r_b), u: Voltage(int(-2)), r_index: 0 };
        let (_, seg) = run_round(0, &shared, &a, &b, &Deltas::default()).unwrap();
        EveRecording::from_transcript(&seg).unwrap()
    }

    #[test]
    fn two_candidates_both_consistent() {
        let p = Palette::from_integers([1000, 2000]).unwrap();
        let pal = KeyPalettes { a: p.clone(), b: p.clone() };
        let report = brute_force_posterior(&one_round(1000, 2000, 2000), &p, &pal).unwrap();
        assert_eq!(report.h_rs_bits, 1.0);
        assert_eq!(report.h_key_bits, 1.0);
        assert_eq!(report.posterior, vec![0.5, 0.5]);
    }

    #[test]
    fn edge_leakage_eliminates_candidate() {
        let p = Palette::from_integers([1000, 2000]).unwrap();
        let pal = KeyPalettes { a: Palette::from_integers([2000]).unwrap(), b: p.clone() };
        let report = brute_force_posterior(&one_round(1000, 2000, 2000), &p, &pal).unwrap();
        assert_eq!(report.h_rs_bits, 0.0);
        assert_eq!(report.h_key_bits, 0.0);
        assert!(report.candidates[0].consistent && !report.candidates[1].consistent);
    }

    #[test]
    fn empty_recording_has_prior_entropy() {
        let p = Palette::progression(100, 100, 8).unwrap();
        let pal = KeyPalettes { a: p.clone(), b: p.clone() };
        let report = brute_force_posterior(&EveRecording::new(), &p, &pal).unwrap();
        assert_eq!(report.h_rs_bits, 3.0);
        assert_eq!(report.rounds_used, 0);
    }

    #[test]
    fn shannon_of_groups() {
        assert_eq!(shannon_bits(&[1, 1, 1, 1]), 2.0);
        assert_eq!(shannon_bits(&[4]), 0.0);
        assert_eq!(shannon_bits(&[]), 0.0);
        assert!((shannon_bits(&[2, 1, 1]) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn modular_trajectory_is_flat() {
        let q = Modulus::new(16.into()).unwrap();
        let z = Palette::progression(0, 1, 16).unwrap();
        let scenario = EntropyScenario {
            p_s: z.clone(),
            p_a: z.clone(),
            p_b: z.clone(),
            p_u: Palette::from_integers([0]).unwrap(),
            deltas: Deltas::default(),
            mode: ExpansionMode::ExpanderModular(q),
            sampling: Sampling::Full,
            seed: 5,
        };
        let points = entropy_vs_rounds(&scenario, 10).unwrap();
        for (i, p) in points.iter().enumerate() {
            assert_eq!(p.h_rs_bits, 4.0);
            assert_eq!(p.h_key_bits, 4.0);
            assert_eq!(p.key_bit_length, 8 * (i + 1));
        }
    }

    #[test]
    fn single_secret_means_no_security() {
        let scenario = EntropyScenario {
            p_s: Palette::from_integers([500]).unwrap(),
            p_a: Palette::progression(100, 100, 8).unwrap(),
            p_b: Palette::progression(100, 100, 8).unwrap(),
            p_u: Palette::from_integers([1, 2]).unwrap(),
            deltas: Deltas::default(),
            mode: ExpansionMode::Circuit,
            sampling: Sampling::Full,
            seed: 1,
        };
        for p in entropy_vs_rounds(&scenario, 4).unwrap() {
            assert_eq!((p.h_rs_bits, p.h_key_bits), (0.0, 0.0));
        }
    }
}
