//! Honest parties: secret selection, the three-phase measurement round,
//! extraction of the partner's secrets, and key derivation.

use std::fmt;

use num_traits::Signed;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{
    differential_slope, noisy_slope, solve_loop, CircuitError, LineObservation, LoopParams,
    NoisyObservation, Resistance, Voltage,
};
use crate::exact::{format_rational, serde_rational_vec, to_f64, Rational};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error("palette must contain at least one value")]
    EmptyPalette,
    #[error("palette contains duplicate value {0}")]
    DuplicatePaletteValue(String),
    #[error("perturbation delta for {0} must be nonzero")]
    ZeroDelta(Party),
    #[error("extracted resistance is not positive: slope {slope} <= shared resistance {r_s}")]
    NegativeResistance { slope: String, r_s: String },
    #[error("{party} cross-check failed in round {round_k}: {phase} observation inconsistent with extraction")]
    CrossCheckFailed {
        party: Party,
        round_k: u64,
        phase: Phase,
    },
    #[error("value {value} is not in the public palette")]
    ValueNotInPalette { value: String },
    #[error("authentication key must be at least {min} bytes, got {got}")]
    AuthKeyTooShort { min: usize, got: usize },
    #[error("transcript entry ({round_k}, {phase}) out of order")]
    TranscriptOrder { round_k: u64, phase: Phase },
    #[error("party is not in the expected state: {0}")]
    State(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Party {
    Alice,
    Bob,
}

impl Party {
    pub fn code(self) -> u8 {
        match self {
            Party::Alice => 0,
            Party::Bob => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Party::Alice),
            1 => Some(Party::Bob),
            _ => None,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::Alice => "Alice",
            Party::Bob => "Bob",
        })
    }
}

/// Measurement phase within a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Baseline,
    AlicePerturb,
    BobPerturb,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Baseline, Phase::AlicePerturb, Phase::BobPerturb];

    pub fn code(self) -> u8 {
        match self {
            Phase::Baseline => 0,
            Phase::AlicePerturb => 1,
            Phase::BobPerturb => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Phase::ALL.get(code as usize).copied()
    }

    pub fn next(self) -> Option<Phase> {
        Phase::from_code(self.code() + 1)
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::Baseline => "BASELINE",
            Phase::AlicePerturb => "ALICE_PERTURB",
            Phase::BobPerturb => "BOB_PERTURB",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Phase::ALL.into_iter().find(|p| p.label() == label)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Public, finite, sorted set of admissible secret values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PaletteValues", into = "PaletteValues")]
pub struct Palette {
    values: Vec<Rational>,
}

#[derive(Serialize, Deserialize)]
#[serde(transparent)]
struct PaletteValues(#[serde(with = "serde_rational_vec")] Vec<Rational>);

impl TryFrom<PaletteValues> for Palette {
    type Error = ProtocolError;

    fn try_from(v: PaletteValues) -> Result<Self, Self::Error> {
        Palette::new(v.0)
    }
}

impl From<Palette> for PaletteValues {
    fn from(p: Palette) -> Self {
        PaletteValues(p.values)
    }
}

impl Palette {
    /// Sorts the values; duplicates are rejected.
    pub fn new(mut values: Vec<Rational>) -> Result<Self, ProtocolError> {
        if values.is_empty() {
            return Err(ProtocolError::EmptyPalette);
        }
        values.sort();
        if let Some(w) = values.windows(2).find(|w| w[0] == w[1]) {
            return Err(ProtocolError::DuplicatePaletteValue(format_rational(&w[0])));
        }
        Ok(Self { values })
    }

    pub fn from_integers<I: IntoIterator<Item = i64>>(values: I) -> Result<Self, ProtocolError> {
        Self::new(values.into_iter().map(crate::exact::int).collect())
    }

    /// Arithmetic progression `start, start + step, ...` with `count` elements.
    pub fn progression(start: i64, step: i64, count: usize) -> Result<Self, ProtocolError> {
        Self::from_integers((0..count as i64).map(|i| start + i * step))
    }

    pub fn values(&self) -> &[Rational] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Rational> {
        self.values.get(index)
    }

    /// `ceil(log2(len))`; zero for a single-value palette.
    pub fn bit_width(&self) -> u32 {
        let n = self.values.len();
        if n <= 1 {
            0
        } else {
            usize::BITS - (n - 1).leading_zeros()
        }
    }

    pub fn index_of(&self, value: &Rational) -> Option<usize> {
        self.values.binary_search(value).ok()
    }

    pub fn contains(&self, value: &Rational) -> bool {
        self.index_of(value).is_some()
    }

    /// Index of the value closest to `x` (ties go to the lower index).
    pub fn nearest(&self, x: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, v) in self.values.iter().enumerate() {
            let d = (to_f64(v) - x).abs();
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        best
    }

    pub fn spread(&self) -> Rational {
        self.values[self.values.len() - 1].clone() - &self.values[0]
    }

    pub fn all_positive(&self) -> bool {
        self.values.iter().all(|v| v.is_positive())
    }
}

/// Minimum authentication key length in bytes.
pub const MIN_AUTH_KEY_LEN: usize = 16;

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AuthKey(Vec<u8>);

impl AuthKey {
    pub fn new(bytes: Vec<u8>) -> Result<Self, ProtocolError> {
        if bytes.len() < MIN_AUTH_KEY_LEN {
            return Err(ProtocolError::AuthKeyTooShort {
                min: MIN_AUTH_KEY_LEN,
                got: bytes.len(),
            });
        }
        Ok(Self(bytes))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = vec![0u8; 32];
        rng.fill(&mut bytes[..]);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for AuthKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AuthKey({} bytes)", self.0.len())
    }
}

impl TryFrom<String> for AuthKey {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let bytes = hex::decode(&s).map_err(|e| e.to_string())?;
        AuthKey::new(bytes).map_err(|e| e.to_string())
    }
}

impl From<AuthKey> for String {
    fn from(k: AuthKey) -> Self {
        hex::encode(k.0)
    }
}

/// What Alice and Bob share before the first round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedSecret {
    pub r_s: Resistance,
    pub auth_key: AuthKey,
}

/// One party's private draw for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartySecrets {
    pub r: Resistance,
    pub u: Voltage,
    pub r_index: usize,
}

/// Uniform, independent draw of a resistance and a voltage.
pub fn draw_round_secrets<R: Rng + ?Sized>(
    palette_r: &Palette,
    palette_u: &Palette,
    rng: &mut R,
) -> Result<PartySecrets, ProtocolError> {
    let all: Vec<usize> = (0..palette_r.len()).collect();
    draw_round_secrets_among(palette_r, palette_u, &all, rng)
}

/// Draws the resistance uniformly from the listed palette indices only.
pub fn draw_round_secrets_among<R: Rng + ?Sized>(
    palette_r: &Palette,
    palette_u: &Palette,
    indices: &[usize],
    rng: &mut R,
) -> Result<PartySecrets, ProtocolError> {
    if indices.is_empty() || indices.iter().any(|&i| i >= palette_r.len()) {
        return Err(ProtocolError::State("resistance indices outside palette"));
    }
    let r_index = indices[rng.random_range(0..indices.len())];
    let u_index = rng.random_range(0..palette_u.len());
    Ok(PartySecrets {
        r: Resistance::new(palette_r.values[r_index].clone())?,
        u: Voltage(palette_u.values[u_index].clone()),
        r_index,
    })
}

/// Public perturbation amplitudes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deltas {
    pub alice: Voltage,
    pub bob: Voltage,
}

impl Default for Deltas {
    fn default() -> Self {
        Self {
            alice: Voltage(crate::exact::int(1)),
            bob: Voltage(crate::exact::int(1)),
        }
    }
}

impl Deltas {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.alice.is_zero() {
            return Err(ProtocolError::ZeroDelta(Party::Alice));
        }
        if self.bob.is_zero() {
            return Err(ProtocolError::ZeroDelta(Party::Bob));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub round_k: u64,
    pub phase: Phase,
    pub obs: LineObservation,
}

/// Public, phase-labelled record of line observations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends, enforcing phase order within a round and increasing rounds.
    pub fn push(&mut self, entry: TranscriptEntry) -> Result<(), ProtocolError> {
        let ok = match self.entries.last() {
            None => entry.phase == Phase::Baseline,
            Some(last) if entry.round_k == last.round_k => last.phase.next() == Some(entry.phase),
            Some(last) => entry.round_k > last.round_k && entry.phase == Phase::Baseline,
        };
        if !ok {
            return Err(ProtocolError::TranscriptOrder {
                round_k: entry.round_k,
                phase: entry.phase,
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn record(
        &mut self,
        round_k: u64,
        phase: Phase,
        obs: LineObservation,
    ) -> Result<(), ProtocolError> {
        self.push(TranscriptEntry {
            round_k,
            phase,
            obs,
        })
    }

    pub fn extend_from(&mut self, other: &Transcript) -> Result<(), ProtocolError> {
        for e in &other.entries {
            self.push(e.clone())?;
        }
        Ok(())
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rounds(&self) -> Vec<u64> {
        let mut rounds: Vec<u64> = self.entries.iter().map(|e| e.round_k).collect();
        rounds.dedup();
        rounds
    }

    pub fn get(&self, round_k: u64, phase: Phase) -> Option<&LineObservation> {
        self.entries
            .iter()
            .find(|e| e.round_k == round_k && e.phase == phase)
            .map(|e| &e.obs)
    }

    /// Only rounds strictly below `round_limit`.
    pub fn prefix_rounds(&self, round_limit: u64) -> Transcript {
        Transcript {
            entries: self
                .entries
                .iter()
                .filter(|e| e.round_k < round_limit)
                .cloned()
                .collect(),
        }
    }
}

/// A party's view of the partner's secrets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartnerView {
    pub r: Resistance,
    pub u: Voltage,
}

/// Everything that happened in one honest round, public and private.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_k: u64,
    pub baseline: LineObservation,
    pub alice_perturbed: LineObservation,
    pub bob_perturbed: LineObservation,
    pub deltas: Deltas,
    pub alice: PartySecrets,
    pub bob: PartySecrets,
    /// Bob's secrets as extracted by Alice.
    pub alice_view: PartnerView,
    /// Alice's secrets as extracted by Bob.
    pub bob_view: PartnerView,
}

impl RoundRecord {
    pub fn alice_key_round(&self) -> KeyRound {
        KeyRound {
            round_k: self.round_k,
            r_a: self.alice.r.ohms().clone(),
            r_b: self.alice_view.r.ohms().clone(),
        }
    }

    pub fn bob_key_round(&self) -> KeyRound {
        KeyRound {
            round_k: self.round_k,
            r_a: self.bob_view.r.ohms().clone(),
            r_b: self.bob.r.ohms().clone(),
        }
    }

    pub fn truth_key_round(&self) -> KeyRound {
        KeyRound {
            round_k: self.round_k,
            r_a: self.alice.r.ohms().clone(),
            r_b: self.bob.r.ohms().clone(),
        }
    }

    pub fn params(&self, r_s: &Resistance) -> LoopParams {
        LoopParams {
            r_s: r_s.clone(),
            r_a: self.alice.r.clone(),
            r_b: self.bob.r.clone(),
            u_a: self.alice.u.clone(),
            u_b: self.bob.u.clone(),
        }
    }
}

fn extract_partner(
    r_s: &Resistance,
    baseline: &LineObservation,
    own_perturbed: &LineObservation,
) -> Result<Resistance, ProtocolError> {
    let slope = differential_slope(baseline, own_perturbed)?;
    if slope <= *r_s.ohms() {
        return Err(ProtocolError::NegativeResistance {
            slope: format_rational(&slope),
            r_s: format_rational(r_s.ohms()),
        });
    }
    Ok(Resistance::new(slope - r_s.ohms())?)
}

/// Alice recovers `(R_B, U_B)` from the baseline and her own perturbation.
pub fn alice_extract(
    r_s: &Resistance,
    baseline: &LineObservation,
    alice_perturbed: &LineObservation,
) -> Result<PartnerView, ProtocolError> {
    let r_b = extract_partner(r_s, baseline, alice_perturbed)?;
    let u_b = baseline.u() - (r_s.ohms() + r_b.ohms()) * baseline.i();
    Ok(PartnerView {
        r: r_b,
        u: Voltage(u_b),
    })
}

/// Bob recovers `(R_A, U_A)` from the baseline and his own perturbation.
pub fn bob_extract(
    r_s: &Resistance,
    baseline: &LineObservation,
    bob_perturbed: &LineObservation,
) -> Result<PartnerView, ProtocolError> {
    let r_a = extract_partner(r_s, baseline, bob_perturbed)?;
    let u_a = baseline.u() + (r_s.ohms() + r_a.ohms()) * baseline.i();
    Ok(PartnerView {
        r: r_a,
        u: Voltage(u_a),
    })
}

/// Re-solves the loop from a party's own secrets plus its extraction and
/// checks every phase of the round against what was observed.
pub fn cross_check(
    party: Party,
    round_k: u64,
    r_s: &Resistance,
    own: &PartySecrets,
    partner: &PartnerView,
    deltas: &Deltas,
    observed: [&LineObservation; 3],
) -> Result<(), ProtocolError> {
    let params = match party {
        Party::Alice => LoopParams {
            r_s: r_s.clone(),
            r_a: own.r.clone(),
            r_b: partner.r.clone(),
            u_a: own.u.clone(),
            u_b: partner.u.clone(),
        },
        Party::Bob => LoopParams {
            r_s: r_s.clone(),
            r_a: partner.r.clone(),
            r_b: own.r.clone(),
            u_a: partner.u.clone(),
            u_b: own.u.clone(),
        },
    };
    for (phase, seen) in Phase::ALL.into_iter().zip(observed) {
        let expected = solve_loop(&phase_params(&params, deltas, phase));
        if expected != *seen {
            return Err(ProtocolError::CrossCheckFailed {
                party,
                round_k,
                phase,
            });
        }
    }
    Ok(())
}

/// Source settings on the loop during `phase`.
pub fn phase_params(params: &LoopParams, deltas: &Deltas, phase: Phase) -> LoopParams {
    match phase {
        Phase::Baseline => params.clone(),
        Phase::AlicePerturb => {
            params.with_sources(params.u_a.volts() + deltas.alice.volts(), params.u_b.0.clone())
        }
        Phase::BobPerturb => {
            params.with_sources(params.u_a.0.clone(), params.u_b.volts() + deltas.bob.volts())
        }
    }
}

/// One complete honest round.
///
/// Each source is restored before the other party perturbs, so both
/// extractions share the same baseline.
pub fn run_round(
    round_k: u64,
    shared: &SharedSecret,
    alice: &PartySecrets,
    bob: &PartySecrets,
    deltas: &Deltas,
) -> Result<(RoundRecord, Transcript), ProtocolError> {
    deltas.validate()?;
    let params = LoopParams {
        r_s: shared.r_s.clone(),
        r_a: alice.r.clone(),
        r_b: bob.r.clone(),
        u_a: alice.u.clone(),
        u_b: bob.u.clone(),
    };
    let mut segment = Transcript::new();
    for phase in Phase::ALL {
        segment.record(round_k, phase, solve_loop(&phase_params(&params, deltas, phase)))?;
    }
    let [baseline, alice_perturbed, bob_perturbed] =
        [0, 1, 2].map(|i| segment.entries[i].obs.clone());

    let alice_view = alice_extract(&shared.r_s, &baseline, &alice_perturbed)?;
    let bob_view = bob_extract(&shared.r_s, &baseline, &bob_perturbed)?;
    let observed = [&baseline, &alice_perturbed, &bob_perturbed];
    cross_check(Party::Alice, round_k, &shared.r_s, alice, &alice_view, deltas, observed)?;
    cross_check(Party::Bob, round_k, &shared.r_s, bob, &bob_view, deltas, observed)?;

    let record = RoundRecord {
        round_k,
        baseline,
        alice_perturbed,
        bob_perturbed,
        deltas: deltas.clone(),
        alice: alice.clone(),
        bob: bob.clone(),
        alice_view,
        bob_view,
    };
    Ok((record, segment))
}

/// Resistances that feed one round of key material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRound {
    pub round_k: u64,
    pub r_a: Rational,
    pub r_b: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyProvenance {
    pub round_k: u64,
    pub r_a_index: usize,
    pub r_b_index: usize,
}

/// Key bits plus the palette indices they encode.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Key {
    #[serde(with = "bit_string")]
    pub bits: Vec<bool>,
    pub provenance: Vec<KeyProvenance>,
}

impl Key {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

mod bit_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let text: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        s.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        String::deserialize(d)?
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(serde::de::Error::custom(format!("bad key bit {other:?}"))),
            })
            .collect()
    }
}

fn push_index(bits: &mut Vec<bool>, index: usize, width: u32) {
    for shift in (0..width).rev() {
        bits.push((index >> shift) & 1 == 1);
    }
}

/// Concatenates, per round, the big-endian fixed-width palette index of `R_A`
/// and then of `R_B`. Voltages never enter the key.
pub fn derive_key(
    rounds: &[KeyRound],
    palette_a: &Palette,
    palette_b: &Palette,
) -> Result<Key, ProtocolError> {
    let mut key = Key::default();
    for round in rounds {
        let lookup = |palette: &Palette, value: &Rational| {
            palette
                .index_of(value)
                .ok_or_else(|| ProtocolError::ValueNotInPalette {
                    value: format_rational(value),
                })
        };
        let r_a_index = lookup(palette_a, &round.r_a)?;
        let r_b_index = lookup(palette_b, &round.r_b)?;
        push_index(&mut key.bits, r_a_index, palette_a.bit_width());
        push_index(&mut key.bits, r_b_index, palette_b.bit_width());
        key.provenance.push(KeyProvenance {
            round_k: round.round_k,
            r_a_index,
            r_b_index,
        });
    }
    Ok(key)
}

/// Extraction from noisy floating-point observations, snapped to the nearest
/// palette entries. Returns `(resistance index, voltage index)`.
pub fn extract_nearest(
    party: Party,
    r_s: f64,
    baseline: &NoisyObservation,
    own_perturbed: &NoisyObservation,
    palette_r: &Palette,
    palette_u: &Palette,
) -> Option<(usize, usize)> {
    let slope = noisy_slope(baseline, own_perturbed)?;
    let r = slope - r_s;
    let u = match party {
        Party::Alice => baseline.u_c - slope * baseline.i_c,
        Party::Bob => baseline.u_c + slope * baseline.i_c,
    };
    Some((palette_r.nearest(r), palette_u.nearest(u)))
}

/// Honest party state machine driven phase by phase over a transport.
#[derive(Debug, Clone)]
pub struct PartyMachine {
    role: Party,
    r_s: Resistance,
    deltas: Deltas,
    snap: Option<(Palette, Palette)>,
    current: Option<OpenRound>,
    completed: Vec<CompletedRound>,
}

#[derive(Debug, Clone)]
struct OpenRound {
    round_k: u64,
    secrets: PartySecrets,
    observed: Vec<LineObservation>,
}

/// A party's private result for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletedRound {
    pub round_k: u64,
    pub own: PartySecrets,
    pub partner: PartnerView,
}

impl PartyMachine {
    pub fn new(role: Party, r_s: Resistance, deltas: Deltas) -> Result<Self, ProtocolError> {
        deltas.validate()?;
        Ok(Self {
            role,
            r_s,
            deltas,
            snap: None,
            current: None,
            completed: Vec::new(),
        })
    }

    /// Tolerates noisy samples: the partner's resistance and voltage are
    /// rounded to the nearest entries of these palettes and the exact
    /// cross-check is skipped.
    pub fn with_snapping(mut self, partner_r: Palette, partner_u: Palette) -> Self {
        self.snap = Some((partner_r, partner_u));
        self
    }

    pub fn role(&self) -> Party {
        self.role
    }

    pub fn begin_round(&mut self, round_k: u64, secrets: PartySecrets) -> Result<(), ProtocolError> {
        if self.current.is_some() {
            return Err(ProtocolError::State("previous round still open"));
        }
        if let Some(last) = self.completed.last() {
            if round_k <= last.round_k {
                return Err(ProtocolError::State("round numbers must increase"));
            }
        }
        self.current = Some(OpenRound {
            round_k,
            secrets,
            observed: Vec::with_capacity(3),
        });
        Ok(())
    }

    /// The resistor and source this party connects during `phase`.
    pub fn source_for(&self, phase: Phase) -> Result<(Resistance, Voltage), ProtocolError> {
        let open = self.current.as_ref().ok_or(ProtocolError::State("no open round"))?;
        let mut u = open.secrets.u.0.clone();
        match (self.role, phase) {
            (Party::Alice, Phase::AlicePerturb) => u += self.deltas.alice.volts(),
            (Party::Bob, Phase::BobPerturb) => u += self.deltas.bob.volts(),
            _ => {}
        }
        Ok((open.secrets.r.clone(), Voltage(u)))
    }

    /// Records the line sample measured at this party's end.
    pub fn observe(
        &mut self,
        round_k: u64,
        phase: Phase,
        obs: LineObservation,
    ) -> Result<(), ProtocolError> {
        let open = self.current.as_mut().ok_or(ProtocolError::State("no open round"))?;
        if round_k != open.round_k || phase.code() as usize != open.observed.len() {
            return Err(ProtocolError::TranscriptOrder { round_k, phase });
        }
        open.observed.push(obs);
        Ok(())
    }

    pub fn finish_round(&mut self) -> Result<CompletedRound, ProtocolError> {
        let open = self.current.take().ok_or(ProtocolError::State("no open round"))?;
        if open.observed.len() != 3 {
            return Err(ProtocolError::State("round has fewer than three observations"));
        }
        let [baseline, alice_perturbed, bob_perturbed] =
            [0, 1, 2].map(|i| &open.observed[i]);
        let own_perturbed = match self.role {
            Party::Alice => alice_perturbed,
            Party::Bob => bob_perturbed,
        };
        let partner = match &self.snap {
            Some((palette_r, palette_u)) => {
                let (r, u) = extract_nearest(
                    self.role,
                    to_f64(self.r_s.ohms()),
                    &baseline.into(),
                    &own_perturbed.into(),
                    palette_r,
                    palette_u,
                )
                .ok_or(ProtocolError::ZeroDelta(self.role))?;
                PartnerView {
                    r: Resistance::new(palette_r.values[r].clone())?,
                    u: Voltage(palette_u.values[u].clone()),
                }
            }
            None => {
                let partner = match self.role {
                    Party::Alice => alice_extract(&self.r_s, baseline, alice_perturbed)?,
                    Party::Bob => bob_extract(&self.r_s, baseline, bob_perturbed)?,
                };
                cross_check(
                    self.role,
                    open.round_k,
                    &self.r_s,
                    &open.secrets,
                    &partner,
                    &self.deltas,
                    [baseline, alice_perturbed, bob_perturbed],
                )?;
                partner
            }
        };
        let done = CompletedRound {
            round_k: open.round_k,
            own: open.secrets,
            partner,
        };
        self.completed.push(done.clone());
        Ok(done)
    }

    pub fn completed(&self) -> &[CompletedRound] {
        &self.completed
    }

    pub fn key(&self, palette_a: &Palette, palette_b: &Palette) -> Result<Key, ProtocolError> {
        let rounds: Vec<KeyRound> = self
            .completed
            .iter()
            .map(|c| {
                let (r_a, r_b) = match self.role {
                    Party::Alice => (c.own.r.ohms().clone(), c.partner.r.ohms().clone()),
                    Party::Bob => (c.partner.r.ohms().clone(), c.own.r.ohms().clone()),
                };
                KeyRound {
                    round_k: c.round_k,
                    r_a,
                    r_b,
                }
            })
            .collect();
        derive_key(&rounds, palette_a, palette_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{int, ratio};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn res(v: i64) -> Resistance {
        Resistance::new(int(v)).unwrap()
    }

    fn secrets(r: i64, u: i64, idx: usize) -> PartySecrets {
        PartySecrets {
            r: res(r),
            u: Voltage(int(u)),
            r_index: idx,
        }
    }

    fn shared(r_s: i64) -> SharedSecret {
        SharedSecret {
            r_s: res(r_s),
            auth_key: AuthKey::new(vec![7; 16]).unwrap(),
        }
    }

    fn e1_round() -> (RoundRecord, Transcript) {
        run_round(
            0,
            &shared(1000),
            &secrets(2000, 5, 1),
            &secrets(3000, 1, 2),
            &Deltas::default(),
        )
        .unwrap()
    }

    #[test]
    fn palette_rules() {
        let p = Palette::from_integers([3000, 1000, 2000]).unwrap();
        assert_eq!(p.values(), &[int(1000), int(2000), int(3000)]);
        assert_eq!(p.bit_width(), 2);
        assert_eq!(Palette::from_integers([5]).unwrap().bit_width(), 0);
        assert_eq!(Palette::from_integers([1, 2]).unwrap().bit_width(), 1);
        assert_eq!(Palette::progression(0, 1, 64).unwrap().bit_width(), 6);
        assert_eq!(Palette::progression(0, 1, 65).unwrap().bit_width(), 7);
        assert!(matches!(
            Palette::from_integers([1, 1]),
            Err(ProtocolError::DuplicatePaletteValue(_))
        ));
        assert_eq!(Palette::new(vec![]), Err(ProtocolError::EmptyPalette));
        assert_eq!(p.nearest(2499.0), 1);
        assert_eq!(p.nearest(-1e9), 0);
    }

    #[test]
    fn draws_are_members_and_deterministic() {
        let pr = Palette::from_integers([1000, 2000]).unwrap();
        let pu = Palette::from_integers([1, 5]).unwrap();
        let a = draw_round_secrets(&pr, &pu, &mut ChaCha20Rng::seed_from_u64(11)).unwrap();
        let b = draw_round_secrets(&pr, &pu, &mut ChaCha20Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert!(pr.contains(a.r.ohms()) && pu.contains(a.u.volts()));
        assert_eq!(pr.get(a.r_index), Some(a.r.ohms()));
    }

    #[test]
    fn draws_are_uniform() {
        // Binomial(n, 1/4): 5 sigma = 5 * sqrt(n p (1-p)).
        let pr = Palette::from_integers([1, 2, 3, 4]).unwrap();
        let pu = Palette::from_integers([0]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[draw_round_secrets(&pr, &pu, &mut rng).unwrap().r_index] += 1;
        }
        let bound = 5.0 * (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() <= bound, "{counts:?}");
        }
    }

    #[test]
    fn e1_round_extracts_truth() {
        let (rec, seg) = e1_round();
        assert_eq!(rec.alice_view, PartnerView { r: res(3000), u: Voltage(int(1)) });
        assert_eq!(rec.bob_view, PartnerView { r: res(2000), u: Voltage(int(5)) });
        assert_eq!(seg.len(), 3);
        assert_eq!(seg.entries()[0].obs, LineObservation::new(ratio(23, 7), ratio(1, 1750)));
    }

    #[test]
    fn extraction_formulas() {
        let (rec, _) = e1_round();
        let v = alice_extract(&res(1000), &rec.baseline, &rec.alice_perturbed).unwrap();
        assert_eq!((v.r, v.u), (res(3000), Voltage(int(1))));
        let v = bob_extract(&res(1000), &rec.baseline, &rec.bob_perturbed).unwrap();
        assert_eq!((v.r, v.u), (res(2000), Voltage(int(5))));
        assert!(matches!(
            alice_extract(&res(4000), &rec.baseline, &rec.alice_perturbed),
            Err(ProtocolError::NegativeResistance { .. })
        ));
    }

    #[test]
    fn equal_voltages_still_extract() {
        let (rec, seg) = run_round(
            0,
            &shared(1000),
            &secrets(2000, 3, 0),
            &secrets(3000, 3, 0),
            &Deltas::default(),
        )
        .unwrap();
        assert!(seg.entries()[0].obs.i_c.is_zero());
        assert_eq!(rec.alice_view.u, Voltage(int(3)));
        assert_eq!(rec.bob_view.r, res(2000));
    }

    #[test]
    fn zero_delta_rejected() {
        let deltas = Deltas {
            alice: Voltage(int(0)),
            bob: Voltage(int(1)),
        };
        let err = run_round(0, &shared(1000), &secrets(2000, 5, 0), &secrets(3000, 1, 0), &deltas);
        assert_eq!(err.unwrap_err(), ProtocolError::ZeroDelta(Party::Alice));
    }

    #[test]
    fn swapped_phases_are_caught_by_cross_check() {
        let (rec, _) = e1_round();
        let wrong = bob_extract(&res(1000), &rec.baseline, &rec.alice_perturbed).unwrap();
        assert_eq!(wrong.r, res(3000));
        let err = cross_check(
            Party::Bob,
            0,
            &res(1000),
            &rec.bob,
            &wrong,
            &rec.deltas,
            [&rec.baseline, &rec.alice_perturbed, &rec.bob_perturbed],
        );
        assert!(matches!(err, Err(ProtocolError::CrossCheckFailed { .. })));
    }

    #[test]
    fn key_encoding() {
        let p = Palette::from_integers([1000, 2000, 3000, 4000]).unwrap();
        let key = derive_key(
            &[KeyRound { round_k: 0, r_a: int(2000), r_b: int(3000) }],
            &p,
            &p,
        )
        .unwrap();
        assert_eq!(key.to_bit_string(), "0110");
        assert!(derive_key(&[], &p, &p).unwrap().is_empty());
        assert!(matches!(
            derive_key(&[KeyRound { round_k: 0, r_a: int(2500), r_b: int(3000) }], &p, &p),
            Err(ProtocolError::ValueNotInPalette { .. })
        ));
        let json = serde_json::to_string(&key).unwrap();
        assert_eq!(serde_json::from_str::<Key>(&json).unwrap(), key);
    }

    #[test]
    fn transcript_ordering() {
        let obs = LineObservation::new(int(0), int(0));
        let mut t = Transcript::new();
        assert!(t.record(0, Phase::AlicePerturb, obs.clone()).is_err());
        t.record(0, Phase::Baseline, obs.clone()).unwrap();
        assert!(t.record(0, Phase::BobPerturb, obs.clone()).is_err());
        t.record(0, Phase::AlicePerturb, obs.clone()).unwrap();
        t.record(2, Phase::Baseline, obs.clone()).unwrap();
        assert!(t.record(1, Phase::Baseline, obs).is_err());
        assert_eq!(t.rounds(), vec![0, 2]);
    }

    #[test]
    fn machines_agree_with_run_round() {
        let r_s = res(1000);
        let mut alice = PartyMachine::new(Party::Alice, r_s.clone(), Deltas::default()).unwrap();
        let mut bob = PartyMachine::new(Party::Bob, r_s.clone(), Deltas::default()).unwrap();
        alice.begin_round(0, secrets(2000, 5, 1)).unwrap();
        bob.begin_round(0, secrets(3000, 1, 2)).unwrap();
        for phase in Phase::ALL {
            let (r_a, u_a) = alice.source_for(phase).unwrap();
            let (r_b, u_b) = bob.source_for(phase).unwrap();
            let obs = solve_loop(&LoopParams { r_s: r_s.clone(), r_a, r_b, u_a, u_b });
            alice.observe(0, phase, obs.clone()).unwrap();
            bob.observe(0, phase, obs).unwrap();
        }
        let a = alice.finish_round().unwrap();
        let b = bob.finish_round().unwrap();
        let (rec, _) = e1_round();
        assert_eq!(a.partner, rec.alice_view);
        assert_eq!(b.partner, rec.bob_view);
        let p = Palette::from_integers([1000, 2000, 3000, 4000]).unwrap();
        assert_eq!(alice.key(&p, &p).unwrap(), bob.key(&p, &p).unwrap());
        assert!(alice.begin_round(0, secrets(2000, 5, 1)).is_err());
    }

    #[test]
    fn auth_key_length() {
        assert!(AuthKey::new(vec![0; 15]).is_err());
        assert!(AuthKey::new(vec![]).is_err());
        assert!(AuthKey::new(vec![0; 16]).is_ok());
    }
}
