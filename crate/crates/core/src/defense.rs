//! Current injection and the authenticated end-to-end comparison that
//! detects it.
//!
//! Eve drives a current into the single wire node. With an ideal wire both
//! ends see the same voltage, so the only cable model needed is "both ends
//! agree": Alice and Bob exchange authenticated reports of what they measured
//! and raise an alarm on any difference. The defense holds exactly as long as
//! the authentication key does.

use std::collections::BTreeSet;

use hmac::{Hmac, KeyInit, Mac};
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Sha256, Sha512};
use thiserror::Error;

use crate::circuit::{Current, LineObservation, LoopParams, Voltage};
use crate::exact::Rational;
use crate::harness::wire::report_body;
use crate::protocol::{
    alice_extract, bob_extract, phase_params, AuthKey, Deltas, Party, PartnerView, PartySecrets,
    Phase, ProtocolError, SharedSecret,
};

/// Authentication tag length in bytes.
pub const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DefenseError {
    #[error("reports are for different rounds or phases: ({0}, {1}) vs ({2}, {3})")]
    RoundPhaseMismatch(u64, Phase, u64, Phase),
    #[error("expected one report from each party")]
    PartyMismatch,
    #[error("injection current must be nonzero")]
    ZeroInjection,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Keyed hash behind the report tags; output truncated to [`TAG_LEN`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacAlgorithm {
    #[default]
    HmacSha256,
    HmacSha512,
}

impl MacAlgorithm {
    pub fn tag(self, key: &AuthKey, message: &[u8]) -> [u8; TAG_LEN] {
        fn run<M: Mac + KeyInit>(key: &[u8], message: &[u8]) -> [u8; TAG_LEN] {
            let mut mac = <M as KeyInit>::new_from_slice(key).expect("HMAC accepts any key length");
            mac.update(message);
            let full = mac.finalize().into_bytes();
            let mut tag = [0u8; TAG_LEN];
            tag.copy_from_slice(&full[..TAG_LEN]);
            tag
        }
        match self {
            MacAlgorithm::HmacSha256 => run::<Hmac<Sha256>>(key.as_bytes(), message),
            MacAlgorithm::HmacSha512 => run::<Hmac<Sha512>>(key.as_bytes(), message),
        }
    }

    /// Constant-time check of a truncated tag.
    pub fn verify(self, key: &AuthKey, message: &[u8], tag: &[u8; TAG_LEN]) -> bool {
        fn run<M: Mac + KeyInit>(key: &[u8], message: &[u8], tag: &[u8]) -> bool {
            let mut mac = <M as KeyInit>::new_from_slice(key).expect("HMAC accepts any key length");
            mac.update(message);
            mac.verify_truncated_left(tag).is_ok()
        }
        match self {
            MacAlgorithm::HmacSha256 => run::<Hmac<Sha256>>(key.as_bytes(), message, tag),
            MacAlgorithm::HmacSha512 => run::<Hmac<Sha512>>(key.as_bytes(), message, tag),
        }
    }
}

/// What one endpoint measured, authenticated for its partner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointReport {
    pub party: Party,
    pub round_k: u64,
    pub phase: Phase,
    pub u_end: Voltage,
    pub i_end: Current,
    #[serde(with = "hex_tag")]
    pub auth_tag: [u8; TAG_LEN],
}

mod hex_tag {
    use super::TAG_LEN;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(tag: &[u8; TAG_LEN], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(tag))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; TAG_LEN], D::Error> {
        let bytes = hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("tag must be 16 bytes"))
    }
}

pub fn make_report_with(
    algorithm: MacAlgorithm,
    party: Party,
    round_k: u64,
    phase: Phase,
    obs: &LineObservation,
    key: &AuthKey,
) -> EndpointReport {
    let mut report = EndpointReport {
        party,
        round_k,
        phase,
        u_end: obs.u_c.clone(),
        i_end: obs.i_c.clone(),
        auth_tag: [0; TAG_LEN],
    };
    report.auth_tag = algorithm.tag(key, &report_body(&report));
    report
}

/// Report tagged with the default keyed hash.
pub fn make_report(
    party: Party,
    round_k: u64,
    phase: Phase,
    obs: &LineObservation,
    key: &AuthKey,
) -> EndpointReport {
    make_report_with(MacAlgorithm::default(), party, round_k, phase, obs, key)
}

pub fn verify_report_with(algorithm: MacAlgorithm, report: &EndpointReport, key: &AuthKey) -> bool {
    algorithm.verify(key, &report_body(report), &report.auth_tag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlarmReason {
    CurrentMismatch,
    VoltageMismatch,
    BadTag,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefenseVerdict {
    pub round_k: u64,
    pub phase: Phase,
    pub alarm: bool,
    pub reason: AlarmReason,
}

pub fn verify_round_with(
    algorithm: MacAlgorithm,
    alice: &EndpointReport,
    bob: &EndpointReport,
    key: &AuthKey,
    tolerance: &Rational,
) -> Result<DefenseVerdict, DefenseError> {
    if (alice.round_k, alice.phase) != (bob.round_k, bob.phase) {
        return Err(DefenseError::RoundPhaseMismatch(
            alice.round_k,
            alice.phase,
            bob.round_k,
            bob.phase,
        ));
    }
    if alice.party != Party::Alice || bob.party != Party::Bob {
        return Err(DefenseError::PartyMismatch);
    }
    let reason = if !verify_report_with(algorithm, alice, key)
        || !verify_report_with(algorithm, bob, key)
    {
        AlarmReason::BadTag
    } else if (alice.i_end.amperes() - bob.i_end.amperes()).abs() > *tolerance {
        AlarmReason::CurrentMismatch
    } else if (alice.u_end.volts() - bob.u_end.volts()).abs() > *tolerance {
        AlarmReason::VoltageMismatch
    } else {
        AlarmReason::None
    };
    Ok(DefenseVerdict {
        round_k: alice.round_k,
        phase: alice.phase,
        alarm: reason != AlarmReason::None,
        reason,
    })
}

/// Compares the two endpoint reports with the default keyed hash.
pub fn verify_round(
    alice: &EndpointReport,
    bob: &EndpointReport,
    key: &AuthKey,
    tolerance: &Rational,
) -> Result<DefenseVerdict, DefenseError> {
    verify_round_with(MacAlgorithm::default(), alice, bob, key, tolerance)
}

/// Eve's constant current source and the rounds it is switched on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionScenario {
    pub i_inject: Current,
    pub active_rounds: BTreeSet<u64>,
}

impl InjectionScenario {
    pub fn new(i_inject: Current, active_rounds: BTreeSet<u64>) -> Result<Self, DefenseError> {
        if i_inject.is_zero() {
            return Err(DefenseError::ZeroInjection);
        }
        Ok(Self {
            i_inject,
            active_rounds,
        })
    }

    pub fn current_in(&self, round_k: u64) -> Current {
        if self.active_rounds.contains(&round_k) {
            self.i_inject.clone()
        } else {
            Current(Rational::zero())
        }
    }
}

/// Solves the loop with a current source feeding the wire node.
///
/// Returns what Alice's end and Bob's end measure. Both share the node
/// voltage; Bob's current exceeds Alice's by exactly the injected current.
pub fn solve_loop_with_injection(
    params: &LoopParams,
    i_inject: &Current,
) -> (LineObservation, LineObservation) {
    let one = Rational::from_integer(1.into());
    let g_a = &one / params.alice_arm();
    let g_b = &one / params.bob_arm();
    let node = (&g_a * params.u_a.volts() + &g_b * params.u_b.volts() + i_inject.amperes())
        / (&g_a + &g_b);
    let i_alice = (params.u_a.volts() - &node) * g_a;
    let i_bob = (&node - params.u_b.volts()) * g_b;
    (
        LineObservation::new(node.clone(), i_alice),
        LineObservation::new(node, i_bob),
    )
}

/// Eve holds the authentication key: she replaces Bob's current with
/// Alice's and re-tags, hiding the injection.
pub fn forge_reports(
    algorithm: MacAlgorithm,
    round_k: u64,
    phase: Phase,
    alice_end: &LineObservation,
    bob_end: &LineObservation,
    stolen_key: &AuthKey,
) -> (EndpointReport, EndpointReport) {
    let alice = make_report_with(algorithm, Party::Alice, round_k, phase, alice_end, stolen_key);
    let doctored = LineObservation {
        u_c: bob_end.u_c.clone(),
        i_c: alice_end.i_c.clone(),
    };
    let bob = make_report_with(algorithm, Party::Bob, round_k, phase, &doctored, stolen_key);
    (alice, bob)
}

/// Eve rewrites a report in transit: its current is shifted by `shift` and
/// the tag is recomputed with the stolen key.
pub fn retag_shifted(
    algorithm: MacAlgorithm,
    report: &EndpointReport,
    shift: &Current,
    stolen_key: &AuthKey,
) -> EndpointReport {
    let doctored = LineObservation {
        u_c: report.u_end.clone(),
        i_c: Current(report.i_end.amperes() + shift.amperes()),
    };
    make_report_with(
        algorithm,
        report.party,
        report.round_k,
        report.phase,
        &doctored,
        stolen_key,
    )
}

/// One protocol round with Eve injecting throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedRound {
    pub round_k: u64,
    pub alice_end: [LineObservation; 3],
    pub bob_end: [LineObservation; 3],
    pub verdicts: Vec<DefenseVerdict>,
    /// Bob's secrets as Alice extracts them from her end's samples.
    pub alice_view: Result<PartnerView, ProtocolError>,
    /// Alice's secrets as Bob extracts them from his end's samples.
    pub bob_view: Result<PartnerView, ProtocolError>,
}

impl InjectedRound {
    pub fn detected(&self) -> bool {
        self.verdicts.iter().any(|v| v.alarm)
    }

    /// `(|U_B error|, |U_A error|)` of the honest extractions, where they succeeded.
    pub fn voltage_errors(
        &self,
        alice: &PartySecrets,
        bob: &PartySecrets,
    ) -> (Option<Rational>, Option<Rational>) {
        let err = |view: &Result<PartnerView, ProtocolError>, truth: &PartySecrets| {
            view.as_ref()
                .ok()
                .map(|v| (v.u.volts() - truth.u.volts()).abs())
        };
        (err(&self.alice_view, bob), err(&self.bob_view, alice))
    }
}

/// Runs all three phases under injection. Each party reports its own end's
/// measurement; if `stolen_key` is given Eve rewrites the reports first.
#[allow(clippy::too_many_arguments)]
pub fn run_injected_round(
    algorithm: MacAlgorithm,
    round_k: u64,
    shared: &SharedSecret,
    alice: &PartySecrets,
    bob: &PartySecrets,
    deltas: &Deltas,
    i_inject: &Current,
    stolen_key: Option<&AuthKey>,
    tolerance: &Rational,
) -> Result<InjectedRound, DefenseError> {
    deltas.validate()?;
    let params = LoopParams {
        r_s: shared.r_s.clone(),
        r_a: alice.r.clone(),
        r_b: bob.r.clone(),
        u_a: alice.u.clone(),
        u_b: bob.u.clone(),
    };
    let mut alice_end = Vec::with_capacity(3);
    let mut bob_end = Vec::with_capacity(3);
    let mut verdicts = Vec::with_capacity(3);
    for phase in Phase::ALL {
        let (a, b) = solve_loop_with_injection(&phase_params(&params, deltas, phase), i_inject);
        let (ra, rb) = match stolen_key {
            Some(k) => forge_reports(algorithm, round_k, phase, &a, &b, k),
            None => (
                make_report_with(algorithm, Party::Alice, round_k, phase, &a, &shared.auth_key),
                make_report_with(algorithm, Party::Bob, round_k, phase, &b, &shared.auth_key),
            ),
        };
        verdicts.push(verify_round_with(
            algorithm,
            &ra,
            &rb,
            &shared.auth_key,
            tolerance,
        )?);
        alice_end.push(a);
        bob_end.push(b);
    }
    let alice_end: [LineObservation; 3] = alice_end.try_into().expect("three phases");
    let bob_end: [LineObservation; 3] = bob_end.try_into().expect("three phases");
    Ok(InjectedRound {
        round_k,
        alice_view: alice_extract(&shared.r_s, &alice_end[0], &alice_end[1]),
        bob_view: bob_extract(&shared.r_s, &bob_end[0], &bob_end[2]),
        alice_end,
        bob_end,
        verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{solve_loop, Resistance};
    use crate::exact::{int, ratio};

    fn res(v: i64) -> Resistance {
        Resistance::new(int(v)).unwrap()
    }

    fn e1() -> LoopParams {
        LoopParams {
            r_s: res(1000),
            r_a: res(2000),
            r_b: res(3000),
            u_a: Voltage(int(5)),
            u_b: Voltage(int(1)),
        }
    }

    fn key() -> AuthKey {
        AuthKey::new((0u8..32).collect()).unwrap()
    }

    #[test]
    fn zero_injection_is_passive_loop() {
        let (a, b) = solve_loop_with_injection(&e1(), &Current(int(0)));
        assert_eq!(a, solve_loop(&e1()));
        assert_eq!(b, a);
    }

    #[test]
    fn kcl_at_the_node() {
        let (a, b) = solve_loop_with_injection(&e1(), &Current(ratio(7, 1750)));
        assert_eq!(b.i() - a.i(), ratio(7, 1750));
        assert_eq!(a.u_c, b.u_c);
    }

    #[test]
    fn equal_sources_split_by_conductance() {
        // Nodal oracle: with u_a = u_b = 0 the node sits at I / (g_a + g_b).
        let p = e1().with_sources(int(0), int(0));
        let i = ratio(1, 100);
        let (a, b) = solve_loop_with_injection(&p, &Current(i.clone()));
        let node = i.clone() / (ratio(1, 3000) + ratio(1, 4000));
        assert_eq!(a.u(), &node);
        assert_eq!(a.i(), &(-node.clone() / int(3000)));
        assert_eq!(b.i(), &(node / int(4000)));
        assert_eq!((b.i() - a.i()).abs(), i);
    }

    #[test]
    fn report_tags() {
        let obs = solve_loop(&e1());
        let r1 = make_report(Party::Alice, 3, Phase::AlicePerturb, &obs, &key());
        let r2 = make_report(Party::Alice, 3, Phase::AlicePerturb, &obs, &key());
        assert_eq!(r1, r2);
        assert!(verify_report_with(MacAlgorithm::HmacSha256, &r1, &key()));
        let other = AuthKey::new(vec![9; 16]).unwrap();
        assert!(!verify_report_with(MacAlgorithm::HmacSha256, &r1, &other));
        let r3 = make_report_with(MacAlgorithm::HmacSha512, Party::Alice, 3, Phase::AlicePerturb, &obs, &key());
        assert_ne!(r1.auth_tag, r3.auth_tag);
        assert!(verify_report_with(MacAlgorithm::HmacSha512, &r3, &key()));
    }

    #[test]
    fn honest_round_passes() {
        let obs = solve_loop(&e1());
        let a = make_report(Party::Alice, 0, Phase::Baseline, &obs, &key());
        let b = make_report(Party::Bob, 0, Phase::Baseline, &obs, &key());
        let v = verify_round(&a, &b, &key(), &int(0)).unwrap();
        assert_eq!((v.alarm, v.reason), (false, AlarmReason::None));
    }

    #[test]
    fn injection_is_detected() {
        let (ea, eb) = solve_loop_with_injection(&e1(), &Current(ratio(1, 1_000_000)));
        let a = make_report(Party::Alice, 0, Phase::Baseline, &ea, &key());
        let b = make_report(Party::Bob, 0, Phase::Baseline, &eb, &key());
        let v = verify_round(&a, &b, &key(), &int(0)).unwrap();
        assert_eq!((v.alarm, v.reason), (true, AlarmReason::CurrentMismatch));
    }

    #[test]
    fn voltage_mismatch_and_bad_tag() {
        let obs = solve_loop(&e1());
        let a = make_report(Party::Alice, 0, Phase::Baseline, &obs, &key());
        let skewed = LineObservation { u_c: Voltage(int(9)), i_c: obs.i_c.clone() };
        let b = make_report(Party::Bob, 0, Phase::Baseline, &skewed, &key());
        assert_eq!(
            verify_round(&a, &b, &key(), &int(0)).unwrap().reason,
            AlarmReason::VoltageMismatch
        );
        let mut tampered = make_report(Party::Bob, 0, Phase::Baseline, &obs, &key());
        tampered.i_end = Current(int(1));
        assert_eq!(
            verify_round(&a, &tampered, &key(), &int(0)).unwrap().reason,
            AlarmReason::BadTag
        );
    }

    #[test]
    fn mismatched_reports_are_errors() {
        let obs = solve_loop(&e1());
        let a = make_report(Party::Alice, 0, Phase::Baseline, &obs, &key());
        let b = make_report(Party::Bob, 1, Phase::Baseline, &obs, &key());
        assert!(matches!(
            verify_round(&a, &b, &key(), &int(0)),
            Err(DefenseError::RoundPhaseMismatch(..))
        ));
        assert_eq!(verify_round(&a, &a, &key(), &int(0)), Err(DefenseError::PartyMismatch));
    }

    #[test]
    fn stolen_key_hides_injection() {
        let (ea, eb) = solve_loop_with_injection(&e1(), &Current(ratio(7, 1750)));
        let (a, b) = forge_reports(MacAlgorithm::HmacSha256, 0, Phase::Baseline, &ea, &eb, &key());
        let v = verify_round(&a, &b, &key(), &int(0)).unwrap();
        assert!(!v.alarm);
    }

    #[test]
    fn injection_corrupts_voltages_by_arm_times_current() {
        let shared = SharedSecret { r_s: res(1000), auth_key: key() };
        let alice = PartySecrets { r: res(2000), u: Voltage(int(5)), r_index: 0 };
        let bob = PartySecrets { r: res(3000), u: Voltage(int(1)), r_index: 0 };
        let i = ratio(1, 1000);
        let round = run_injected_round(
            MacAlgorithm::HmacSha256, 0, &shared, &alice, &bob, &Deltas::default(),
            &Current(i.clone()), None, &int(0),
        )
        .unwrap();
        assert!(round.detected());
        assert_eq!(round.alice_view.as_ref().unwrap().r, res(3000));
        let (err_b, err_a) = round.voltage_errors(&alice, &bob);
        assert_eq!(err_b, Some(int(4000) * &i));
        assert_eq!(err_a, Some(int(3000) * &i));
    }

    #[test]
    fn zero_injection_scenario_rejected() {
        assert_eq!(
            InjectionScenario::new(Current(int(0)), BTreeSet::new()),
            Err(DefenseError::ZeroInjection)
        );
    }
}
