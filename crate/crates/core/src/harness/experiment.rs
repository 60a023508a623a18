//! End-to-end experiment driver.

use std::fs;
use std::io;
use std::path::Path;

use num_bigint::BigInt;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use super::config::{Compromise, ExperimentConfig};
use super::transcript_file::TranscriptFile;
use super::transport::{self, tap, BoxedTransport, Tap, Tapped, Transport};
use super::wire::{AnalogSample, WireMessage};
use super::HarnessError;
use crate::circuit::{observe_with_noise_rng, Current, LineObservation, LoopParams, Resistance};
use crate::defense::{
    make_report_with, retag_shifted, solve_loop_with_injection, verify_round_with, DefenseVerdict,
    EndpointReport,
};
use crate::eavesdropper::{
    eve_crack_with_secret, eve_recover_voltages, eve_x_values, EveRecording, XValues,
};
use crate::entropy::{
    brute_force_posterior, expander_posterior, interior_indices, EntropyError, ExpansionMode,
    PosteriorReport, Sampling,
};
use crate::exact::{format_rational, serde_rational, Rational};
use crate::expander::{recover_partner_randoms, ExpanderMessage, Modulus};
use crate::protocol::{
    derive_key, draw_round_secrets_among, AuthKey, CompletedRound, Key, KeyRound, Palette, Party,
    PartyMachine, Phase, Transcript,
};

const STREAM_SHARED: u64 = 0;
const STREAM_ALICE: u64 = 1;
const STREAM_BOB: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TruthRound {
    pub round_k: u64,
    #[serde(with = "serde_rational")]
    pub r_a: Rational,
    #[serde(with = "serde_rational")]
    pub r_b: Rational,
    pub u_a: Option<String>,
    pub u_b: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HonestReport {
    pub alice_key: Key,
    pub bob_key: Key,
    pub keys_agree: bool,
    pub keys_match_truth: bool,
    /// Every extracted partner secret equals the truth exactly.
    pub extraction_exact: bool,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CrackReport {
    pub timing: Compromise,
    /// Rounds Eve had cracked while the exchange was still running.
    pub rounds_cracked_live: usize,
    pub key: Option<Key>,
    pub error: Option<String>,
    pub bits_correct: usize,
    pub bits_total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EveReport {
    pub frames_seen: usize,
    pub auth_reports_seen: usize,
    pub tap_matches_transcript: bool,
    pub x_values: Vec<XValues>,
    /// `X_A = R_S + R_A` and `X_B = R_S + R_B` (reduced mod q in modular mode).
    pub x_values_exact: bool,
    /// Source voltages recovered from public data equal the truth (circuit mode).
    pub voltages_exact: Option<bool>,
    pub crack: Option<CrackReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropySummary {
    pub h_rs_bits: f64,
    pub h_key_bits: f64,
    pub prior_bits: f64,
    pub rounds_used: usize,
    pub consistent_candidates: usize,
    pub true_rs_consistent: bool,
}

impl EntropySummary {
    fn from_report(report: &PosteriorReport, r_s: &Rational) -> Self {
        Self {
            h_rs_bits: report.h_rs_bits,
            h_key_bits: report.h_key_bits,
            prior_bits: report.prior_bits,
            rounds_used: report.rounds_used,
            consistent_candidates: report.consistent().count(),
            true_rs_consistent: report.consistent().any(|c| &c.r_s == r_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartyVerdict {
    /// The party that ran the check.
    pub party: Party,
    #[serde(flatten)]
    pub verdict: DefenseVerdict,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DefenseReport {
    pub verdicts: Vec<PartyVerdict>,
    pub alarms: usize,
    pub forged_reports: usize,
    pub injected_rounds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub mode: ExpansionMode,
    pub rounds: u64,
    #[serde(with = "serde_rational")]
    pub r_s: Rational,
    pub truth: Vec<TruthRound>,
    pub honest: HonestReport,
    pub eve: EveReport,
    pub entropy: Option<EntropySummary>,
    pub defense: DefenseReport,
    /// Any defense alarm, protocol abort or key disagreement.
    pub alarm: bool,
}

impl ExperimentReport {
    pub fn summary(&self) -> String {
        let yes_no = |b: bool| if b { "yes" } else { "no" };
        let mut out = String::new();
        out += &format!("config {}  seed {}\n", &self.config_hash[..16], self.seed);
        out += &format!("rounds           {}\n", self.rounds);
        out += &format!(
            "honest keys      agree={} bits={} exact={}\n",
            yes_no(self.honest.keys_agree),
            self.honest.alice_key.len(),
            yes_no(self.honest.extraction_exact)
        );
        if let Some(reason) = &self.honest.aborted {
            out += &format!("aborted          {reason}\n");
        }
        out += &format!(
            "eve tap          frames={} x-exact={}",
            self.eve.frames_seen,
            yes_no(self.eve.x_values_exact)
        );
        if let Some(v) = self.eve.voltages_exact {
            out += &format!(" voltages-exact={}", yes_no(v));
        }
        out.push('\n');
        if let Some(crack) = &self.eve.crack {
            out += &format!(
                "eve crack        {}/{} bits ({:?})\n",
                crack.bits_correct, crack.bits_total, crack.timing
            );
        }
        if let Some(h) = &self.entropy {
            out += &format!(
                "entropy          h_rs={:.3} h_key={:.3} prior={:.3}\n",
                h.h_rs_bits, h.h_key_bits, h.prior_bits
            );
        }
        out += &format!(
            "defense          checks={} alarms={} forged={}\n",
            self.defense.verdicts.len(),
            self.defense.alarms,
            self.defense.forged_reports
        );
        out += &format!("alarm            {}\n", yes_no(self.alarm));
        out
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub file: TranscriptFile,
    pub report: ExperimentReport,
}

impl ExperimentOutcome {
    pub const TRANSCRIPT_NAME: &'static str = "transcript.jsonl";
    pub const REPORT_NAME: &'static str = "report.json";

    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(Self::TRANSCRIPT_NAME), self.file.to_text())?;
        let mut json = serde_json::to_string_pretty(&self.report).map_err(io::Error::other)?;
        json.push('\n');
        fs::write(dir.join(Self::REPORT_NAME), json)
    }
}

struct Links {
    harness_to_alice: Tapped<BoxedTransport>,
    alice_line: BoxedTransport,
    harness_to_bob: BoxedTransport,
    bob_line: BoxedTransport,
    alice_party: Tapped<BoxedTransport>,
    bob_party: Tapped<BoxedTransport>,
    eve: Tap,
}

impl Links {
    fn open(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let (tx, eve) = tap();
        let (h_a, a) = transport::pair(cfg.transport)?;
        let (h_b, b) = transport::pair(cfg.transport)?;
        let (pa, pb) = transport::pair(cfg.transport)?;
        Ok(Self {
            harness_to_alice: Tapped::new(h_a, tx.clone()),
            alice_line: a,
            harness_to_bob: h_b,
            bob_line: b,
            alice_party: Tapped::new(pa, tx.clone()),
            bob_party: Tapped::new(pb, tx),
            eve,
        })
    }
}

fn recv_sample(link: &mut dyn Transport) -> Result<AnalogSample, HarnessError> {
    match link.recv()? {
        WireMessage::AnalogSample(s) => Ok(s),
        _ => Err(HarnessError::UnexpectedMessage("line")),
    }
}

fn recv_report(link: &mut dyn Transport) -> Result<EndpointReport, HarnessError> {
    match link.recv()? {
        WireMessage::AuthReport(r) => Ok(r),
        _ => Err(HarnessError::UnexpectedMessage("party")),
    }
}

fn recv_expander(link: &mut dyn Transport) -> Result<ExpanderMessage, HarnessError> {
    match link.recv()? {
        WireMessage::Expander(m) => Ok(m),
        _ => Err(HarnessError::UnexpectedMessage("party")),
    }
}

fn draw_indices(
    cfg: &ExperimentConfig,
    palette: &Palette,
    r_s: &Rational,
) -> Result<Vec<usize>, HarnessError> {
    let idx = match (cfg.sampling, &cfg.mode) {
        (Sampling::Interior, ExpansionMode::Circuit | ExpansionMode::ExpanderPlain) => {
            interior_indices(palette, &cfg.palettes.s, r_s)
        }
        _ => (0..palette.len()).collect(),
    };
    if idx.is_empty() {
        return Err(EntropyError::NoInterior.into());
    }
    Ok(idx)
}

fn compare_bits(found: &Key, truth: &Key) -> usize {
    found
        .bits
        .iter()
        .zip(&truth.bits)
        .filter(|(a, b)| a == b)
        .count()
}

/// Runs the configured exchange end to end and all analyses on it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, HarnessError> {
    let mut shared_rng = stream_rng(cfg.seed, STREAM_SHARED);
    let p = &cfg.palettes;
    let r_s = p.s.values()[shared_rng.random_range(0..p.s.len())].clone();
    let auth_key = AuthKey::random(&mut shared_rng);
    let links = Links::open(cfg)?;
    let body = match &cfg.mode {
        ExpansionMode::Circuit => run_circuit(cfg, &r_s, &auth_key, links)?,
        ExpansionMode::ExpanderPlain => run_expander(cfg, &r_s, None, links)?,
        ExpansionMode::ExpanderModular(q) => run_expander(cfg, &r_s, Some(q), links)?,
    };
    let alarm = body.defense.alarms > 0 || body.honest.aborted.is_some() || !body.honest.keys_agree;
    let config_hash = cfg.hash();
    Ok(ExperimentOutcome {
        file: TranscriptFile {
            config_hash: config_hash.clone(),
            transcript: body.transcript,
            expander: body.expander,
        },
        report: ExperimentReport {
            config_hash,
            seed: cfg.seed,
            mode: cfg.mode.clone(),
            rounds: cfg.rounds,
            r_s,
            truth: body.truth,
            honest: body.honest,
            eve: body.eve,
            entropy: body.entropy,
            defense: body.defense,
            alarm,
        },
    })
}

struct Body {
    transcript: Transcript,
    expander: Vec<ExpanderMessage>,
    truth: Vec<TruthRound>,
    honest: HonestReport,
    eve: EveReport,
    entropy: Option<EntropySummary>,
    defense: DefenseReport,
}

fn run_circuit(
    cfg: &ExperimentConfig,
    r_s: &Rational,
    auth_key: &AuthKey,
    mut links: Links,
) -> Result<Body, HarnessError> {
    let p = &cfg.palettes;
    let r_s_res = Resistance::new(r_s.clone())?;
    let mut alice = PartyMachine::new(Party::Alice, r_s_res.clone(), cfg.deltas.clone())?;
    let mut bob = PartyMachine::new(Party::Bob, r_s_res.clone(), cfg.deltas.clone())?;
    if cfg.noise.enabled() {
        alice = alice.with_snapping(p.b.clone(), p.ub.clone());
        bob = bob.with_snapping(p.a.clone(), p.ua.clone());
    }
    let mut alice_rng = stream_rng(cfg.seed, STREAM_ALICE);
    let mut bob_rng = stream_rng(cfg.seed, STREAM_BOB);
    let mut noise_rng = stream_rng(cfg.seed, STREAM_NOISE);
    let idx_a = draw_indices(cfg, &p.a, r_s)?;
    let idx_b = draw_indices(cfg, &p.b, r_s)?;
    let palettes = p.key_palettes();
    let stolen_key = (cfg.compromise == Compromise::RsAndAuthkey).then_some(auth_key);

    let mut measure = |obs: LineObservation| -> Result<LineObservation, HarnessError> {
        if !cfg.noise.enabled() {
            return Ok(obs);
        }
        let noisy = observe_with_noise_rng(&obs, cfg.noise.sigma_u, cfg.noise.sigma_i, &mut noise_rng)?;
        noisy
            .to_exact()
            .ok_or(HarnessError::UnexpectedMessage("non-finite sample"))
    };

    let mut sent = Transcript::new();
    let mut recording = EveRecording::new();
    let mut frames_seen = 0;
    let mut auth_reports_seen = 0;
    let mut truth = Vec::new();
    let mut defense = DefenseReport::default();
    let mut aborted = None;
    let mut rounds_cracked_live = 0;

    for k in 0..cfg.rounds {
        let a_sec = draw_round_secrets_among(&p.a, &p.ua, &idx_a, &mut alice_rng)?;
        let b_sec = draw_round_secrets_among(&p.b, &p.ub, &idx_b, &mut bob_rng)?;
        truth.push(TruthRound {
            round_k: k,
            r_a: a_sec.r.ohms().clone(),
            r_b: b_sec.r.ohms().clone(),
            u_a: Some(format_rational(a_sec.u.volts())),
            u_b: Some(format_rational(b_sec.u.volts())),
        });
        alice.begin_round(k, a_sec)?;
        bob.begin_round(k, b_sec)?;
        let i_inject = cfg
            .attack
            .as_ref()
            .map_or(Current(Rational::zero()), |a| a.current_in(k));
        if !i_inject.is_zero() {
            defense.injected_rounds.push(k);
        }

        for phase in Phase::ALL {
            let (r_a, u_a) = alice.source_for(phase)?;
            let (r_b, u_b) = bob.source_for(phase)?;
            let params = LoopParams {
                r_s: r_s_res.clone(),
                r_a,
                r_b,
                u_a,
                u_b,
            };
            let (a_end, b_end) = solve_loop_with_injection(&params, &i_inject);
            let a_obs = measure(a_end)?;
            let b_obs = measure(b_end)?;
            sent.record(k, phase, a_obs.clone())?;
            links.harness_to_alice.send(&WireMessage::AnalogSample(AnalogSample {
                round_k: k,
                phase,
                obs: a_obs,
            }))?;
            links.harness_to_bob.send(&WireMessage::AnalogSample(AnalogSample {
                round_k: k,
                phase,
                obs: b_obs,
            }))?;
            let at_alice = recv_sample(links.alice_line.as_mut())?;
            let at_bob = recv_sample(links.bob_line.as_mut())?;
            let own_a = make_report_with(cfg.mac, Party::Alice, k, phase, &at_alice.obs, auth_key);
            let own_b = make_report_with(cfg.mac, Party::Bob, k, phase, &at_bob.obs, auth_key);
            alice.observe(at_alice.round_k, at_alice.phase, at_alice.obs)?;
            bob.observe(at_bob.round_k, at_bob.phase, at_bob.obs)?;

            links.alice_party.send(&WireMessage::AuthReport(own_a.clone()))?;
            links.bob_party.send(&WireMessage::AuthReport(own_b.clone()))?;
            let mut from_alice = recv_report(&mut links.bob_party)?;
            let mut from_bob = recv_report(&mut links.alice_party)?;
            if let (Some(key), false) = (stolen_key, i_inject.is_zero()) {
                // Each party's partner report is made to carry the current the
                // party itself sees.
                from_bob = retag_shifted(cfg.mac, &from_bob, &Current(-i_inject.amperes()), key);
                from_alice = retag_shifted(cfg.mac, &from_alice, &i_inject, key);
                defense.forged_reports += 2;
            }
            for (party, a, b) in [
                (Party::Alice, &own_a, &from_bob),
                (Party::Bob, &from_alice, &own_b),
            ] {
                let verdict = verify_round_with(cfg.mac, a, b, auth_key, &cfg.tolerance)?;
                defense.alarms += usize::from(verdict.alarm);
                defense.verdicts.push(PartyVerdict { party, verdict });
            }
        }

        for msg in links.eve.drain()? {
            frames_seen += 1;
            match msg {
                WireMessage::AnalogSample(s) => recording
                    .record(s.round_k, s.phase, s.obs)
                    .map_err(HarnessError::Eve)?,
                WireMessage::AuthReport(_) => auth_reports_seen += 1,
                WireMessage::Expander(_) => {}
            }
        }
        if cfg.compromise.knows_rs() && cfg.compromise != Compromise::RsAfter
            && eve_crack_with_secret(&recording, r_s, &palettes).is_ok()
        {
            rounds_cracked_live += 1;
        }

        let a_done = alice.finish_round();
        let b_done = bob.finish_round();
        if let Some(e) = [a_done.err(), b_done.err()].into_iter().flatten().next() {
            aborted = Some(e.to_string());
            break;
        }
    }

    let completed = |m: &PartyMachine| m.completed().to_vec();
    let views_exact = |done: Vec<CompletedRound>, own_is_alice: bool| {
        done.iter().zip(&truth).all(|(c, t)| {
            let (r, u) = if own_is_alice {
                (&t.r_b, &t.u_b)
            } else {
                (&t.r_a, &t.u_a)
            };
            c.partner.r.ohms() == r && Some(format_rational(c.partner.u.volts())) == *u
        })
    };
    let extraction_exact =
        views_exact(completed(&alice), true) && views_exact(completed(&bob), false);
    let truth_key = derive_key(
        &truth
            .iter()
            .take(alice.completed().len())
            .map(|t| KeyRound {
                round_k: t.round_k,
                r_a: t.r_a.clone(),
                r_b: t.r_b.clone(),
            })
            .collect::<Vec<_>>(),
        &p.a,
        &p.b,
    )?;
    let alice_key = alice.key(&p.a, &p.b)?;
    let bob_key = bob.key(&p.a, &p.b)?;

    let mut x_values = Vec::new();
    let mut voltages_exact = true;
    for t in &truth {
        let Ok(x) = eve_x_values(&recording, t.round_k) else {
            continue;
        };
        let baseline = recording.get(t.round_k, Phase::Baseline).expect("complete round");
        let (u_a, u_b) = eve_recover_voltages(&x, baseline);
        voltages_exact &= Some(format_rational(u_a.volts())) == t.u_a
            && Some(format_rational(u_b.volts())) == t.u_b;
        x_values.push(x);
    }
    let x_values_exact = x_values.iter().zip(&truth).all(|(x, t)| {
        x.x_a == r_s + &t.r_a && x.x_b == r_s + &t.r_b
    });

    let crack = cfg.compromise.knows_rs().then(|| {
        let result = eve_crack_with_secret(&recording, r_s, &palettes);
        let (key, error) = match result {
            Ok(c) => (Some(c.key), None),
            Err(e) => (None, Some(e.to_string())),
        };
        CrackReport {
            timing: cfg.compromise,
            rounds_cracked_live,
            bits_correct: key.as_ref().map_or(0, |k| compare_bits(k, &truth_key)),
            bits_total: truth_key.len(),
            key,
            error,
        }
    });
    let entropy = if cfg.noise.enabled() {
        None
    } else {
        let report = brute_force_posterior(&recording, &p.s, &palettes)?;
        Some(EntropySummary::from_report(&report, r_s))
    };

    Ok(Body {
        honest: HonestReport {
            keys_agree: alice_key == bob_key,
            keys_match_truth: alice_key == truth_key,
            alice_key,
            bob_key,
            extraction_exact,
            aborted,
        },
        eve: EveReport {
            frames_seen,
            auth_reports_seen,
            tap_matches_transcript: recording.to_transcript() == sent,
            x_values,
            x_values_exact,
            voltages_exact: Some(voltages_exact),
            crack,
        },
        transcript: sent,
        expander: Vec::new(),
        truth,
        entropy,
        defense,
    })
}

fn run_expander(
    cfg: &ExperimentConfig,
    r_s: &Rational,
    modulus: Option<&Modulus>,
    mut links: Links,
) -> Result<Body, HarnessError> {
    let p = &cfg.palettes;
    let as_int = |v: &Rational| -> Result<BigInt, HarnessError> {
        if v.is_integer() {
            Ok(v.to_integer())
        } else {
            Err(EntropyError::NotAnInteger(format_rational(v)).into())
        }
    };
    let r_s_int = as_int(r_s)?;
    let mut alice_rng = stream_rng(cfg.seed, STREAM_ALICE);
    let mut bob_rng = stream_rng(cfg.seed, STREAM_BOB);
    let idx_a = draw_indices(cfg, &p.a, r_s)?;
    let idx_b = draw_indices(cfg, &p.b, r_s)?;
    let palettes = p.key_palettes();

    let mut truth = Vec::new();
    let mut alice_rounds = Vec::new();
    let mut bob_rounds = Vec::new();
    let mut sent = Vec::new();
    for k in 0..cfg.rounds {
        let r_a = p.a.values()[idx_a[alice_rng.random_range(0..idx_a.len())]].clone();
        let r_b = p.b.values()[idx_b[bob_rng.random_range(0..idx_b.len())]].clone();
        let msg_a = ExpanderMessage::compose(Party::Alice, k, &r_s_int, &[as_int(&r_a)?], modulus)?;
        let msg_b = ExpanderMessage::compose(Party::Bob, k, &r_s_int, &[as_int(&r_b)?], modulus)?;
        links.alice_party.send(&WireMessage::Expander(msg_a.clone()))?;
        links.bob_party.send(&WireMessage::Expander(msg_b.clone()))?;
        let at_bob = recv_expander(&mut links.bob_party)?;
        let at_alice = recv_expander(&mut links.alice_party)?;
        let seen_by_bob = Rational::from_integer(recover_partner_randoms(&at_bob, &r_s_int)[0].clone());
        let seen_by_alice =
            Rational::from_integer(recover_partner_randoms(&at_alice, &r_s_int)[0].clone());
        alice_rounds.push(KeyRound {
            round_k: k,
            r_a: r_a.clone(),
            r_b: seen_by_alice,
        });
        bob_rounds.push(KeyRound {
            round_k: k,
            r_a: seen_by_bob,
            r_b: r_b.clone(),
        });
        sent.push(msg_a);
        sent.push(msg_b);
        truth.push(TruthRound {
            round_k: k,
            r_a,
            r_b,
            u_a: None,
            u_b: None,
        });
    }

    let truth_rounds: Vec<KeyRound> = truth
        .iter()
        .map(|t| KeyRound {
            round_k: t.round_k,
            r_a: t.r_a.clone(),
            r_b: t.r_b.clone(),
        })
        .collect();
    let truth_key = derive_key(&truth_rounds, &p.a, &p.b)?;
    let alice_key = derive_key(&alice_rounds, &p.a, &p.b)?;
    let bob_key = derive_key(&bob_rounds, &p.a, &p.b)?;

    let seen = links.eve.drain()?;
    let frames_seen = seen.len();
    let tapped: Vec<ExpanderMessage> = seen
        .into_iter()
        .filter_map(|m| match m {
            WireMessage::Expander(m) => Some(m),
            _ => None,
        })
        .collect();
    let x_values = x_values_from_messages(&tapped);
    let reduce = |v: Rational| match modulus {
        None => v,
        Some(q) => {
            let q = Rational::from_integer(q.value().clone());
            v.clone() - (v / &q).floor() * q
        }
    };
    let x_values_exact = x_values.len() == truth.len()
        && x_values.iter().zip(&truth).all(|(x, t)| {
            x.x_a == reduce(r_s + &t.r_a) && x.x_b == reduce(r_s + &t.r_b)
        });
    let crack = cfg.compromise.knows_rs().then(|| {
        let single = Palette::new(vec![r_s.clone()]).expect("one value");
        let key = expander_posterior(&x_values, &single, &palettes, modulus)
            .ok()
            .and_then(|r| r.candidates.into_iter().next())
            .and_then(|c| c.key);
        CrackReport {
            timing: cfg.compromise,
            rounds_cracked_live: if cfg.compromise == Compromise::RsAfter {
                0
            } else {
                x_values.len()
            },
            bits_correct: key.as_ref().map_or(0, |k| compare_bits(k, &truth_key)),
            bits_total: truth_key.len(),
            error: key.is_none().then(|| "published sums inconsistent with R_S".to_string()),
            key,
        }
    });
    let report = expander_posterior(&x_values, &p.s, &palettes, modulus)?;

    Ok(Body {
        transcript: Transcript::new(),
        honest: HonestReport {
            keys_agree: alice_key == bob_key,
            keys_match_truth: alice_key == truth_key,
            extraction_exact: alice_key == truth_key && bob_key == truth_key,
            alice_key,
            bob_key,
            aborted: None,
        },
        eve: EveReport {
            frames_seen,
            auth_reports_seen: 0,
            tap_matches_transcript: tapped == sent,
            x_values,
            x_values_exact,
            voltages_exact: None,
            crack,
        },
        expander: sent,
        truth,
        entropy: Some(EntropySummary::from_report(&report, r_s)),
        defense: DefenseReport::default(),
    })
}

/// Pairs Alice's and Bob's published sums round by round.
pub fn x_values_from_messages(messages: &[ExpanderMessage]) -> Vec<XValues> {
    let mut by_round: std::collections::BTreeMap<u64, (Option<Rational>, Option<Rational>)> =
        Default::default();
    for m in messages {
        for (round_k, x) in m.rounds().zip(&m.x_list) {
            let slot = by_round.entry(round_k).or_default();
            let x = Some(Rational::from_integer(x.clone()));
            match m.sender {
                Party::Alice => slot.0 = x,
                Party::Bob => slot.1 = x,
            }
        }
    }
    by_round
        .into_iter()
        .filter_map(|(round_k, pair)| match pair {
            (Some(x_a), Some(x_b)) => Some(XValues { round_k, x_a, x_b }),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
palette_s = [1000, 2000]
palette_a = [1000, 2000, 3000, 4000]
palette_b = [1000, 2000, 3000, 4000]
palette_ua = ["5", "-3", "1/2"]
palette_ub = ["1", "7"]
seed = 11
"#;

    fn config(extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!("{BASE}{extra}")).unwrap()
    }

    #[test]
    fn one_honest_round() {
        let out = run_experiment(&config("rounds = 1\n")).unwrap();
        let r = &out.report;
        assert_eq!(out.file.transcript.len(), 3);
        assert!(r.honest.keys_agree && r.honest.keys_match_truth && r.honest.extraction_exact);
        assert_eq!(r.honest.alice_key.len(), 4);
        assert_eq!(r.eve.voltages_exact, Some(true));
        assert!(r.eve.x_values_exact && r.eve.tap_matches_transcript);
        assert_eq!(r.eve.frames_seen, 3 + 6);
        assert_eq!(r.defense.alarms, 0);
        assert!(!r.alarm);
    }

    #[test]
    fn zero_rounds() {
        let out = run_experiment(&config("rounds = 0\n")).unwrap();
        assert!(out.file.transcript.is_empty());
        assert!(out.report.honest.alice_key.is_empty());
        let h = out.report.entropy.unwrap();
        assert_eq!(h.h_rs_bits, 1.0);
        assert_eq!(h.prior_bits, 1.0);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = config("rounds = 5\n");
        let a = run_experiment(&cfg).unwrap().file.to_text();
        let b = run_experiment(&cfg).unwrap().file.to_text();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(a, run_experiment(&other).unwrap().file.to_text());
    }

    #[test]
    fn socket_transport_gives_same_transcript() {
        let mem = run_experiment(&config("rounds = 4\n")).unwrap();
        let sock = run_experiment(&config("rounds = 4\ntransport = \"socket\"\n")).unwrap();
        assert_eq!(mem.file.transcript, sock.file.transcript);
        assert_eq!(mem.report.honest, sock.report.honest);
    }

    #[test]
    fn injection_raises_alarm_with_intact_key() {
        let out = run_experiment(&config("rounds = 3\nattack_current = \"1/1000000\"\n")).unwrap();
        let r = &out.report;
        assert!(r.alarm);
        assert_eq!(r.defense.alarms, 3 * 3 * 2);
        assert!(r.honest.keys_agree);
        assert!(!r.honest.extraction_exact);
    }

    #[test]
    fn compromised_key_hides_injection() {
        let out = run_experiment(&config(
            "rounds = 3\nattack_current = \"1/1000000\"\ncompromise = \"rs-and-authkey\"\n",
        ))
        .unwrap();
        let r = &out.report;
        assert_eq!(r.defense.alarms, 0);
        assert_eq!(r.defense.forged_reports, 3 * 3 * 2);
        assert!(!r.alarm);
        let crack = r.eve.crack.as_ref().unwrap();
        assert_eq!(crack.bits_correct, crack.bits_total);
    }

    #[test]
    fn crack_before_and_after() {
        for (timing, live) in [("rs-before", 4), ("rs-after", 0)] {
            let out =
                run_experiment(&config(&format!("rounds = 4\ncompromise = \"{timing}\"\n"))).unwrap();
            let crack = out.report.eve.crack.unwrap();
            assert_eq!(crack.rounds_cracked_live, live);
            assert_eq!(crack.bits_total, 16);
            assert_eq!(crack.bits_correct, 16);
            assert_eq!(crack.key.as_ref(), Some(&out.report.honest.alice_key));
        }
    }

    #[test]
    fn modular_expander_run() {
        let text = r#"
palette_s = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]
palette_a = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]
palette_b = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15]
palette_ua = [1]
palette_ub = [1]
rounds = 6
mode = "expander-modular"
modulus = 16
compromise = "rs-after"
seed = 3
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let out = run_experiment(&cfg).unwrap();
        let r = &out.report;
        assert!(r.honest.keys_agree && r.honest.keys_match_truth);
        assert_eq!(r.honest.alice_key.len(), 48);
        assert!(r.eve.x_values_exact && r.eve.tap_matches_transcript);
        let h = r.entropy.as_ref().unwrap();
        assert_eq!((h.h_rs_bits, h.h_key_bits), (4.0, 4.0));
        assert_eq!(out.file.expander.len(), 12);
        let crack = r.eve.crack.as_ref().unwrap();
        assert_eq!(crack.bits_correct, 48);
        let again = TranscriptFile::parse(&out.file.to_text()).unwrap();
        assert_eq!(again, out.file);
    }

    #[test]
    fn noisy_run_snaps_to_palette() {
        let text = r#"
palette_s = [1000]
palette_a = [1000, 1100, 1200, 1300]
palette_b = [1000, 1100, 1200, 1300]
palette_ua = [1, 2, 3]
palette_ub = [-1, -2]
rounds = 20
sigma_u = 1e-9
sigma_i = 1e-9
tolerance = "1/10000"
seed = 5
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let out = run_experiment(&cfg).unwrap();
        let r = &out.report;
        assert!(r.honest.keys_agree && r.honest.extraction_exact, "{}", r.summary());
        assert_eq!(r.defense.alarms, 0);
        assert!(r.entropy.is_none());
        assert!(!out.file.transcript.entries()[0].obs.u().is_integer());
    }

    #[test]
    fn report_writes_to_directory() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&config("rounds = 2\n")).unwrap();
        out.write_to(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(ExperimentOutcome::TRANSCRIPT_NAME)).unwrap();
        assert_eq!(text, out.file.to_text());
        let report: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join(ExperimentOutcome::REPORT_NAME)).unwrap(),
        )
        .unwrap();
        assert_eq!(report["honest"]["keys_agree"], true);
        assert!(out.report.summary().contains("alarm            no"));
    }
}
