use std::collections::BTreeMap;

use num_bigint::BigInt;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use kexlab_core::circuit::{solve_loop, LineObservation, LoopParams, Resistance};
use kexlab_core::defense::{make_report, MacAlgorithm, TAG_LEN};
use kexlab_core::eavesdropper::{eve_x_values, EveRecording, KeyPalettes};
use kexlab_core::entropy::{
    brute_force_posterior, entropy_vs_rounds, EntropyScenario, ExpansionMode, Sampling,
};
use kexlab_core::exact::{int, ratio, Rational};
use kexlab_core::expander::{equivalence_check, expand, Modulus, RoundResistances};
use kexlab_core::harness::wire::report_body;
use kexlab_core::harness::TranscriptFile;
use kexlab_core::protocol::{
    draw_round_secrets, run_round, AuthKey, Deltas, PartySecrets, SharedSecret,
};
use kexlab_core::{Palette, Party, Phase, Transcript, Voltage};

fn res(v: i64) -> Resistance {
    Resistance::new(int(v)).unwrap()
}

fn shared(r_s: i64) -> SharedSecret {
    SharedSecret {
        r_s: res(r_s),
        auth_key: AuthKey::new(vec![1; 32]).unwrap(),
    }
}

fn secrets(r: i64, u: Rational) -> PartySecrets {
    PartySecrets {
        r: res(r),
        u: Voltage(u),
        r_index: 0,
    }
}

fn rational() -> impl Strategy<Value = Rational> {
    (-1_000_000i64..=1_000_000, 1i64..=1000).prop_map(|(n, d)| ratio(n, d))
}

fn nonzero_rational() -> impl Strategy<Value = Rational> {
    rational().prop_filter("nonzero", |r| *r != int(0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn honest_extraction_is_exact(
        r_s in 1i64..=1_000_000,
        r_a in 1i64..=1_000_000,
        r_b in 1i64..=1_000_000,
        u_a in rational(),
        u_b in rational(),
        d_a in nonzero_rational(),
        d_b in nonzero_rational(),
    ) {
        let deltas = Deltas { alice: Voltage(d_a), bob: Voltage(d_b) };
        let (rec, _) = run_round(0, &shared(r_s), &secrets(r_a, u_a.clone()), &secrets(r_b, u_b.clone()), &deltas).unwrap();
        prop_assert_eq!(rec.alice_view.r.ohms(), &int(r_b));
        prop_assert_eq!(rec.alice_view.u.volts(), &u_b);
        prop_assert_eq!(rec.bob_view.r.ohms(), &int(r_a));
        prop_assert_eq!(rec.bob_view.u.volts(), &u_a);
    }

    #[test]
    fn extraction_does_not_depend_on_deltas(
        r_a in 1i64..=10_000,
        r_b in 1i64..=10_000,
        u_a in rational(),
        u_b in rational(),
        d1 in nonzero_rational(),
        d2 in nonzero_rational(),
    ) {
        let views = |d: &Rational| {
            let deltas = Deltas { alice: Voltage(d.clone()), bob: Voltage(d.clone()) };
            let (rec, _) = run_round(0, &shared(500), &secrets(r_a, u_a.clone()), &secrets(r_b, u_b.clone()), &deltas).unwrap();
            (rec.alice_view, rec.bob_view)
        };
        prop_assert_eq!(views(&d1), views(&d2));
    }

    #[test]
    fn loop_is_linear_in_sources(
        r in (1i64..=100_000, 1i64..=100_000, 1i64..=100_000),
        a in (rational(), rational()),
        b in (rational(), rational()),
    ) {
        let params = |u_a: &Rational, u_b: &Rational| LoopParams {
            r_s: res(r.0), r_a: res(r.1), r_b: res(r.2),
            u_a: Voltage(u_a.clone()), u_b: Voltage(u_b.clone()),
        };
        let first = solve_loop(&params(&a.0, &a.1));
        let second = solve_loop(&params(&b.0, &b.1));
        let sum = solve_loop(&params(&(&a.0 + &b.0), &(&a.1 + &b.1)));
        prop_assert_eq!(sum.u(), &(first.u() + second.u()));
        prop_assert_eq!(sum.i(), &(first.i() + second.i()));
    }

    #[test]
    fn x_values_are_loop_sums(r_s in 1i64..=1_000_000, r_a in 1i64..=1_000_000, r_b in 1i64..=1_000_000) {
        let (_, t) = run_round(4, &shared(r_s), &secrets(r_a, int(2)), &secrets(r_b, int(-9)), &Deltas::default()).unwrap();
        let x = eve_x_values(&EveRecording::from_transcript(&t).unwrap(), 4).unwrap();
        prop_assert_eq!(x.x_a, int(r_s + r_a));
        prop_assert_eq!(x.x_b, int(r_s + r_b));
    }

    #[test]
    fn transcript_file_round_trip(
        rounds in prop::collection::vec(prop::collection::vec((rational(), rational()), 3), 0..6),
        hash in "[0-9a-f]{64}",
    ) {
        let mut t = Transcript::new();
        for (k, phases) in rounds.iter().enumerate() {
            for (phase, (u, i)) in Phase::ALL.into_iter().zip(phases) {
                t.record(k as u64 * 2, phase, LineObservation::new(u.clone(), i.clone())).unwrap();
            }
        }
        let file = TranscriptFile::new(hash, t);
        let text = file.to_text();
        let back = TranscriptFile::parse(&text).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(back.to_text(), text);
    }
}

/// Random scenario over integer palettes, including narrow ones that leak.
fn random_palettes(rng: &mut ChaCha20Rng) -> (Palette, KeyPalettes) {
    let step = rng.random_range(1..=5) * 100;
    let p_s = Palette::progression(step, step, rng.random_range(1..=6)).unwrap();
    let a = Palette::progression(step, step, rng.random_range(1..=8)).unwrap();
    let b = Palette::progression(step, step, rng.random_range(1..=8)).unwrap();
    (p_s, KeyPalettes { a, b })
}

#[test]
fn key_entropy_equals_secret_entropy_and_never_grows() {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let u = Palette::from_integers([-3, 1, 4]).unwrap();
    for _ in 0..200 {
        let (p_s, palettes) = random_palettes(&mut rng);
        let r_s = p_s.values()[rng.random_range(0..p_s.len())].clone();
        let shared = SharedSecret {
            r_s: Resistance::new(r_s.clone()).unwrap(),
            auth_key: AuthKey::new(vec![0; 16]).unwrap(),
        };
        let mut rec = EveRecording::new();
        let mut previous = f64::INFINITY;
        for k in 0..4 {
            let a = draw_round_secrets(&palettes.a, &u, &mut rng).unwrap();
            let b = draw_round_secrets(&palettes.b, &u, &mut rng).unwrap();
            let (_, seg) = run_round(k, &shared, &a, &b, &Deltas::default()).unwrap();
            for e in seg.entries() {
                rec.record(e.round_k, e.phase, e.obs.clone()).unwrap();
            }
            let report = brute_force_posterior(&rec, &p_s, &palettes).unwrap();
            assert_eq!(report.h_key_bits, report.h_rs_bits);
            assert!(report.is_injective());
            assert!(report.consistent().any(|c| c.r_s == r_s));
            assert!(report.h_rs_bits <= previous);
            previous = report.h_rs_bits;
        }
    }
}

#[test]
fn circuit_matches_plain_expander() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for _ in 0..500 {
        let r_s = rng.random_range(1..=1_000_000i64);
        let rounds = rng.random_range(1..=4u64);
        let mut transcript = Transcript::new();
        let mut truth = Vec::new();
        for k in 0..rounds {
            let r_a = rng.random_range(1..=1_000_000i64);
            let r_b = rng.random_range(1..=1_000_000i64);
            let u_a = ratio(rng.random_range(-1000..=1000), rng.random_range(1..=50));
            let u_b = ratio(rng.random_range(-1000..=1000), rng.random_range(1..=50));
            let (_, seg) =
                run_round(k, &shared(r_s), &secrets(r_a, u_a), &secrets(r_b, u_b), &Deltas::default())
                    .unwrap();
            transcript.extend_from(&seg).unwrap();
            truth.push(RoundResistances { round_k: k, r_a: res(r_a), r_b: res(r_b) });
        }
        assert!(equivalence_check(&transcript, &res(r_s), &truth));
        truth[0].r_a = Resistance::new(truth[0].r_a.ohms() + int(1)).unwrap();
        assert!(!equivalence_check(&transcript, &res(r_s), &truth));
    }
}

#[test]
fn modular_sums_are_uniform() {
    let q = 16u32;
    let modulus = Modulus::new(BigInt::from(q)).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    let n = 16_000;
    let r_s = BigInt::from(11);
    let randoms: Vec<BigInt> = (0..n).map(|_| BigInt::from(rng.random_range(0..q))).collect();
    let sums = expand(&r_s, &randoms, Some(&modulus)).unwrap();
    let mut counts: BTreeMap<BigInt, usize> = BTreeMap::new();
    for s in sums {
        *counts.entry(s).or_default() += 1;
    }
    assert_eq!(counts.len(), q as usize);
    let expected = n as f64 / q as f64;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 15 degrees of freedom, p = 0.001.
    assert!(chi2 < 37.70, "chi-square {chi2}");
}

#[test]
fn modular_posterior_stays_flat() {
    let p = Palette::progression(0, 1, 16).unwrap();
    let scenario = EntropyScenario {
        p_s: p.clone(),
        p_a: p.clone(),
        p_b: p.clone(),
        p_u: Palette::from_integers([1]).unwrap(),
        deltas: Deltas::default(),
        mode: ExpansionMode::ExpanderModular(Modulus::new(BigInt::from(16)).unwrap()),
        sampling: Sampling::Full,
        seed: 8,
    };
    for point in entropy_vs_rounds(&scenario, 6).unwrap() {
        assert_eq!((point.h_rs_bits, point.h_key_bits), (4.0, 4.0));
        assert_eq!(point.key_bit_length, 8 * point.k);
    }
}

#[test]
fn every_single_bit_flip_breaks_the_tag() {
    let key = AuthKey::new((0u8..32).collect()).unwrap();
    let obs = LineObservation::new(ratio(23, 7), ratio(1, 1750));
    let report = make_report(Party::Alice, 9, Phase::AlicePerturb, &obs, &key);
    let body = report_body(&report);
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for algorithm in [MacAlgorithm::HmacSha256, MacAlgorithm::HmacSha512] {
        let tag = algorithm.tag(&key, &body);
        assert!(algorithm.verify(&key, &body, &tag));
        let mut changed_bits = 0u32;
        for _ in 0..1000 {
            let bit = rng.random_range(0..body.len() * 8);
            let mut flipped = body.clone();
            flipped[bit / 8] ^= 1 << (bit % 8);
            assert!(!algorithm.verify(&key, &flipped, &tag));
            let other = algorithm.tag(&key, &flipped);
            changed_bits += tag.iter().zip(&other).map(|(a, b)| (a ^ b).count_ones()).sum::<u32>();
        }
        let mean = changed_bits as f64 / 1000.0;
        let half = (TAG_LEN * 4) as f64;
        assert!((mean - half).abs() < 4.0, "mean changed bits {mean}");
    }
}
