//! Shared fixtures for the benchmarks.

use kexlab_core::circuit::{LoopParams, Resistance};
use kexlab_core::eavesdropper::{EveRecording, KeyPalettes};
use kexlab_core::exact::int;
use kexlab_core::harness::ExperimentConfig;
use kexlab_core::protocol::{run_round, AuthKey, Deltas, PartySecrets, SharedSecret};
use kexlab_core::{Palette, Voltage};

pub fn res(ohms: i64) -> Resistance {
    Resistance::new(int(ohms)).expect("positive")
}

pub fn loop_params() -> LoopParams {
    LoopParams {
        r_s: res(1000),
        r_a: res(2000),
        r_b: res(3000),
        u_a: Voltage(int(5)),
        u_b: Voltage(int(1)),
    }
}

pub fn shared() -> SharedSecret {
    SharedSecret {
        r_s: res(1000),
        auth_key: AuthKey::new(vec![7; 32]).expect("long enough"),
    }
}

pub fn secrets(r: i64, u: i64, index: usize) -> PartySecrets {
    PartySecrets {
        r: res(r),
        u: Voltage(int(u)),
        r_index: index,
    }
}

/// `rounds` honest rounds over palettes of `size` values spaced 100 ohms apart.
pub fn recording(rounds: u64, size: usize) -> (EveRecording, Palette, KeyPalettes) {
    let p_s = Palette::progression(100, 100, size).expect("valid");
    let p = Palette::progression(100_000, 100, size).expect("valid");
    let mut rec = EveRecording::new();
    for k in 0..rounds {
        let i = (k as usize * 7) % size;
        let j = (k as usize * 13 + 3) % size;
        let a = secrets(100_000 + 100 * i as i64, 3, i);
        let b = secrets(100_000 + 100 * j as i64, -2, j);
        let (_, segment) = run_round(k, &shared(), &a, &b, &Deltas::default()).expect("honest");
        for e in segment.entries() {
            rec.record(e.round_k, e.phase, e.obs.clone()).expect("fresh");
        }
    }
    (
        rec,
        p_s,
        KeyPalettes {
            a: p.clone(),
            b: p,
        },
    )
}

pub fn experiment_config(rounds: u64) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
palette_s = [1000, 2000, 3000, 4000]
palette_a = [1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000]
palette_b = [1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000]
palette_ua = ["5", "-1/2", "3"]
palette_ub = ["1", "7"]
rounds = {rounds}
seed = 1
"#
    ))
    .expect("valid config")
}
