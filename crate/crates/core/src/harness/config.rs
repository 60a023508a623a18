//! Experiment configuration: a flat TOML table with typed keys.
//!
//! ```toml
//! palette_s  = ["1000", "2000"]      # exact rationals, as strings or integers
//! palette_a  = [1000, 2000, 3000, 4000]
//! palette_b  = [1000, 2000, 3000, 4000]
//! palette_ua = ["5", "-1/2"]
//! palette_ub = [1]
//! rounds     = 4
//! delta_ua   = "1"
//! delta_ub   = "1"
//! mode       = "circuit"             # circuit | expander-plain | expander-modular
//! modulus    = 16                    # expander-modular only
//! sigma_u    = 0.0
//! sigma_i    = 0.0
//! tolerance  = "0"
//! attack_current = "1/1000000"       # optional
//! attack_rounds  = [0, 2]            # optional, default every round
//! compromise = "none"                # none | rs-before | rs-after | rs-and-authkey
//! mac        = "hmac-sha256"         # hmac-sha256 | hmac-sha512
//! sampling   = "full"                # full | interior
//! transport  = "memory"              # memory | socket
//! seed       = 42
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuit::{Current, Voltage};
use crate::defense::{InjectionScenario, MacAlgorithm};
use crate::eavesdropper::KeyPalettes;
use crate::entropy::{ExpansionMode, Sampling, MAX_SECRET_PALETTE};
use crate::exact::{parse_rational, serde_rational, to_f64, Rational};
use crate::expander::Modulus;
use crate::protocol::{Deltas, Palette};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "KEXLAB_SEED";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// All problems found in one configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<FieldError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Compromise {
    #[default]
    None,
    /// Eve learns `R_S` before the first round.
    RsBefore,
    /// Eve learns `R_S` only after the last round.
    RsAfter,
    /// Eve holds `R_S` and the authentication key.
    RsAndAuthkey,
}

impl Compromise {
    pub fn knows_rs(self) -> bool {
        self != Compromise::None
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    #[default]
    Memory,
    Socket,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigPalettes {
    pub s: Palette,
    pub a: Palette,
    pub b: Palette,
    pub ua: Palette,
    pub ub: Palette,
}

impl ConfigPalettes {
    pub fn key_palettes(&self) -> KeyPalettes {
        KeyPalettes {
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }
}

/// Public palettes read from their own file or from an experiment config;
/// other keys are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaletteFile {
    pub s: Option<Palette>,
    pub key: KeyPalettes,
}

#[derive(Deserialize)]
struct RawPalettes {
    palette_s: Option<Vec<Number>>,
    palette_a: Option<Vec<Number>>,
    palette_b: Option<Vec<Number>>,
}

impl PaletteFile {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigErrors> {
        let raw: RawPalettes = toml::from_str(text).map_err(|e| {
            ConfigErrors(vec![FieldError {
                field: "<file>".into(),
                message: e.message().to_string(),
            }])
        })?;
        let mut c = Collector(Vec::new());
        let s = raw
            .palette_s
            .is_some()
            .then(|| c.palette("palette_s", &raw.palette_s))
            .flatten();
        let a = c.palette("palette_a", &raw.palette_a);
        let b = c.palette("palette_b", &raw.palette_b);
        match (a, b) {
            (Some(a), Some(b)) if c.0.is_empty() => Ok(Self {
                s,
                key: KeyPalettes { a, b },
            }),
            _ => Err(ConfigErrors(c.0)),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigErrors(vec![FieldError {
                field: "<file>".into(),
                message: format!("{}: {e}", path.display()),
            }])
        })?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub sigma_u: f64,
    pub sigma_i: f64,
}

impl Noise {
    pub fn enabled(&self) -> bool {
        self.sigma_u > 0.0 || self.sigma_i > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub palettes: ConfigPalettes,
    pub rounds: u64,
    pub deltas: Deltas,
    pub mode: ExpansionMode,
    pub noise: Noise,
    #[serde(with = "serde_rational")]
    pub tolerance: Rational,
    pub attack: Option<InjectionScenario>,
    pub compromise: Compromise,
    pub mac: MacAlgorithm,
    pub sampling: Sampling,
    pub transport: TransportKind,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
enum Number {
    Int(i64),
    Text(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    palette_s: Option<Vec<Number>>,
    palette_a: Option<Vec<Number>>,
    palette_b: Option<Vec<Number>>,
    palette_ua: Option<Vec<Number>>,
    palette_ub: Option<Vec<Number>>,
    rounds: Option<i64>,
    delta_ua: Option<Number>,
    delta_ub: Option<Number>,
    mode: Option<String>,
    modulus: Option<Number>,
    sigma_u: Option<f64>,
    sigma_i: Option<f64>,
    tolerance: Option<Number>,
    attack_current: Option<Number>,
    attack_rounds: Option<Vec<u64>>,
    compromise: Option<String>,
    mac: Option<String>,
    sampling: Option<String>,
    transport: Option<String>,
    seed: Option<u64>,
}

struct Collector(Vec<FieldError>);

impl Collector {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.0.push(FieldError {
            field: field.to_string(),
            message: message.into(),
        });
    }

    fn rational(&mut self, field: &str, n: &Number) -> Option<Rational> {
        match n {
            Number::Int(i) => Some(Rational::from_integer((*i).into())),
            Number::Text(t) => match parse_rational(t) {
                Ok(r) => Some(r),
                Err(e) => {
                    self.push(field, e.to_string());
                    None
                }
            },
        }
    }

    fn palette(&mut self, field: &str, values: &Option<Vec<Number>>) -> Option<Palette> {
        let Some(values) = values else {
            self.push(field, "required");
            return None;
        };
        let parsed: Option<Vec<Rational>> = values
            .iter()
            .enumerate()
            .map(|(i, v)| self.rational(&format!("{field}[{i}]"), v))
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        match Palette::new(parsed?) {
            Ok(p) => Some(p),
            Err(e) => {
                self.push(field, e.to_string());
                None
            }
        }
    }

    fn choice<T>(&mut self, field: &str, value: &Option<String>, options: &[(&str, T)]) -> Option<T>
    where
        T: Clone,
    {
        let Some(value) = value else {
            return options.first().map(|(_, v)| v.clone());
        };
        match options.iter().find(|(name, _)| name == value) {
            Some((_, v)) => Some(v.clone()),
            None => {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                self.push(field, format!("unknown value {value:?}; expected one of {names:?}"));
                None
            }
        }
    }
}

#[derive(Clone)]
enum ModeName {
    Circuit,
    Plain,
    Modular,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigErrors> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            ConfigErrors(vec![FieldError {
                field: "<file>".into(),
                message: e.message().to_string(),
            }])
        })?;
        Self::from_raw(raw)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigErrors(vec![FieldError {
                field: "<file>".into(),
                message: format!("{}: {e}", path.display()),
            }])
        })?;
        Self::from_toml_str(&text)
    }

    fn from_raw(raw: RawConfig) -> Result<Self, ConfigErrors> {
        let mut c = Collector(Vec::new());
        let s = c.palette("palette_s", &raw.palette_s);
        let a = c.palette("palette_a", &raw.palette_a);
        let b = c.palette("palette_b", &raw.palette_b);
        let ua = c.palette("palette_ua", &raw.palette_ua);
        let ub = c.palette("palette_ub", &raw.palette_ub);

        let rounds = match raw.rounds {
            None => Some(1),
            Some(r) if r >= 0 => Some(r as u64),
            Some(r) => {
                c.push("rounds", format!("must be >= 0, got {r}"));
                None
            }
        };

        let mut delta = |field: &str, v: &Option<Number>| -> Option<Voltage> {
            let d = match v {
                None => Rational::from_integer(1.into()),
                Some(n) => c.rational(field, n)?,
            };
            if d.is_zero() {
                c.push(field, "must be nonzero");
                return None;
            }
            Some(Voltage(d))
        };
        let delta_ua = delta("delta_ua", &raw.delta_ua);
        let delta_ub = delta("delta_ub", &raw.delta_ub);

        let mode_name = c.choice(
            "mode",
            &raw.mode,
            &[
                ("circuit", ModeName::Circuit),
                ("expander-plain", ModeName::Plain),
                ("expander-modular", ModeName::Modular),
            ],
        );
        let mode = match mode_name {
            Some(ModeName::Circuit) => Some(ExpansionMode::Circuit),
            Some(ModeName::Plain) => Some(ExpansionMode::ExpanderPlain),
            Some(ModeName::Modular) => match &raw.modulus {
                None => {
                    c.push("modulus", "required for expander-modular");
                    None
                }
                Some(n) => c.rational("modulus", n).and_then(|q| {
                    let q = q.is_integer().then(|| q.to_integer());
                    match q.map(Modulus::new) {
                        Some(Ok(m)) => Some(ExpansionMode::ExpanderModular(m)),
                        Some(Err(e)) => {
                            c.push("modulus", e.to_string());
                            None
                        }
                        None => {
                            c.push("modulus", "must be an integer");
                            None
                        }
                    }
                }),
            },
            None => None,
        };

        let mut sigma = |field: &str, v: Option<f64>| -> Option<f64> {
            let v = v.unwrap_or(0.0);
            if !(v.is_finite() && v >= 0.0) {
                c.push(field, format!("must be finite and >= 0, got {v}"));
                return None;
            }
            Some(v)
        };
        let sigma_u = sigma("sigma_u", raw.sigma_u);
        let sigma_i = sigma("sigma_i", raw.sigma_i);

        let tolerance = match &raw.tolerance {
            None => Some(Rational::zero()),
            Some(n) => c.rational("tolerance", n).and_then(|t| {
                if t.is_negative() {
                    c.push("tolerance", "must be >= 0");
                    None
                } else {
                    Some(t)
                }
            }),
        };

        let attack = match &raw.attack_current {
            None => {
                if raw.attack_rounds.is_some() {
                    c.push("attack_rounds", "requires attack_current");
                }
                None
            }
            Some(n) => c.rational("attack_current", n).and_then(|i| {
                let rounds: BTreeSet<u64> = match &raw.attack_rounds {
                    Some(list) => list.iter().copied().collect(),
                    None => (0..rounds.unwrap_or(0)).collect(),
                };
                match InjectionScenario::new(Current(i), rounds) {
                    Ok(s) => Some(s),
                    Err(e) => {
                        c.push("attack_current", e.to_string());
                        None
                    }
                }
            }),
        };

        let compromise = c.choice(
            "compromise",
            &raw.compromise,
            &[
                ("none", Compromise::None),
                ("rs-before", Compromise::RsBefore),
                ("rs-after", Compromise::RsAfter),
                ("rs-and-authkey", Compromise::RsAndAuthkey),
            ],
        );
        let mac = c.choice(
            "mac",
            &raw.mac,
            &[
                ("hmac-sha256", MacAlgorithm::HmacSha256),
                ("hmac-sha512", MacAlgorithm::HmacSha512),
            ],
        );
        let sampling = c.choice(
            "sampling",
            &raw.sampling,
            &[("full", Sampling::Full), ("interior", Sampling::Interior)],
        );
        let transport = c.choice(
            "transport",
            &raw.transport,
            &[("memory", TransportKind::Memory), ("socket", TransportKind::Socket)],
        );

        if let (Some(s), Some(a), Some(b), Some(mode)) = (&s, &a, &b, &mode) {
            check_palettes(&mut c, s, a, b, mode);
        }
        if let (Some(mode), Some(_)) = (&mode, &attack) {
            if *mode != ExpansionMode::Circuit {
                c.push("attack_current", "current injection needs mode = \"circuit\"");
            }
        }
        if let (Some(su), Some(si), Some(tol)) = (sigma_u, sigma_i, &tolerance) {
            // Endpoint differences carry sqrt(2) times the per-sample sigma.
            let needed = 6.0 * std::f64::consts::SQRT_2 * su.max(si);
            if to_f64(tol) < needed {
                c.push(
                    "tolerance",
                    format!("with noise enabled must be >= 6 sigma of the endpoint difference ({needed:e})"),
                );
            }
        }

        if !c.0.is_empty() {
            return Err(ConfigErrors(c.0));
        }
        Ok(ExperimentConfig {
            palettes: ConfigPalettes {
                s: s.expect("validated"),
                a: a.expect("validated"),
                b: b.expect("validated"),
                ua: ua.expect("validated"),
                ub: ub.expect("validated"),
            },
            rounds: rounds.expect("validated"),
            deltas: Deltas {
                alice: delta_ua.expect("validated"),
                bob: delta_ub.expect("validated"),
            },
            mode: mode.expect("validated"),
            noise: Noise {
                sigma_u: sigma_u.expect("validated"),
                sigma_i: sigma_i.expect("validated"),
            },
            tolerance: tolerance.expect("validated"),
            attack,
            compromise: compromise.expect("validated"),
            mac: mac.expect("validated"),
            sampling: sampling.expect("validated"),
            transport: transport.expect("validated"),
            seed: raw.seed.unwrap_or(0),
        })
    }

    /// Applies `KEXLAB_SEED` if it is set.
    pub fn apply_env_seed(&mut self) -> Result<(), ConfigErrors> {
        if let Ok(value) = std::env::var(SEED_ENV) {
            self.seed = value.trim().parse().map_err(|_| {
                ConfigErrors(vec![FieldError {
                    field: SEED_ENV.into(),
                    message: format!("not a u64: {value:?}"),
                }])
            })?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Flat TOML equivalent of this configuration.
    pub fn to_toml(&self) -> String {
        let list = |p: &Palette| {
            let items: Vec<String> = p.values().iter().map(|v| format!("\"{v}\"")).collect();
            format!("[{}]", items.join(", "))
        };
        let mut out = String::new();
        let p = &self.palettes;
        out += &format!("palette_s = {}\n", list(&p.s));
        out += &format!("palette_a = {}\n", list(&p.a));
        out += &format!("palette_b = {}\n", list(&p.b));
        out += &format!("palette_ua = {}\n", list(&p.ua));
        out += &format!("palette_ub = {}\n", list(&p.ub));
        out += &format!("rounds = {}\n", self.rounds);
        out += &format!("delta_ua = \"{}\"\n", self.deltas.alice.volts());
        out += &format!("delta_ub = \"{}\"\n", self.deltas.bob.volts());
        match &self.mode {
            ExpansionMode::Circuit => out += "mode = \"circuit\"\n",
            ExpansionMode::ExpanderPlain => out += "mode = \"expander-plain\"\n",
            ExpansionMode::ExpanderModular(q) => {
                out += "mode = \"expander-modular\"\n";
                out += &format!("modulus = \"{}\"\n", q.value());
            }
        }
        out += &format!("sigma_u = {:?}\n", self.noise.sigma_u);
        out += &format!("sigma_i = {:?}\n", self.noise.sigma_i);
        out += &format!("tolerance = \"{}\"\n", self.tolerance);
        if let Some(attack) = &self.attack {
            out += &format!("attack_current = \"{}\"\n", attack.i_inject.amperes());
            let rounds: Vec<String> = attack.active_rounds.iter().map(u64::to_string).collect();
            out += &format!("attack_rounds = [{}]\n", rounds.join(", "));
        }
        out += &format!("compromise = \"{}\"\n", variant_name(&self.compromise));
        out += &format!("mac = \"{}\"\n", variant_name(&self.mac));
        out += &format!("sampling = \"{}\"\n", variant_name(&self.sampling));
        out += &format!("transport = \"{}\"\n", variant_name(&self.transport));
        out += &format!("seed = {}\n", self.seed);
        out
    }
}

fn variant_name<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        other => panic!("expected a unit variant, got {other:?}"),
    }
}

fn check_palettes(c: &mut Collector, s: &Palette, a: &Palette, b: &Palette, mode: &ExpansionMode) {
    if s.len() > MAX_SECRET_PALETTE {
        c.push(
            "palette_s",
            format!("{} values exceeds the enumeration cap of {MAX_SECRET_PALETTE}", s.len()),
        );
    }
    let named = [("palette_s", s), ("palette_a", a), ("palette_b", b)];
    match mode {
        ExpansionMode::Circuit => {
            for (field, p) in named {
                if !p.all_positive() {
                    c.push(field, "resistances must be > 0");
                }
            }
        }
        ExpansionMode::ExpanderPlain => {
            for (field, p) in named {
                if !p.values().iter().all(|v| v.is_integer()) {
                    c.push(field, "expander values must be integers");
                }
            }
        }
        ExpansionMode::ExpanderModular(q) => {
            let q = Rational::from_integer(q.value().clone());
            for (field, p) in named {
                if !p
                    .values()
                    .iter()
                    .all(|v| v.is_integer() && !v.is_negative() && *v < q)
                {
                    c.push(field, "modular values must be integers in [0, modulus)");
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{int, ratio};

    const E1: &str = r#"
palette_s = ["1000", "2000"]
palette_a = [1000, 2000, 3000, 4000]
palette_b = [1000, 2000, 3000, 4000]
palette_ua = ["5"]
palette_ub = ["1"]
rounds = 1
seed = 7
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(E1).unwrap();
        assert_eq!(cfg.rounds, 1);
        assert_eq!(cfg.mode, ExpansionMode::Circuit);
        assert_eq!(cfg.deltas, Deltas::default());
        assert_eq!(cfg.compromise, Compromise::None);
        assert_eq!(cfg.tolerance, int(0));
        assert!(cfg.attack.is_none());
        assert_eq!(cfg.palettes.a.bit_width(), 2);
    }

    #[test]
    fn reports_every_bad_field() {
        let text = r#"
palette_s = ["0", "2000"]
palette_a = ["1/0"]
palette_b = [1, 1]
palette_ua = [1]
rounds = -1
delta_ua = "0"
mode = "quantum"
sigma_u = -1.0
compromise = "sometimes"
"#;
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        let fields: Vec<&str> = err.0.iter().map(|e| e.field.as_str()).collect();
        for f in [
            "palette_a[0]",
            "palette_b",
            "palette_ub",
            "rounds",
            "delta_ua",
            "mode",
            "sigma_u",
            "compromise",
        ] {
            assert!(fields.contains(&f), "{f} missing from {fields:?}");
        }
    }

    #[test]
    fn circuit_needs_positive_resistances() {
        let text = E1.replace("[\"1000\", \"2000\"]", "[\"0\", \"2000\"]");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.0[0].field, "palette_s");
    }

    #[test]
    fn modular_mode_requires_modulus_and_range() {
        let text = format!("{E1}mode = \"expander-modular\"\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.0[0].field, "modulus");
        let text = format!("{E1}mode = \"expander-modular\"\nmodulus = 16\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.0.iter().all(|e| e.message.contains("[0, modulus)")));
    }

    #[test]
    fn attack_defaults_to_every_round() {
        let text = E1.replace("rounds = 1", "rounds = 3") + "attack_current = \"1/1000000\"\n";
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let attack = cfg.attack.unwrap();
        assert_eq!(attack.i_inject.amperes(), &ratio(1, 1_000_000));
        assert_eq!(attack.active_rounds.len(), 3);
    }

    #[test]
    fn noise_needs_tolerance() {
        let text = format!("{E1}sigma_i = 1e-9\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert_eq!(err.0[0].field, "tolerance");
        let text = format!("{text}tolerance = \"1/1000000\"\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_ok());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let text = E1.to_string() + "attack_current = \"1/3\"\ncompromise = \"rs-and-authkey\"\n";
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn palette_file_accepts_full_config() {
        let pf = PaletteFile::from_toml_str(E1).unwrap();
        assert_eq!(pf.s.unwrap().len(), 2);
        assert_eq!(pf.key.a.len(), 4);
        let pf = PaletteFile::from_toml_str("palette_a = [1]\npalette_b = [2, 3]\n").unwrap();
        assert!(pf.s.is_none());
        assert!(PaletteFile::from_toml_str("palette_a = [1]\n").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml_str(&format!("{E1}colour = 3\n")).unwrap_err();
        assert_eq!(err.0[0].field, "<file>");
    }
}
