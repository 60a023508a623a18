use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use num_bigint::BigInt;

use kexlab_core::defense::InjectionScenario;
use kexlab_core::eavesdropper::EveRecording;
use kexlab_core::entropy::{brute_force_posterior, expander_posterior, ExpansionMode};
use kexlab_core::exact::{format_rational, parse_rational};
use kexlab_core::expander::{draw_randoms, expand, recover_partner_randoms, ExpanderMessage, Modulus};
use kexlab_core::harness::config::SEED_ENV;
use kexlab_core::harness::experiment::x_values_from_messages;
use kexlab_core::harness::{
    replay_attack, run_experiment, Compromise, ExperimentConfig, ExperimentOutcome, PaletteFile,
    TranscriptFile,
};
use kexlab_core::{Current, Party};

/// Exit status when an analysis raised an alarm.
const EXIT_ALARM: u8 = 1;
/// Exit status for invalid input or a failed operation.
const EXIT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "kexlab", version, about = "Resistive key-exchange laboratory")]
struct Cli {
    /// Print machine-readable JSON instead of the human summary.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write transcript.jsonl and report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed and KEXLAB_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crack a stored transcript with a revealed shared resistance.
    Crack {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        rs: String,
        /// TOML with palette_a and palette_b (an experiment config works).
        #[arg(long)]
        palettes: PathBuf,
    },
    /// Brute-force posterior over the shared resistance palette.
    Entropy {
        #[arg(long)]
        transcript: PathBuf,
        /// TOML with palette_s, palette_a and palette_b.
        #[arg(long)]
        palettes: PathBuf,
        /// Report the posterior after every round prefix.
        #[arg(long)]
        per_round: bool,
    },
    /// Compose expander sums for random values and check the inverse.
    Expander {
        #[arg(long)]
        rs: String,
        #[arg(long)]
        modulus: Option<String>,
        #[arg(long)]
        count: usize,
        /// Upper bound of the random draws without a modulus.
        #[arg(long, default_value_t = 1_000_000)]
        bound: u64,
        #[arg(long)]
        seed: Option<u64>,
        /// Use these values instead of random draws; repeat `count` times.
        #[arg(long = "random")]
        randoms: Vec<String>,
    },
    /// Run an experiment with a constant current injected on the line.
    Inject {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        current: String,
        #[arg(long, value_enum)]
        compromise: Option<CompromiseArg>,
    },
    /// Check that a transcript file parses and is well ordered.
    VerifyTranscript { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum CompromiseArg {
    None,
    RsBefore,
    RsAfter,
    RsAndAuthkey,
}

impl From<CompromiseArg> for Compromise {
    fn from(c: CompromiseArg) -> Self {
        match c {
            CompromiseArg::None => Compromise::None,
            CompromiseArg::RsBefore => Compromise::RsBefore,
            CompromiseArg::RsAfter => Compromise::RsAfter,
            CompromiseArg::RsAndAuthkey => Compromise::RsAndAuthkey,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_ALARM),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).context("invalid configuration")?;
    cfg.apply_env_seed().context("invalid configuration")?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn report(cli: &Cli, outcome: &ExperimentOutcome) -> Result<bool> {
    if cli.json {
        print_json(&outcome.report)?;
    } else {
        print!("{}", outcome.report.summary());
    }
    Ok(!outcome.report.alarm)
}

/// Returns `Ok(false)` when the command completed but raised an alarm.
fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load_config(config, *seed)?;
            let outcome = run_experiment(&cfg)?;
            outcome
                .write_to(out)
                .with_context(|| format!("writing to {}", out.display()))?;
            report(cli, &outcome)
        }
        Command::Crack {
            transcript,
            rs,
            palettes,
        } => {
            let r_s = parse_rational(rs)?;
            let palettes = PaletteFile::load(palettes)?;
            let crack = replay_attack(transcript, &r_s, &palettes.key)?;
            if cli.json {
                print_json(&crack)?;
            } else {
                println!("r_s     {}", format_rational(&crack.r_s));
                println!("rounds  {}", crack.rounds.len());
                for r in &crack.rounds {
                    println!(
                        "  round {:>4}  R_A={} R_B={} U_A={} U_B={}",
                        r.round_k,
                        format_rational(r.r_a.ohms()),
                        format_rational(r.r_b.ohms()),
                        format_rational(r.u_a.volts()),
                        format_rational(r.u_b.volts()),
                    );
                }
                println!("key     {}", crack.key.to_bit_string());
            }
            Ok(true)
        }
        Command::Entropy {
            transcript,
            palettes,
            per_round,
        } => {
            let palettes = PaletteFile::load(palettes)?;
            let Some(p_s) = palettes.s else {
                bail!("palette file needs palette_s");
            };
            let file = TranscriptFile::load(transcript)?;
            let x_values = x_values_from_messages(&file.expander);
            let modulus = file.expander.first().and_then(|m| m.modulus.clone());
            let rounds = if file.expander.is_empty() {
                file.transcript.rounds()
            } else {
                x_values.iter().map(|x| x.round_k).collect()
            };
            let limits: Vec<u64> = if *per_round {
                rounds.iter().map(|r| r + 1).collect()
            } else {
                vec![rounds.last().map_or(0, |r| r + 1)]
            };
            let mut reports = Vec::new();
            for limit in limits {
                let report = if file.expander.is_empty() {
                    let prefix = file.transcript.prefix_rounds(limit);
                    brute_force_posterior(&EveRecording::from_transcript(&prefix)?, &p_s, &palettes.key)?
                } else {
                    let prefix: Vec<_> =
                        x_values.iter().filter(|x| x.round_k < limit).cloned().collect();
                    expander_posterior(&prefix, &p_s, &palettes.key, modulus.as_ref())?
                };
                reports.push(report);
            }
            if cli.json {
                print_json(&reports)?;
            } else {
                println!("{:>6}  {:>8}  {:>8}  {:>10}", "rounds", "h_rs", "h_key", "consistent");
                for r in &reports {
                    println!(
                        "{:>6}  {:>8.3}  {:>8.3}  {:>10}",
                        r.rounds_used,
                        r.h_rs_bits,
                        r.h_key_bits,
                        r.consistent().count()
                    );
                }
                if let Some(last) = reports.last() {
                    print!("{}", last.summary_table());
                }
            }
            Ok(true)
        }
        Command::Expander {
            rs,
            modulus,
            count,
            bound,
            seed,
            randoms,
        } => {
            let r_s: BigInt = rs.parse().context("--rs must be an integer")?;
            let modulus = match modulus {
                Some(q) => Some(Modulus::new(q.parse().context("--modulus must be an integer")?)?),
                None => None,
            };
            let seed = match seed {
                Some(s) => *s,
                None => std::env::var(SEED_ENV)
                    .ok()
                    .map(|v| v.trim().parse())
                    .transpose()
                    .with_context(|| format!("{SEED_ENV} must be a u64"))?
                    .unwrap_or(0),
            };
            let upper = match &modulus {
                Some(q) => u64::try_from(q.value()).context("modulus too large for sampling")?,
                None => *bound,
            };
            let randoms: Vec<BigInt> = if randoms.is_empty() {
                draw_randoms(*count, upper, seed)
            } else {
                if randoms.len() != *count {
                    bail!("--count {count} but {} --random values", randoms.len());
                }
                randoms
                    .iter()
                    .map(|r| r.parse().context("--random must be an integer"))
                    .collect::<Result<_>>()?
            };
            let x_list = expand(&r_s, &randoms, modulus.as_ref())?;
            let msg = ExpanderMessage {
                sender: Party::Alice,
                first_round: 0,
                modulus,
                x_list,
            };
            let recovered = recover_partner_randoms(&msg, &r_s);
            let ok = recovered == randoms;
            if cli.json {
                print_json(&serde_json::json!({
                    "message": msg,
                    "randoms": randoms.iter().map(ToString::to_string).collect::<Vec<_>>(),
                    "inverse_ok": ok,
                }))?;
            } else {
                println!("{:>6}  {:>24}  {:>24}", "round", "random", "x");
                for (k, (r, x)) in randoms.iter().zip(&msg.x_list).enumerate() {
                    println!("{k:>6}  {r:>24}  {x:>24}");
                }
                println!("inverse {}", if ok { "ok" } else { "MISMATCH" });
            }
            Ok(ok)
        }
        Command::Inject {
            config,
            current,
            compromise,
        } => {
            let mut cfg = load_config(config, None)?;
            if cfg.mode != ExpansionMode::Circuit {
                bail!("inject needs mode = \"circuit\"");
            }
            let i = parse_rational(current)?;
            cfg.attack = Some(InjectionScenario::new(Current(i), (0..cfg.rounds).collect())?);
            if let Some(c) = compromise {
                cfg.compromise = (*c).into();
            }
            let outcome = run_experiment(&cfg)?;
            report(cli, &outcome)
        }
        Command::VerifyTranscript { path } => {
            let file = TranscriptFile::load(path)
                .with_context(|| format!("{} is not a valid transcript", path.display()))?;
            if cli.json {
                print_json(&serde_json::json!({
                    "config_hash": file.config_hash,
                    "observations": file.transcript.len(),
                    "rounds": file.transcript.rounds().len(),
                    "expander_messages": file.expander.len(),
                }))?;
            } else {
                println!(
                    "ok  {} observations, {} rounds, {} expander messages, config {}",
                    file.transcript.len(),
                    file.transcript.rounds().len(),
                    file.expander.len(),
                    file.config_hash
                );
            }
            Ok(true)
        }
    }
}
