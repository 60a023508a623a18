//! Simulation harness: configuration, wire framing, transports, transcript
//! files and the end-to-end experiment driver.

pub mod config;
pub mod experiment;
pub mod transcript_file;
pub mod transport;
pub mod wire;

use std::path::Path;

use thiserror::Error;

pub use config::{Compromise, ConfigErrors, ExperimentConfig, PaletteFile};
pub use experiment::{run_experiment, ExperimentOutcome, ExperimentReport};
pub use transcript_file::{FormatError, TranscriptFile};

use crate::circuit::CircuitError;
use crate::defense::DefenseError;
use crate::eavesdropper::{eve_crack_with_secret, CrackResult, EveError, EveRecording, KeyPalettes};
use crate::entropy::EntropyError;
use crate::exact::Rational;
use crate::expander::ExpanderError;
use crate::protocol::ProtocolError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(#[from] ConfigErrors),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Expander(#[from] ExpanderError),
    #[error(transparent)]
    Eve(#[from] EveError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unexpected message: {0}")]
    UnexpectedMessage(&'static str),
}

/// Loads a stored transcript and cracks it with a revealed `R_S`.
pub fn replay_attack(
    transcript_path: &Path,
    r_s: &Rational,
    palettes: &KeyPalettes,
) -> Result<CrackResult, HarnessError> {
    let file = TranscriptFile::load(transcript_path)?;
    let recording = EveRecording::from_transcript(&file.transcript)?;
    Ok(eve_crack_with_secret(&recording, r_s, palettes)?)
}
