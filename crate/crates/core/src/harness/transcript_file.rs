//! Transcript files: one JSON object per line.
//!
//! ```text
//! {"record":"header","format_version":1,"config_hash":"…"}
//! {"record":"observation","round":0,"phase":"BASELINE","u_c":"23/7","i_c":"1/1750","t":0}
//! {"record":"expander","sender":"Alice","first_round":0,"modulus":"16","x_list":["5"],"t":1}
//! ```
//!
//! `t` numbers the records after the header from zero. Every line ends in a
//! newline, so a missing final newline marks a truncated file.

use std::fs;
use std::io;
use std::path::Path;

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::LineObservation;
use crate::exact::{format_rational, parse_rational, serde_bigint_vec, Rational};
use crate::expander::{ExpanderMessage, Modulus};
use crate::protocol::{Party, Phase, Transcript, TranscriptEntry};

pub const FORMAT_VERSION: u32 = 1;

/// Problem with one record; record 0 is the header.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("record {record}: {message}")]
    Record { record: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FormatError {
    fn at(record: usize, message: impl Into<String>) -> Self {
        FormatError::Record {
            record,
            message: message.into(),
        }
    }

    pub fn record(&self) -> Option<usize> {
        match self {
            FormatError::Record { record, .. } => Some(*record),
            FormatError::Io(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case", deny_unknown_fields)]
enum Line {
    Header {
        format_version: u32,
        config_hash: String,
    },
    Observation {
        round: u64,
        phase: Phase,
        u_c: String,
        i_c: String,
        t: u64,
    },
    Expander {
        sender: Party,
        first_round: u64,
        modulus: Option<Modulus>,
        #[serde(with = "serde_bigint_vec")]
        x_list: Vec<BigInt>,
        t: u64,
    },
}

/// Contents of a transcript file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TranscriptFile {
    pub config_hash: String,
    pub transcript: Transcript,
    pub expander: Vec<ExpanderMessage>,
}

impl TranscriptFile {
    pub fn new(config_hash: impl Into<String>, transcript: Transcript) -> Self {
        Self {
            config_hash: config_hash.into(),
            transcript,
            expander: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut lines = vec![Line::Header {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
        }];
        let mut t = 0u64;
        for e in self.transcript.entries() {
            lines.push(Line::Observation {
                round: e.round_k,
                phase: e.phase,
                u_c: format_rational(e.obs.u()),
                i_c: format_rational(e.obs.i()),
                t,
            });
            t += 1;
        }
        for msg in &self.expander {
            lines.push(Line::Expander {
                sender: msg.sender,
                first_round: msg.first_round,
                modulus: msg.modulus.clone(),
                x_list: msg.x_list.clone(),
                t,
            });
            t += 1;
        }
        let mut out = String::new();
        for line in &lines {
            out += &serde_json::to_string(line).expect("records serialize");
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut lines: Vec<&str> = text.split('\n').collect();
        // split leaves an empty final piece after a trailing newline.
        let complete = lines.last() == Some(&"");
        if complete {
            lines.pop();
        }
        if lines.is_empty() {
            return Err(FormatError::at(0, "missing header"));
        }
        if !complete {
            return Err(FormatError::at(lines.len() - 1, "truncated record"));
        }
        let mut out = TranscriptFile::default();
        for (index, raw) in lines.iter().enumerate() {
            let line: Line = serde_json::from_str(raw)
                .map_err(|e| FormatError::at(index, format!("malformed: {e}")))?;
            match (index, line) {
                (
                    0,
                    Line::Header {
                        format_version,
                        config_hash,
                    },
                ) => {
                    if format_version != FORMAT_VERSION {
                        return Err(FormatError::at(
                            0,
                            format!("unsupported format_version {format_version}"),
                        ));
                    }
                    out.config_hash = config_hash;
                }
                (0, _) => return Err(FormatError::at(0, "first record must be the header")),
                (_, Line::Header { .. }) => return Err(FormatError::at(index, "duplicate header")),
                (
                    _,
                    Line::Observation {
                        round,
                        phase,
                        u_c,
                        i_c,
                        t,
                    },
                ) => {
                    check_t(index, t)?;
                    if !out.expander.is_empty() {
                        return Err(FormatError::at(index, "observation after expander records"));
                    }
                    let u_c = canonical(index, "u_c", &u_c)?;
                    let i_c = canonical(index, "i_c", &i_c)?;
                    out.transcript
                        .push(TranscriptEntry {
                            round_k: round,
                            phase,
                            obs: LineObservation::new(u_c, i_c),
                        })
                        .map_err(|e| FormatError::at(index, e.to_string()))?;
                }
                (
                    _,
                    Line::Expander {
                        sender,
                        first_round,
                        modulus,
                        x_list,
                        t,
                    },
                ) => {
                    check_t(index, t)?;
                    out.expander.push(ExpanderMessage {
                        sender,
                        first_round,
                        modulus,
                        x_list,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn canonical(index: usize, field: &str, text: &str) -> Result<Rational, FormatError> {
    let value = parse_rational(text).map_err(|e| FormatError::at(index, format!("{field}: {e}")))?;
    if format_rational(&value) != text {
        return Err(FormatError::at(
            index,
            format!("{field}: {text:?} is not in canonical n/d form"),
        ));
    }
    Ok(value)
}

fn check_t(index: usize, t: u64) -> Result<(), FormatError> {
    if t != index as u64 - 1 {
        return Err(FormatError::at(index, format!("expected t = {}, found {t}", index - 1)));
    }
    Ok(())
}
