//! Framed wire format.
//!
//! ```text
//! frame   = length:u32be  type:u8  payload[length]
//! type    = 1 ANALOG_SAMPLE | 2 AUTH_REPORT | 3 EXPANDER_MSG
//! integer = fixed-width big-endian
//! bigint  = len:u32be  two's-complement big-endian bytes
//! rational= numerator:bigint  denominator:bigint   (reduced, denominator > 0)
//! ```
//!
//! `length` counts payload bytes only. Fields are written in declaration
//! order, so equal values always produce identical bytes.

use std::io::{self, Read, Write};

use num_bigint::BigInt;
use num_traits::Signed;
use thiserror::Error;

use crate::circuit::{Current, LineObservation, Voltage};
use crate::defense::{EndpointReport, TAG_LEN};
use crate::exact::Rational;
use crate::expander::{ExpanderMessage, Modulus};
use crate::protocol::{Party, Phase};

/// Refuse frames larger than this many payload bytes.
pub const MAX_FRAME_PAYLOAD: usize = 1 << 24;

pub const ANALOG_SAMPLE: u8 = 1;
pub const AUTH_REPORT: u8 = 2;
pub const EXPANDER_MSG: u8 = 3;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("unexpected end of data")]
    Truncated,
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("frame payload of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One line sample as carried to each endpoint and to the tap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalogSample {
    pub round_k: u64,
    pub phase: Phase,
    pub obs: LineObservation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    AnalogSample(AnalogSample),
    AuthReport(EndpointReport),
    Expander(ExpanderMessage),
}

impl WireMessage {
    pub fn type_code(&self) -> u8 {
        match self {
            WireMessage::AnalogSample(_) => ANALOG_SAMPLE,
            WireMessage::AuthReport(_) => AUTH_REPORT,
            WireMessage::Expander(_) => EXPANDER_MSG,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut w = CanonicalWriter::default();
        match self {
            WireMessage::AnalogSample(s) => {
                w.u64(s.round_k);
                w.u8(s.phase.code());
                w.rational(s.obs.u());
                w.rational(s.obs.i());
            }
            WireMessage::AuthReport(r) => {
                write_report_body(&mut w, r);
                w.raw(&r.auth_tag);
            }
            WireMessage::Expander(m) => {
                w.u8(m.sender.code());
                w.u64(m.first_round);
                match &m.modulus {
                    None => w.u8(0),
                    Some(q) => {
                        w.u8(1);
                        w.bigint(q.value());
                    }
                }
                w.u32(m.x_list.len() as u32);
                for x in &m.x_list {
                    w.bigint(x);
                }
            }
        }
        w.into_bytes()
    }

    pub fn from_payload(type_code: u8, payload: &[u8]) -> Result<Self, WireError> {
        let mut r = CanonicalReader::new(payload);
        let msg = match type_code {
            ANALOG_SAMPLE => {
                let round_k = r.u64()?;
                let phase = r.phase()?;
                let u = r.rational()?;
                let i = r.rational()?;
                WireMessage::AnalogSample(AnalogSample {
                    round_k,
                    phase,
                    obs: LineObservation::new(u, i),
                })
            }
            AUTH_REPORT => {
                let party = r.party()?;
                let round_k = r.u64()?;
                let phase = r.phase()?;
                let u_end = Voltage(r.rational()?);
                let i_end = Current(r.rational()?);
                let mut auth_tag = [0u8; TAG_LEN];
                auth_tag.copy_from_slice(r.take(TAG_LEN)?);
                WireMessage::AuthReport(EndpointReport {
                    party,
                    round_k,
                    phase,
                    u_end,
                    i_end,
                    auth_tag,
                })
            }
            EXPANDER_MSG => {
                let sender = r.party()?;
                let first_round = r.u64()?;
                let modulus = match r.u8()? {
                    0 => None,
                    1 => Some(
                        Modulus::new(r.bigint()?).map_err(|_| WireError::Invalid("modulus"))?,
                    ),
                    _ => return Err(WireError::Invalid("modulus flag")),
                };
                let count = r.u32()? as usize;
                if count > payload.len() {
                    return Err(WireError::Invalid("x_list length"));
                }
                let x_list = (0..count).map(|_| r.bigint()).collect::<Result<_, _>>()?;
                WireMessage::Expander(ExpanderMessage {
                    sender,
                    first_round,
                    modulus,
                    x_list,
                })
            }
            other => return Err(WireError::UnknownType(other)),
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Bytes covered by an endpoint report's authentication tag.
pub fn report_body(report: &EndpointReport) -> Vec<u8> {
    let mut w = CanonicalWriter::default();
    write_report_body(&mut w, report);
    w.into_bytes()
}

fn write_report_body(w: &mut CanonicalWriter, r: &EndpointReport) {
    w.u8(r.party.code());
    w.u64(r.round_k);
    w.u8(r.phase.code());
    w.rational(r.u_end.volts());
    w.rational(r.i_end.amperes());
}

pub fn encode_frame(msg: &WireMessage) -> Vec<u8> {
    let payload = msg.payload();
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(msg.type_code());
    out.extend_from_slice(&payload);
    out
}

/// Decodes one frame from the front of `bytes`; returns it and the bytes used.
pub fn decode_frame(bytes: &[u8]) -> Result<(WireMessage, usize), WireError> {
    if bytes.len() < 5 {
        return Err(WireError::Truncated);
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let end = 5 + len;
    if bytes.len() < end {
        return Err(WireError::Truncated);
    }
    Ok((WireMessage::from_payload(bytes[4], &bytes[5..end])?, end))
}

pub fn write_frame<W: Write>(out: &mut W, msg: &WireMessage) -> Result<(), WireError> {
    out.write_all(&encode_frame(msg))?;
    out.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(input: &mut R) -> Result<WireMessage, WireError> {
    let mut header = [0u8; 5];
    input.read_exact(&mut header).map_err(eof_as_truncated)?;
    let len = u32::from_be_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let mut payload = vec![0u8; len];
    input.read_exact(&mut payload).map_err(eof_as_truncated)?;
    WireMessage::from_payload(header[4], &payload)
}

fn eof_as_truncated(e: io::Error) -> WireError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        WireError::Truncated
    } else {
        WireError::Io(e)
    }
}

#[derive(Default)]
struct CanonicalWriter {
    buf: Vec<u8>,
}

impl CanonicalWriter {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    fn bigint(&mut self, v: &BigInt) {
        let bytes = v.to_signed_bytes_be();
        self.u32(bytes.len() as u32);
        self.raw(&bytes);
    }

    fn rational(&mut self, v: &Rational) {
        self.bigint(v.numer());
        self.bigint(v.denom());
    }

    fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

struct CanonicalReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> CanonicalReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let slice = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn party(&mut self) -> Result<Party, WireError> {
        Party::from_code(self.u8()?).ok_or(WireError::Invalid("party"))
    }

    fn phase(&mut self) -> Result<Phase, WireError> {
        Phase::from_code(self.u8()?).ok_or(WireError::Invalid("phase"))
    }

    fn bigint(&mut self) -> Result<BigInt, WireError> {
        let len = self.u32()? as usize;
        if len == 0 {
            return Err(WireError::Invalid("empty integer"));
        }
        Ok(BigInt::from_signed_bytes_be(self.take(len)?))
    }

    fn rational(&mut self) -> Result<Rational, WireError> {
        let numer = self.bigint()?;
        let denom = self.bigint()?;
        if !denom.is_positive() {
            return Err(WireError::Invalid("denominator"));
        }
        let value = Rational::new(numer.clone(), denom.clone());
        // Only the reduced form is canonical.
        if *value.numer() != numer || *value.denom() != denom {
            return Err(WireError::Invalid("unreduced rational"));
        }
        Ok(value)
    }

    fn finish(self) -> Result<(), WireError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}
