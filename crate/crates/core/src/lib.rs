//! Exact-arithmetic laboratory for resistive-loop key exchange: honest
//! parties, a passive eavesdropper that cracks every key once the shared
//! resistance leaks, brute-force entropy accounting, the hardware-free
//! expander equivalent, and the authenticated defense against current
//! injection.

pub mod circuit;
pub mod defense;
pub mod eavesdropper;
pub mod entropy;
pub mod exact;
pub mod expander;
pub mod harness;
pub mod protocol;

pub use circuit::{Current, LineObservation, LoopParams, Resistance, Voltage};
pub use exact::Rational;
pub use protocol::{Key, Palette, Party, Phase, Transcript};
