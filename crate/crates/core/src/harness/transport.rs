//! Message transports between harness, parties and the eavesdropper's tap.

use std::io::{Read, Write};
use std::sync::mpsc::{self, Receiver, Sender};

use super::config::TransportKind;
use super::wire::{decode_frame, encode_frame, read_frame, write_frame, WireError, WireMessage};

pub trait Transport {
    fn send(&mut self, msg: &WireMessage) -> Result<(), WireError>;
    fn recv(&mut self) -> Result<WireMessage, WireError>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, msg: &WireMessage) -> Result<(), WireError> {
        (**self).send(msg)
    }

    fn recv(&mut self) -> Result<WireMessage, WireError> {
        (**self).recv()
    }
}

/// One end of an in-process channel carrying encoded frames.
pub struct MemoryEnd {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn memory_pair() -> (MemoryEnd, MemoryEnd) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (MemoryEnd { tx: tx_a, rx: rx_a }, MemoryEnd { tx: tx_b, rx: rx_b })
}

impl Transport for MemoryEnd {
    fn send(&mut self, msg: &WireMessage) -> Result<(), WireError> {
        self.tx
            .send(encode_frame(msg))
            .map_err(|_| WireError::Invalid("peer closed"))
    }

    fn recv(&mut self) -> Result<WireMessage, WireError> {
        let frame = self.rx.recv().map_err(|_| WireError::Truncated)?;
        let (msg, used) = decode_frame(&frame)?;
        if used != frame.len() {
            return Err(WireError::Trailing(frame.len() - used));
        }
        Ok(msg)
    }
}

/// Frames over any byte stream, e.g. one end of a Unix socket pair.
pub struct StreamEnd<S> {
    stream: S,
}

impl<S> StreamEnd<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }
}

impl<S: Read + Write> Transport for StreamEnd<S> {
    fn send(&mut self, msg: &WireMessage) -> Result<(), WireError> {
        write_frame(&mut self.stream, msg)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage, WireError> {
        read_frame(&mut self.stream)
    }
}

#[cfg(unix)]
pub fn socket_pair() -> std::io::Result<(
    StreamEnd<std::os::unix::net::UnixStream>,
    StreamEnd<std::os::unix::net::UnixStream>,
)> {
    let (a, b) = std::os::unix::net::UnixStream::pair()?;
    Ok((StreamEnd::new(a), StreamEnd::new(b)))
}

pub type BoxedTransport = Box<dyn Transport + Send>;

pub fn pair(kind: TransportKind) -> Result<(BoxedTransport, BoxedTransport), WireError> {
    match kind {
        TransportKind::Memory => {
            let (a, b) = memory_pair();
            Ok((Box::new(a), Box::new(b)))
        }
        #[cfg(unix)]
        TransportKind::Socket => {
            let (a, b) = socket_pair()?;
            Ok((Box::new(a), Box::new(b)))
        }
        #[cfg(not(unix))]
        TransportKind::Socket => Err(WireError::Invalid("socket transport needs a unix host")),
    }
}

/// Read-only copy of every frame sent through a [`Tapped`] end.
#[derive(Clone)]
pub struct TapSender(Sender<Vec<u8>>);

pub struct Tap {
    rx: Receiver<Vec<u8>>,
}

pub fn tap() -> (TapSender, Tap) {
    let (tx, rx) = mpsc::channel();
    (TapSender(tx), Tap { rx })
}

impl Tap {
    /// Every frame seen since the last call, in order.
    pub fn drain(&mut self) -> Result<Vec<WireMessage>, WireError> {
        self.rx
            .try_iter()
            .map(|frame| decode_frame(&frame).map(|(msg, _)| msg))
            .collect()
    }
}

/// Wraps a transport so the tap receives a copy of each outgoing frame.
pub struct Tapped<T> {
    inner: T,
    tap: TapSender,
}

impl<T> Tapped<T> {
    pub fn new(inner: T, tap: TapSender) -> Self {
        Self { inner, tap }
    }
}

impl<T: Transport> Transport for Tapped<T> {
    fn send(&mut self, msg: &WireMessage) -> Result<(), WireError> {
        // A tap whose reader is gone is not an error for the parties.
        let _ = self.tap.0.send(encode_frame(msg));
        self.inner.send(msg)
    }

    fn recv(&mut self) -> Result<WireMessage, WireError> {
        self.inner.recv()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::LineObservation;
    use crate::exact::ratio;
    use crate::harness::wire::AnalogSample;
    use crate::protocol::Phase;

    fn sample(k: u64) -> WireMessage {
        WireMessage::AnalogSample(AnalogSample {
            round_k: k,
            phase: Phase::Baseline,
            obs: LineObservation::new(ratio(23, 7), ratio(1, 1750)),
        })
    }

    fn exercise(mut a: BoxedTransport, mut b: BoxedTransport) {
        for k in 0..5 {
            a.send(&sample(k)).unwrap();
        }
        b.send(&sample(99)).unwrap();
        for k in 0..5 {
            assert_eq!(b.recv().unwrap(), sample(k));
        }
        assert_eq!(a.recv().unwrap(), sample(99));
    }

    #[test]
    fn memory_and_socket_behave_alike() {
        let (a, b) = pair(TransportKind::Memory).unwrap();
        exercise(a, b);
        let (a, b) = pair(TransportKind::Socket).unwrap();
        exercise(a, b);
    }

    #[test]
    fn tap_sees_sent_frames_in_order() {
        let (tx, mut eve) = tap();
        let (a, mut b) = memory_pair();
        let mut a = Tapped::new(a, tx);
        a.send(&sample(1)).unwrap();
        a.send(&sample(2)).unwrap();
        assert_eq!(b.recv().unwrap(), sample(1));
        assert_eq!(eve.drain().unwrap(), vec![sample(1), sample(2)]);
        assert!(eve.drain().unwrap().is_empty());
    }

    #[test]
    fn closed_peer_reports_error() {
        let (mut a, b) = memory_pair();
        drop(b);
        assert!(a.send(&sample(0)).is_err());
        assert!(a.recv().is_err());
    }
}
