//! Split-learning wire protocol.
//!
//! Messages are length-prefixed binary frames:
//!
//! ```text
//! [len: u32 BE] [version: u8] [kind: u8] [iteration: u64 BE]
//! [batch_size: u32 BE] [rank: u32 BE] [dims: u32 BE ...] [payload: f64 LE ...]
//! ```
//!
//! `len` counts every byte after the prefix and is capped at 64 MiB. Header
//! integers travel big-endian (network order); payload floats little-endian.
//! The same frames flow over both transports: a bounded in-process queue and
//! a TCP stream.

mod session;
mod transport;

pub use session::{
    honest_server_iteration, serve, ClientActor, ClientUpdate, HonestServer, ServerLogic,
    SessionError, SessionPhase, SessionState,
};
pub use transport::{inproc_pair, InprocTransport, RecordingTransport, TcpTransport, Transport};

use thiserror::Error;

pub const PROTOCOL_VERSION: u8 = 1;
pub const MAX_FRAME_BYTES: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("truncated frame: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("protocol version mismatch: got {got}, expected {expected}")]
    VersionMismatch { got: u8, expected: u8 },
    #[error("frame of {len} bytes exceeds the {max} byte cap")]
    FrameTooLarge { len: u64, max: u32 },
    #[error("payload length {got} does not match batch {batch} × shape {shape:?}")]
    PayloadMismatch {
        got: usize,
        batch: u32,
        shape: Vec<u32>,
    },
    #[error("transport channel closed")]
    ChannelClosed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Hello,
    Smashed,
    Gradient,
    Metric,
    Bye,
    Error,
}

impl MessageKind {
    fn to_u8(self) -> u8 {
        match self {
            MessageKind::Hello => 0,
            MessageKind::Smashed => 1,
            MessageKind::Gradient => 2,
            MessageKind::Metric => 3,
            MessageKind::Bye => 4,
            MessageKind::Error => 5,
        }
    }

    fn from_u8(v: u8) -> Result<MessageKind, ProtocolError> {
        Ok(match v {
            0 => MessageKind::Hello,
            1 => MessageKind::Smashed,
            2 => MessageKind::Gradient,
            3 => MessageKind::Metric,
            4 => MessageKind::Bye,
            5 => MessageKind::Error,
            other => return Err(ProtocolError::UnknownKind(other)),
        })
    }
}

/// One protocol unit: smashed activations, returned gradients, metrics, or
/// session control.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMessage {
    pub version: u8,
    pub kind: MessageKind,
    pub iteration: u64,
    pub batch_size: u32,
    /// Per-example dimensions of the payload.
    pub shape: Vec<u32>,
    pub payload: Vec<f64>,
}

impl SplitMessage {
    pub fn new(kind: MessageKind, iteration: u64) -> SplitMessage {
        SplitMessage {
            version: PROTOCOL_VERSION,
            kind,
            iteration,
            batch_size: 0,
            shape: vec![],
            payload: vec![],
        }
    }

    /// Tensor-carrying message (SMASHED / GRADIENT / METRIC): `shape` is the
    /// per-example shape and `payload` holds `batch_size` examples.
    pub fn tensor(
        kind: MessageKind,
        iteration: u64,
        batch_size: u32,
        shape: &[usize],
        payload: Vec<f64>,
    ) -> SplitMessage {
        SplitMessage {
            version: PROTOCOL_VERSION,
            kind,
            iteration,
            batch_size,
            shape: shape.iter().map(|&d| d as u32).collect(),
            payload,
        }
    }

    /// The handshake: feature shape in `shape`, dataset name encoded as one
    /// payload float per UTF-8 byte.
    pub fn hello(dataset: &str, feature_shape: &[usize]) -> SplitMessage {
        SplitMessage {
            version: PROTOCOL_VERSION,
            kind: MessageKind::Hello,
            iteration: 0,
            batch_size: 0,
            shape: feature_shape.iter().map(|&d| d as u32).collect(),
            payload: dataset.bytes().map(f64::from).collect(),
        }
    }

    pub fn hello_dataset(&self) -> Option<String> {
        if self.kind != MessageKind::Hello {
            return None;
        }
        let bytes: Option<Vec<u8>> = self
            .payload
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Some(v as u8)
                } else {
                    None
                }
            })
            .collect();
        bytes.and_then(|b| String::from_utf8(b).ok())
    }

    /// Session-abort message with a human-readable reason in the payload.
    pub fn error(iteration: u64, reason: &str) -> SplitMessage {
        SplitMessage {
            version: PROTOCOL_VERSION,
            kind: MessageKind::Error,
            iteration,
            batch_size: 0,
            shape: vec![],
            payload: reason.bytes().map(f64::from).collect(),
        }
    }

    pub fn error_reason(&self) -> String {
        let bytes: Vec<u8> = self
            .payload
            .iter()
            .filter(|v| (0.0..=255.0).contains(*v))
            .map(|&v| v as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn shape_usize(&self) -> Vec<usize> {
        self.shape.iter().map(|&d| d as usize).collect()
    }

    fn payload_checked(&self) -> Result<(), ProtocolError> {
        if matches!(self.kind, MessageKind::Smashed | MessageKind::Gradient) {
            let per: u64 = self.shape.iter().map(|&d| d as u64).product();
            let expected = per * self.batch_size as u64;
            if self.payload.len() as u64 != expected {
                return Err(ProtocolError::PayloadMismatch {
                    got: self.payload.len(),
                    batch: self.batch_size,
                    shape: self.shape.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Serialize into a full frame, length prefix included.
pub fn encode(msg: &SplitMessage) -> Result<Vec<u8>, ProtocolError> {
    msg.payload_checked()?;
    let body_len = 1 + 1 + 8 + 4 + 4 + 4 * msg.shape.len() + 8 * msg.payload.len();
    if body_len as u64 > MAX_FRAME_BYTES as u64 {
        return Err(ProtocolError::FrameTooLarge {
            len: body_len as u64,
            max: MAX_FRAME_BYTES,
        });
    }
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.push(msg.version);
    out.push(msg.kind.to_u8());
    out.extend_from_slice(&msg.iteration.to_be_bytes());
    out.extend_from_slice(&msg.batch_size.to_be_bytes());
    out.extend_from_slice(&(msg.shape.len() as u32).to_be_bytes());
    for &d in &msg.shape {
        out.extend_from_slice(&d.to_be_bytes());
    }
    for &v in &msg.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.pos + n > self.buf.len() {
            return Err(ProtocolError::Truncated {
                needed: self.pos + n,
                got: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parse a full frame (length prefix included). The inverse of [`encode`].
pub fn decode(bytes: &[u8]) -> Result<SplitMessage, ProtocolError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let len = u32::from_be_bytes(c.take(4)?.try_into().unwrap());
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::FrameTooLarge {
            len: len as u64,
            max: MAX_FRAME_BYTES,
        });
    }
    if bytes.len() != 4 + len as usize {
        return Err(ProtocolError::Truncated {
            needed: 4 + len as usize,
            got: bytes.len(),
        });
    }
    let version = c.take(1)?[0];
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::VersionMismatch {
            got: version,
            expected: PROTOCOL_VERSION,
        });
    }
    let kind = MessageKind::from_u8(c.take(1)?[0])?;
    let iteration = u64::from_be_bytes(c.take(8)?.try_into().unwrap());
    let batch_size = u32::from_be_bytes(c.take(4)?.try_into().unwrap());
    let rank = u32::from_be_bytes(c.take(4)?.try_into().unwrap());
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u32::from_be_bytes(c.take(4)?.try_into().unwrap()));
    }
    let remaining = bytes.len() - c.pos;
    if remaining % 8 != 0 {
        return Err(ProtocolError::Truncated {
            needed: c.pos + remaining.next_multiple_of(8),
            got: bytes.len(),
        });
    }
    let mut payload = Vec::with_capacity(remaining / 8);
    for _ in 0..remaining / 8 {
        payload.push(f64::from_le_bytes(c.take(8)?.try_into().unwrap()));
    }
    let msg = SplitMessage {
        version,
        kind,
        iteration,
        batch_size,
        shape,
        payload,
    };
    msg.payload_checked()?;
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn smashed_round_trip_is_identity() {
        let payload: Vec<f64> = (0..64 * 8 * 7 * 7).map(|i| i as f64 * 0.25 - 3.0).collect();
        let msg = SplitMessage::tensor(MessageKind::Smashed, 12, 64, &[8, 7, 7], payload);
        let decoded = decode(&encode(&msg).unwrap()).unwrap();
        assert_eq!(decoded, msg);
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut msg = SplitMessage::new(MessageKind::Bye, 0);
        msg.version = 99;
        let bytes = encode(&msg).unwrap();
        assert!(matches!(
            decode(&bytes),
            Err(ProtocolError::VersionMismatch { got: 99, .. })
        ));
    }

    #[test]
    fn hand_assembled_bye_frame_decodes() {
        // Written out by hand from the frame layout: body is version(1) +
        // kind(1) + iteration(8) + batch(4) + rank(4) = 18 bytes.
        let bytes: Vec<u8> = vec![
            0, 0, 0, 18, // length prefix
            1,  // version
            4,  // kind = BYE
            0, 0, 0, 0, 0, 0, 0, 7, // iteration = 7
            0, 0, 0, 0, // batch_size = 0
            0, 0, 0, 0, // rank = 0
        ];
        let msg = decode(&bytes).unwrap();
        assert_eq!(msg.kind, MessageKind::Bye);
        assert_eq!(msg.iteration, 7);
        assert!(msg.shape.is_empty() && msg.payload.is_empty());
    }

    #[test]
    fn unknown_kind_rejected() {
        let mut bytes = encode(&SplitMessage::new(MessageKind::Bye, 0)).unwrap();
        bytes[5] = 42; // kind byte
        assert!(matches!(decode(&bytes), Err(ProtocolError::UnknownKind(42))));
    }

    #[test]
    fn truncated_frame_rejected() {
        let bytes = encode(&SplitMessage::tensor(
            MessageKind::Gradient,
            3,
            2,
            &[4],
            vec![0.5; 8],
        ))
        .unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(ProtocolError::Truncated { .. })
        ));
    }

    #[test]
    fn oversized_length_prefix_rejected() {
        let mut bytes = encode(&SplitMessage::new(MessageKind::Bye, 0)).unwrap();
        bytes[0..4].copy_from_slice(&(MAX_FRAME_BYTES + 1).to_be_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(ProtocolError::FrameTooLarge { .. })
        ));
    }

    #[test]
    fn payload_shape_invariant_enforced() {
        let msg = SplitMessage {
            version: PROTOCOL_VERSION,
            kind: MessageKind::Smashed,
            iteration: 0,
            batch_size: 2,
            shape: vec![3],
            payload: vec![1.0; 5], // should be 6
        };
        assert!(matches!(
            encode(&msg),
            Err(ProtocolError::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn hello_carries_dataset_and_shape() {
        let msg = SplitMessage::hello("fashion-mnist", &[8, 7, 7]);
        let rt = decode(&encode(&msg).unwrap()).unwrap();
        assert_eq!(rt.hello_dataset().as_deref(), Some("fashion-mnist"));
        assert_eq!(rt.shape_usize(), vec![8, 7, 7]);
    }

    #[test]
    fn random_messages_round_trip_losslessly() {
        let mut rng = ChaCha20Rng::seed_from_u64(4242);
        for _ in 0..2000 {
            let kind = match rng.gen_range(0..6) {
                0 => MessageKind::Hello,
                1 => MessageKind::Smashed,
                2 => MessageKind::Gradient,
                3 => MessageKind::Metric,
                4 => MessageKind::Bye,
                _ => MessageKind::Error,
            };
            let (batch, shape) = if matches!(kind, MessageKind::Smashed | MessageKind::Gradient) {
                let rank = rng.gen_range(1..4usize);
                let shape: Vec<u32> = (0..rank).map(|_| rng.gen_range(1..6u32)).collect();
                (rng.gen_range(1..5u32), shape)
            } else {
                (0, vec![])
            };
            let per: u32 = shape.iter().product::<u32>() * batch;
            let payload: Vec<f64> = (0..per)
                .map(|_| f64::from_bits(rng.gen::<u64>() & 0x7fef_ffff_ffff_ffff))
                .collect();
            let msg = SplitMessage {
                version: PROTOCOL_VERSION,
                kind,
                iteration: rng.gen(),
                batch_size: batch,
                shape,
                payload,
            };
            let rt = decode(&encode(&msg).unwrap()).unwrap();
            assert_eq!(rt.iteration, msg.iteration);
            assert!(rt
                .payload
                .iter()
                .zip(&msg.payload)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(rt.shape, msg.shape);
        }
    }
}
