//! Message transports: a bounded in-process queue and framed TCP. Both move
//! encoded frames, so the codec is exercised either way.

use super::{decode, encode, ProtocolError, SplitMessage, MAX_FRAME_BYTES};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};

pub trait Transport: Send {
    fn send(&mut self, msg: &SplitMessage) -> Result<(), ProtocolError>;
    fn recv(&mut self) -> Result<SplitMessage, ProtocolError>;
}

/// In-process endpoint over a pair of bounded FIFO queues (capacity 4).
pub struct InprocTransport {
    tx: SyncSender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Connected pair of in-process endpoints.
pub fn inproc_pair() -> (InprocTransport, InprocTransport) {
    let (atx, brx) = sync_channel(4);
    let (btx, arx) = sync_channel(4);
    (
        InprocTransport { tx: atx, rx: arx },
        InprocTransport { tx: btx, rx: brx },
    )
}

impl Transport for InprocTransport {
    fn send(&mut self, msg: &SplitMessage) -> Result<(), ProtocolError> {
        let frame = encode(msg)?;
        self.tx.send(frame).map_err(|_| ProtocolError::ChannelClosed)
    }

    fn recv(&mut self) -> Result<SplitMessage, ProtocolError> {
        let frame = self.rx.recv().map_err(|_| ProtocolError::ChannelClosed)?;
        decode(&frame)
    }
}

/// Framed TCP endpoint; tolerates the peer living in another process.
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<TcpTransport, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport { stream })
    }

    pub fn accept_one(listener: &TcpListener) -> Result<TcpTransport, ProtocolError> {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport { stream })
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: &SplitMessage) -> Result<(), ProtocolError> {
        let frame = encode(msg)?;
        self.stream.write_all(&frame)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<SplitMessage, ProtocolError> {
        let mut prefix = [0u8; 4];
        self.stream.read_exact(&mut prefix)?;
        let len = u32::from_be_bytes(prefix);
        if len > MAX_FRAME_BYTES {
            return Err(ProtocolError::FrameTooLarge {
                len: len as u64,
                max: MAX_FRAME_BYTES,
            });
        }
        let mut frame = vec![0u8; 4 + len as usize];
        frame[..4].copy_from_slice(&prefix);
        self.stream.read_exact(&mut frame[4..])?;
        decode(&frame)
    }
}

/// Wrapper that keeps a copy of every outbound message; used by tests to
/// assert on what actually crossed the boundary.
pub struct RecordingTransport<T: Transport> {
    inner: T,
    pub sent: Vec<SplitMessage>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        RecordingTransport {
            inner,
            sent: Vec::new(),
        }
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&mut self, msg: &SplitMessage) -> Result<(), ProtocolError> {
        self.sent.push(msg.clone());
        self.inner.send(msg)
    }

    fn recv(&mut self) -> Result<SplitMessage, ProtocolError> {
        self.inner.recv()
    }
}
