//! Framing: a 4-byte big-endian length, then a UTF-8 JSON object
//! `{kind, k, sender, payload}`.

use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::time::Instant;

use super::{ProtocolError, Result, RoundMessage};

/// Frames above this size are rejected before allocation.
pub const MAX_FRAME_BYTES: usize = 64 << 20;

pub fn encode_frame(msg: &RoundMessage) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(msg).map_err(|e| ProtocolError::Wire(e.to_string()))?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::Wire(format!("frame of {} bytes exceeds the limit", body.len())));
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes one complete frame; trailing bytes are an error.
pub fn decode_frame(bytes: &[u8]) -> Result<RoundMessage> {
    if bytes.len() < 4 {
        return Err(ProtocolError::Wire("truncated length prefix".into()));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if bytes.len() - 4 != len {
        return Err(ProtocolError::Wire(format!("frame declares {len} bytes, holds {}", bytes.len() - 4)));
    }
    decode_body(&bytes[4..])
}

fn decode_body(body: &[u8]) -> Result<RoundMessage> {
    serde_json::from_slice(body).map_err(|e| ProtocolError::Wire(e.to_string()))
}

pub fn write_frame<W: Write>(w: &mut W, msg: &RoundMessage) -> Result<()> {
    w.write_all(&encode_frame(msg)?).map_err(io_error)?;
    w.flush().map_err(io_error)
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<RoundMessage> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(io_error)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::Wire(format!("incoming frame of {len} bytes exceeds the limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(io_error)?;
    decode_body(&body)
}

fn io_error(e: std::io::Error) -> ProtocolError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => ProtocolError::LinkTimeout,
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::BrokenPipe => ProtocolError::Disconnected,
        _ => ProtocolError::Wire(e.to_string()),
    }
}

/// Inbound side of a connection. Socket readers forward decoded frames
/// here; a closed peer drops the sender.
pub type Inbox = Receiver<Result<RoundMessage>>;

/// Outbound side of a connection.
pub trait Outbox: Send {
    fn send(&mut self, msg: &RoundMessage) -> Result<()>;
}

/// In-process outbox feeding a channel inbox.
pub struct ChannelOutbox(Sender<Result<RoundMessage>>);

impl ChannelOutbox {
    pub fn new(tx: Sender<Result<RoundMessage>>) -> Self {
        Self(tx)
    }
}

impl Outbox for ChannelOutbox {
    fn send(&mut self, msg: &RoundMessage) -> Result<()> {
        self.0.send(Ok(msg.clone())).map_err(|_| ProtocolError::Disconnected)
    }
}

/// Length-prefixed frames over TCP. Dropping it shuts the connection down in
/// both directions, which also ends the paired reader.
pub struct SocketOutbox(TcpStream);

impl Outbox for SocketOutbox {
    fn send(&mut self, msg: &RoundMessage) -> Result<()> {
        write_frame(&mut self.0, msg)
    }
}

impl Drop for SocketOutbox {
    fn drop(&mut self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

/// Splits a connected stream into an outbox and a reader thread that
/// forwards frames into `inbox`. The reader exits silently on a clean close.
pub fn socket_endpoint(stream: TcpStream, inbox: Sender<Result<RoundMessage>>) -> Result<SocketOutbox> {
    stream.set_nodelay(true).map_err(io_error)?;
    let mut reader = stream.try_clone().map_err(io_error)?;
    std::thread::Builder::new()
        .name("frame-reader".into())
        .spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(msg) => {
                    if inbox.send(Ok(msg)).is_err() {
                        return;
                    }
                }
                Err(ProtocolError::Disconnected) => return,
                Err(e) => {
                    let _ = inbox.send(Err(e));
                    return;
                }
            }
        })
        .map_err(|e| ProtocolError::Wire(e.to_string()))?;
    Ok(SocketOutbox(stream))
}

/// Blocks until a message arrives, the deadline passes, or every sender is gone.
pub fn recv_until(inbox: &Inbox, deadline: Instant) -> Result<RoundMessage> {
    let wait = deadline.saturating_duration_since(Instant::now());
    match inbox.recv_timeout(wait) {
        Ok(msg) => msg,
        Err(RecvTimeoutError::Timeout) => Err(ProtocolError::LinkTimeout),
        Err(RecvTimeoutError::Disconnected) => Err(ProtocolError::Disconnected),
    }
}

/// Blocks until a message arrives or every sender is gone.
pub fn recv(inbox: &Inbox) -> Result<RoundMessage> {
    inbox.recv().map_err(|_| ProtocolError::Disconnected)?
}
