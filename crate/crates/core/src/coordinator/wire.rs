//! Frames: a 4-byte big-endian length followed by one UTF-8 JSON
//! [`WireMessage`].

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::swarm::ParticleId;

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    Register,
    RegisterAck,
    PublishState,
    /// Worker asks for the snapshot of `epoch`.
    SnapshotReady,
    SnapshotReply,
    RunComplete,
    Error,
    /// Acknowledges a publish or a completion.
    Heartbeat,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub run_id: String,
    pub particle_id: ParticleId,
    pub epoch: u64,
    /// Kind-specific JSON, kept verbatim so snapshot bytes pass through unchanged.
    pub payload: Box<RawValue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Protocol,
    Timeout,
    RunFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterAckPayload {
    pub expected_particles: usize,
}

impl ErrorPayload {
    pub fn from_error(e: &Error) -> Self {
        match e {
            Error::Timeout { .. } => ErrorPayload { code: ErrorCode::Timeout, message: e.to_string(), expected_epoch: None },
            Error::RunFailed(m) => ErrorPayload { code: ErrorCode::RunFailed, message: m.clone(), expected_epoch: None },
            Error::EpochMismatch { expected, .. } => {
                ErrorPayload { code: ErrorCode::Protocol, message: e.to_string(), expected_epoch: Some(*expected) }
            }
            other => ErrorPayload { code: ErrorCode::Protocol, message: other.to_string(), expected_epoch: None },
        }
    }

    pub fn into_error(self, epoch: u64) -> Error {
        match self.code {
            ErrorCode::Timeout => Error::Timeout { epoch },
            ErrorCode::RunFailed => Error::RunFailed(self.message),
            ErrorCode::Protocol => Error::Protocol(self.message),
        }
    }
}

impl WireMessage {
    pub fn new<T: Serialize>(kind: MessageKind, run_id: &str, particle_id: ParticleId, epoch: u64, payload: &T) -> Result<Self> {
        let raw = serde_json::to_string(payload)?;
        Ok(Self::with_raw(kind, run_id, particle_id, epoch, RawValue::from_string(raw)?))
    }

    pub fn with_raw(kind: MessageKind, run_id: &str, particle_id: ParticleId, epoch: u64, payload: Box<RawValue>) -> Self {
        WireMessage { kind, run_id: run_id.to_string(), particle_id, epoch, payload }
    }

    pub fn empty(kind: MessageKind, run_id: &str, particle_id: ParticleId, epoch: u64) -> Self {
        Self::with_raw(kind, run_id, particle_id, epoch, RawValue::from_string("{}".into()).expect("valid JSON"))
    }

    pub fn error(run_id: &str, particle_id: ParticleId, epoch: u64, payload: &ErrorPayload) -> Self {
        Self::new(MessageKind::Error, run_id, particle_id, epoch, payload).expect("error payload serializes")
    }

    pub fn payload<'a, T: Deserialize<'a>>(&'a self) -> Result<T> {
        Ok(serde_json::from_str(self.payload.get())?)
    }

    /// Fails with the carried message when this is an `Error`, or when the kind differs from `expected`.
    pub fn expect_kind(self, expected: MessageKind) -> Result<Self> {
        if self.kind == MessageKind::Error {
            let p: ErrorPayload = self.payload()?;
            return Err(p.into_error(self.epoch));
        }
        if self.kind != expected {
            return Err(Error::protocol(format!("expected {expected:?}, got {:?}", self.kind)));
        }
        Ok(self)
    }
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(Error::protocol(format!("frame of {} bytes exceeds limit", body.len())));
    }
    let mut frame = Vec::with_capacity(body.len() + 4);
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage) -> Result<()> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// `Ok(None)` on a clean end of stream before any length byte.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<WireMessage>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(Error::protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let text = std::str::from_utf8(&body).map_err(|e| Error::protocol(format!("frame is not UTF-8: {e}")))?;
    Ok(Some(serde_json::from_str(text)?))
}
