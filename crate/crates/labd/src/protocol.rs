//! Session wire format, version 1.
//!
//! Every message is one WebSocket text frame holding one JSON object
//! `{"v": 1, "seq": n, "ts": seconds, "kind": ..., "payload": {...}}`.
//! `seq` is strictly increasing per connection and per direction.

use gatelab::env::{ArmAction, GripperMode};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    StateFrame,
    Metrics,
    EpisodeEnd,
    Intervene,
    Release,
    Pause,
    Resume,
    Ping,
    Error,
}

impl Kind {
    /// State frames are the only messages backpressure may drop.
    pub fn droppable(self) -> bool {
        self == Kind::StateFrame
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub v: u32,
    pub seq: u64,
    pub ts: f64,
    pub kind: Kind,
    #[serde(default)]
    pub payload: Value,
}

/// Payload of a client `intervene`: a direction in `[-1, 1]^2` (clamped
/// like any arm action) and a gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervenePayload {
    pub direction: [f32; 2],
    pub gripper: GripperMode,
}

impl IntervenePayload {
    pub fn action(&self) -> (ArmAction, GripperMode) {
        (ArmAction::new(self.direction[0], self.direction[1]), self.gripper)
    }
}

/// A parsed client message.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientMsg {
    Intervene(IntervenePayload),
    Release,
    Pause,
    Resume,
    Ping(Value),
}

/// Parses and validates one client frame. `last_seq` is the previous
/// accepted sequence number on this connection.
pub fn parse_client(text: &str, last_seq: Option<u64>) -> Result<(u64, ClientMsg), String> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
    if env.v != VERSION {
        return Err(format!("unsupported protocol version {}", env.v));
    }
    if let Some(last) = last_seq {
        if env.seq <= last {
            return Err(format!("seq {} does not follow {last}", env.seq));
        }
    }
    let no_payload = |k: &str| match &env.payload {
        Value::Null => Ok(()),
        Value::Object(m) if m.is_empty() => Ok(()),
        _ => Err(format!("{k} takes no payload")),
    };
    let msg = match env.kind {
        Kind::Intervene => {
            let p: IntervenePayload =
                serde_json::from_value(env.payload.clone()).map_err(|e| format!("bad intervene payload: {e}"))?;
            if !(p.direction[0].is_finite() && p.direction[1].is_finite()) {
                return Err("intervene direction must be finite".into());
            }
            ClientMsg::Intervene(p)
        }
        Kind::Release => no_payload("release").map(|_| ClientMsg::Release)?,
        Kind::Pause => no_payload("pause").map(|_| ClientMsg::Pause)?,
        Kind::Resume => no_payload("resume").map(|_| ClientMsg::Resume)?,
        Kind::Ping => ClientMsg::Ping(env.payload.clone()),
        other => return Err(format!("clients may not send {}", kind_name(other))),
    };
    Ok((env.seq, msg))
}

pub fn kind_name(k: Kind) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub fn encode(seq: u64, ts: f64, kind: Kind, payload: Value) -> String {
    serde_json::to_string(&Envelope {
        v: VERSION,
        seq,
        ts,
        kind,
        payload,
    })
    .expect("envelope serializes")
}
