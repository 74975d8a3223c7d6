//! Message schemas and framing.
//!
//! A frame is a 4-byte big-endian length followed by a UTF-8 JSON object
//! `{"id": u64, "kind": "<Kind>", "payload": {...}}`, plus an optional
//! `"replyTo"` endpoint. Binary keys and values travel base64-encoded.
//! `docs/wire.md` holds the per-kind field tables.

use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::ring::Identifier;

/// Upper bound on a frame's payload length.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

/// Network endpoint: `host:port` on the TCP transport, a node name in the simulator.
pub type Endpoint = String;

/// Base64 (standard alphabet, padded) for byte strings.
pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(bytes: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
            match bytes {
                Some(b) => s.serialize_some(&STANDARD.encode(b)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
            let s = Option::<std::borrow::Cow<'de, str>>::deserialize(d)?;
            s.map(|s| STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Local,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReadMode {
    #[default]
    Linearizable,
    Serializable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Put,
    Delete,
}

/// Client-chosen id used to suppress duplicate application of retried writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId {
    pub client: u64,
    pub seq: u64,
}

/// A replicated state-machine command against a scoped key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Command {
    pub kind: CommandKind,
    pub scope: Scope,
    #[serde(with = "b64")]
    pub key: Vec<u8>,
    #[serde(with = "b64::option", default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<u8>>,
    pub request_id: RequestId,
}

impl Command {
    pub fn put(scope: Scope, key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>, request_id: RequestId) -> Self {
        Command { kind: CommandKind::Put, scope, key: key.into(), value: Some(value.into()), request_id }
    }

    pub fn delete(scope: Scope, key: impl Into<Vec<u8>>, request_id: RequestId) -> Self {
        Command { kind: CommandKind::Delete, scope, key: key.into(), value: None, request_id }
    }

    /// Put carries a value, Delete carries none.
    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.value) {
            (CommandKind::Put, None) => Err(Error::Protocol("Put without a value".into())),
            (CommandKind::Delete, Some(_)) => Err(Error::Protocol("Delete with a value".into())),
            _ => Ok(()),
        }
    }
}

/// A member of a consensus group: stable id plus where to reach it.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Member {
    pub id: String,
    pub address: Endpoint,
}

impl Member {
    pub fn new(id: impl Into<String>, address: impl Into<String>) -> Self {
        Member { id: id.into(), address: address.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum EntryPayload {
    /// Appended by every new leader so it can commit in its own term.
    Noop,
    Command(Command),
    /// Replaces the whole learner set.
    SetLearners { members: Vec<Member> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub term: u64,
    pub index: u64,
    pub payload: EntryPayload,
}

/// Routable reference to an overlay (virtual) node.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeRef {
    pub id: Identifier,
    pub address: Endpoint,
    pub physical_id: Identifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Status {
    Ok,
    NotFound,
    /// Not the leader; `leaderHint` names who might be.
    Redirect,
    Unavailable,
    Timeout,
    InvalidArgument,
    GatewayUnavailable,
    GlobalUnavailable,
    GroupUnavailable,
    NotOwner,
    LookupFailed,
}

impl Status {
    pub fn is_success(self) -> bool {
        matches!(self, Status::Ok | Status::NotFound)
    }

    /// Whether a client may retry the same request.
    pub fn retryable(self) -> bool {
        !matches!(self, Status::Ok | Status::NotFound | Status::InvalidArgument)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroupInfo {
    pub group: String,
    pub members: Vec<Member>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum Proposal {
    Command(Command),
    SetLearners { members: Vec<Member> },
}

macro_rules! payloads {
    ($( $(#[$m:meta])* $name:ident { $($body:tt)* } )*) => {
        $(
            $(#[$m])*
            #[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
            #[serde(rename_all = "camelCase", deny_unknown_fields)]
            pub struct $name { $($body)* }
        )*
    };
}

payloads! {
    ClientGet {
        pub scope: Scope,
        #[serde(with = "b64")]
        pub key: Vec<u8>,
        #[serde(default)]
        pub mode: ReadMode,
    }
    ClientPut {
        pub scope: Scope,
        #[serde(with = "b64")]
        pub key: Vec<u8>,
        #[serde(with = "b64")]
        pub value: Vec<u8>,
        pub request_id: RequestId,
    }
    ClientDelete {
        pub scope: Scope,
        #[serde(with = "b64")]
        pub key: Vec<u8>,
        pub request_id: RequestId,
    }
    ClientResponse {
        pub status: Status,
        #[serde(with = "b64::option", default, skip_serializing_if = "Option::is_none")]
        pub value: Option<Vec<u8>>,
        /// Time spent inside the edge node, microseconds.
        #[serde(default)]
        pub elapsed_us: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub retry_after_ms: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub message: Option<String>,
    }
    RequestVote {
        pub group: String,
        pub term: u64,
        pub candidate: String,
        pub last_log_index: u64,
        pub last_log_term: u64,
    }
    RequestVoteResp {
        pub group: String,
        pub term: u64,
        pub voter: String,
        pub granted: bool,
    }
    AppendEntries {
        pub group: String,
        pub term: u64,
        pub leader: String,
        pub prev_log_index: u64,
        pub prev_log_term: u64,
        pub entries: Vec<LogEntry>,
        pub leader_commit: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub read_ctx: Option<u64>,
    }
    AppendEntriesResp {
        pub group: String,
        pub term: u64,
        pub from: String,
        pub success: bool,
        pub match_index: u64,
        pub last_log_index: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub read_ctx: Option<u64>,
    }
    FindSuccessor {
        /// Overlay node that should process this hop.
        pub target: Identifier,
        pub id: Identifier,
        pub origin: NodeRef,
        pub hops: u32,
    }
    FindSuccessorResp {
        pub target: Identifier,
        pub id: Identifier,
        pub successor: NodeRef,
        pub hops: u32,
    }
    GetPredecessor {
        pub target: Identifier,
    }
    GetPredecessorResp {
        pub from: NodeRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub predecessor: Option<NodeRef>,
        pub successors: Vec<NodeRef>,
    }
    Notify {
        pub target: Identifier,
        pub candidate: NodeRef,
    }
    Ping {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub target: Option<Identifier>,
    }
    Pong {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub from: Option<NodeRef>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub group: Option<GroupInfo>,
    }
    GlobalPut {
        #[serde(with = "b64")]
        pub key: Vec<u8>,
        #[serde(with = "b64")]
        pub value: Vec<u8>,
        pub request_id: RequestId,
    }
    GlobalGet {
        #[serde(with = "b64")]
        pub key: Vec<u8>,
        #[serde(default)]
        pub mode: ReadMode,
        /// Set when the read is served by the backup of the named group.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub backup_of: Option<String>,
    }
    GlobalDelete {
        #[serde(with = "b64")]
        pub key: Vec<u8>,
        pub request_id: RequestId,
    }
    GlobalResponse {
        pub status: Status,
        #[serde(with = "b64::option", default, skip_serializing_if = "Option::is_none")]
        pub value: Option<Vec<u8>>,
        /// Group that served the request.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub served_by: Option<String>,
        #[serde(default)]
        pub from_backup: bool,
        #[serde(default)]
        pub hops: u32,
    }
    GroupPropose {
        pub group: String,
        pub proposal: Proposal,
    }
    GroupRead {
        pub group: String,
        pub scope: Scope,
        #[serde(with = "b64")]
        pub key: Vec<u8>,
        #[serde(default)]
        pub mode: ReadMode,
    }
    GroupResponse {
        pub status: Status,
        #[serde(with = "b64::option", default, skip_serializing_if = "Option::is_none")]
        pub value: Option<Vec<u8>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub leader_hint: Option<Endpoint>,
    }
}

macro_rules! messages {
    ($($kind:ident),* $(,)?) => {
        /// Message-kind tag.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum MessageKind { $($kind),* }

        impl MessageKind {
            pub const ALL: &'static [MessageKind] = &[$(MessageKind::$kind),*];

            pub fn as_str(self) -> &'static str {
                match self { $(MessageKind::$kind => stringify!($kind)),* }
            }

            pub fn parse(s: &str) -> Option<MessageKind> {
                match s { $(stringify!($kind) => Some(MessageKind::$kind),)* _ => None }
            }
        }

        #[derive(Clone, Debug, PartialEq, Eq)]
        pub enum Message { $($kind($kind)),* }

        impl Message {
            pub fn kind(&self) -> MessageKind {
                match self { $(Message::$kind(_) => MessageKind::$kind),* }
            }

            fn payload_json(&self) -> serde_json::Result<Box<RawValue>> {
                match self { $(Message::$kind(p) => serde_json::value::to_raw_value(p)),* }
            }

            fn from_raw(kind: MessageKind, raw: &RawValue) -> serde_json::Result<Message> {
                match kind { $(MessageKind::$kind => serde_json::from_str(raw.get()).map(Message::$kind)),* }
            }
        }

        $(
            impl From<$kind> for Message {
                fn from(p: $kind) -> Message { Message::$kind(p) }
            }
        )*
    };
}

messages! {
    ClientGet, ClientPut, ClientDelete, ClientResponse,
    RequestVote, RequestVoteResp, AppendEntries, AppendEntriesResp,
    FindSuccessor, FindSuccessorResp, GetPredecessor, GetPredecessorResp,
    Notify, Ping, Pong,
    GlobalPut, GlobalGet, GlobalDelete, GlobalResponse,
    GroupPropose, GroupRead, GroupResponse,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Message {
    fn validate(&self) -> Result<()> {
        match self {
            Message::AppendEntries(ae) => ae.entries.iter().try_for_each(|e| match &e.payload {
                EntryPayload::Command(c) => c.validate(),
                _ => Ok(()),
            }),
            Message::GroupPropose(GroupPropose { proposal: Proposal::Command(c), .. }) => c.validate(),
            _ => Ok(()),
        }
    }
}

/// One RPC message with its correlation id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub id: u64,
    pub message: Message,
    pub reply_to: Option<Endpoint>,
}

impl Envelope {
    pub fn new(id: u64, message: impl Into<Message>) -> Self {
        Envelope { id, message: message.into(), reply_to: None }
    }

    pub fn kind(&self) -> MessageKind {
        self.message.kind()
    }

    pub fn with_reply_to(mut self, to: impl Into<Endpoint>) -> Self {
        self.reply_to = Some(to.into());
        self
    }
}

impl Serialize for Envelope {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let payload = self.message.payload_json().map_err(serde::ser::Error::custom)?;
        let mut map = s.serialize_map(None)?;
        map.serialize_entry("id", &self.id)?;
        map.serialize_entry("kind", self.kind().as_str())?;
        map.serialize_entry("payload", &payload)?;
        if let Some(r) = &self.reply_to {
            map.serialize_entry("replyTo", r)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Envelope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct EnvelopeVisitor;

        impl<'de> Visitor<'de> for EnvelopeVisitor {
            type Value = Envelope;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an envelope object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Envelope, A::Error> {
                let mut id = None;
                let mut kind = None;
                let mut payload: Option<Box<RawValue>> = None;
                let mut reply_to = None;
                while let Some(key) = map.next_key::<std::borrow::Cow<'de, str>>()? {
                    match key.as_ref() {
                        "id" => id = Some(map.next_value::<u64>()?),
                        "kind" => {
                            let k = map.next_value::<std::borrow::Cow<'de, str>>()?;
                            kind = Some(
                                MessageKind::parse(&k)
                                    .ok_or_else(|| de::Error::custom(format!("unknown kind `{k}`")))?,
                            );
                        }
                        "payload" => payload = Some(map.next_value::<Box<RawValue>>()?),
                        "replyTo" => reply_to = map.next_value::<Option<String>>()?,
                        other => return Err(de::Error::unknown_field(other, &["id", "kind", "payload", "replyTo"])),
                    }
                }
                let id = id.ok_or_else(|| de::Error::missing_field("id"))?;
                let kind = kind.ok_or_else(|| de::Error::missing_field("kind"))?;
                let payload = payload.ok_or_else(|| de::Error::missing_field("payload"))?;
                let message = Message::from_raw(kind, &payload).map_err(de::Error::custom)?;
                Ok(Envelope { id, message, reply_to })
            }
        }

        d.deserialize_map(EnvelopeVisitor)
    }
}

/// Serializes an envelope into a length-prefixed frame.
pub fn encode(env: &Envelope) -> Result<Vec<u8>> {
    let mut out = vec![0u8; 4];
    serde_json::to_writer(&mut out, env)?;
    let len = out.len() - 4;
    if len > MAX_FRAME {
        return Err(Error::FrameTooLarge(len));
    }
    out[..4].copy_from_slice(&(len as u32).to_be_bytes());
    Ok(out)
}

/// Result of trying to pull one frame off the front of a buffer.
#[derive(Debug, PartialEq)]
pub enum Decoded {
    /// Not enough bytes yet; nothing consumed.
    Incomplete,
    Frame { envelope: Envelope, consumed: usize },
}

/// Decodes the first frame in `buf`.
pub fn decode(buf: &[u8]) -> Result<Decoded> {
    if buf.len() < 4 {
        return Ok(Decoded::Incomplete);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME {
        return Err(Error::FrameTooLarge(len));
    }
    if buf.len() < 4 + len {
        return Ok(Decoded::Incomplete);
    }
    let envelope = decode_payload(&buf[4..4 + len])?;
    Ok(Decoded::Frame { envelope, consumed: 4 + len })
}

/// Decodes a frame body (the JSON after the length prefix).
pub fn decode_payload(body: &[u8]) -> Result<Envelope> {
    let envelope: Envelope =
        serde_json::from_slice(body).map_err(|e| Error::Protocol(e.to_string()))?;
    envelope.message.validate()?;
    Ok(envelope)
}
