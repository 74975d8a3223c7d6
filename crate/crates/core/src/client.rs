//! A scriptable client process.
//!
//! Requests are issued through [`crate::transport::sim::Sim::invoke`] and the
//! answers are collected in order of arrival. Write request ids are
//! allocated per client so retries can reuse them.

use std::collections::BTreeMap;

use crate::transport::{Context, Process, Tick};
use crate::wire::{ClientDelete, ClientGet, ClientPut, ClientResponse, Envelope, Message, ReadMode, RequestId, Scope};

#[derive(Clone, Debug)]
pub struct Reply {
    pub id: u64,
    pub sent_at: Tick,
    pub received_at: Tick,
    pub response: ClientResponse,
}

pub struct ScriptClient {
    client_id: u64,
    target: String,
    next_seq: u64,
    outstanding: BTreeMap<u64, Tick>,
    replies: Vec<Reply>,
}

impl ScriptClient {
    /// `target` is the edge node this client talks to.
    pub fn new(client_id: u64, target: impl Into<String>) -> Self {
        ScriptClient { client_id, target: target.into(), next_seq: 0, outstanding: BTreeMap::new(), replies: Vec::new() }
    }

    pub fn set_target(&mut self, target: impl Into<String>) {
        self.target = target.into();
    }

    pub fn next_request_id(&mut self) -> RequestId {
        self.next_seq += 1;
        RequestId { client: self.client_id, seq: self.next_seq }
    }

    pub fn send(&mut self, ctx: &mut dyn Context, msg: impl Into<Message>) -> u64 {
        ctx.begin_cause();
        let id = ctx.next_id();
        self.outstanding.insert(id, ctx.now());
        ctx.send(&self.target, Envelope::new(id, msg));
        id
    }

    pub fn put(&mut self, ctx: &mut dyn Context, scope: Scope, key: &[u8], value: &[u8]) -> u64 {
        let request_id = self.next_request_id();
        self.put_with(ctx, scope, key, value, request_id)
    }

    pub fn put_with(&mut self, ctx: &mut dyn Context, scope: Scope, key: &[u8], value: &[u8], request_id: RequestId) -> u64 {
        self.send(ctx, ClientPut { scope, key: key.to_vec(), value: value.to_vec(), request_id })
    }

    pub fn get(&mut self, ctx: &mut dyn Context, scope: Scope, key: &[u8], mode: ReadMode) -> u64 {
        self.send(ctx, ClientGet { scope, key: key.to_vec(), mode })
    }

    pub fn delete(&mut self, ctx: &mut dyn Context, scope: Scope, key: &[u8]) -> u64 {
        let request_id = self.next_request_id();
        self.send(ctx, ClientDelete { scope, key: key.to_vec(), request_id })
    }

    pub fn replies(&self) -> &[Reply] {
        &self.replies
    }

    pub fn reply(&self, id: u64) -> Option<&ClientResponse> {
        self.replies.iter().find(|r| r.id == id).map(|r| &r.response)
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }
}

impl Process for ScriptClient {
    fn on_message(&mut self, ctx: &mut dyn Context, _from: &str, env: Envelope) {
        if let Message::ClientResponse(response) = env.message {
            if let Some(sent_at) = self.outstanding.remove(&env.id) {
                self.replies.push(Reply { id: env.id, sent_at, received_at: ctx.now(), response });
            }
        }
    }

    fn on_timer(&mut self, _ctx: &mut dyn Context, _token: u64) {}

    crate::impl_any!();
}
