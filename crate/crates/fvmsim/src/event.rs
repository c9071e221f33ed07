//! Ordered record of every simulated action and decision.
//!
//! The log is the observable output of a run: sequence numbers are strictly
//! increasing and no wall-clock fields exist, so identical inputs produce
//! byte-identical logs. Serialized as JSON Lines, one event per line with
//! exactly the fields `seq`, `actor`, `action`, `detail`, `outcome`.

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub seq: u64,
    pub actor: String,
    pub action: String,
    pub detail: Value,
    pub outcome: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, actor: &str, action: &str, detail: Value, outcome: impl Into<String>) {
        self.events.push(Event {
            seq: self.events.len() as u64 + 1,
            actor: actor.to_string(),
            action: action.to_string(),
            detail,
            outcome: outcome.into(),
        });
    }

    pub fn ok(&mut self, actor: &str, action: &str, detail: Value) {
        self.push(actor, action, detail, "ok");
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last(&self) -> Option<&Event> {
        self.events.last()
    }

    /// One JSON object per line, in sequence order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}
