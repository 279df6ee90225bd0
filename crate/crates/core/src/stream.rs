//! Time-ordered labelled event streams: the common currency between ingestion,
//! simulation and estimation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AgentId, EventType, N_TYPES};

/// One level-I event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Seconds, on the same clock as the session bounds.
    pub t: f64,
    pub agent: AgentId,
    #[serde(rename = "type")]
    pub kind: EventType,
    /// Signed mid-price jump in half-ticks; nonzero only for price moves.
    pub delta: f64,
}

impl Event {
    pub fn new(t: f64, agent: AgentId, kind: EventType, delta: f64) -> Self {
        Self { t, agent, kind, delta }
    }
}

/// Trading session bounds `[open, close)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub open: f64,
    pub close: f64,
}

impl Session {
    pub fn new(open: f64, close: f64) -> Result<Self, StreamError> {
        if !(open.is_finite() && close.is_finite() && close > open) {
            return Err(StreamError::InvalidSession { open, close });
        }
        Ok(Self { open, close })
    }

    pub fn length(&self) -> f64 {
        self.close - self.open
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.open && t < self.close
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("invalid session [{open}, {close})")]
    InvalidSession { open: f64, close: f64 },
    #[error("event {index} at t={t} precedes its predecessor")]
    Unsorted { index: usize, t: f64 },
    #[error("event {index} at t={t} lies outside the session")]
    OutOfSession { index: usize, t: f64 },
    #[error("event {index}: jump {delta} inconsistent with type {kind}")]
    InconsistentDelta { index: usize, kind: EventType, delta: f64 },
}

/// Events of one trading day, sorted by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub day: String,
    pub session: Session,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates ordering, session membership and jump signs.
    pub fn new(day: impl Into<String>, session: Session, events: Vec<Event>) -> Result<Self, StreamError> {
        for (i, e) in events.iter().enumerate() {
            if i > 0 && e.t < events[i - 1].t {
                return Err(StreamError::Unsorted { index: i, t: e.t });
            }
            if !session.contains(e.t) {
                return Err(StreamError::OutOfSession { index: i, t: e.t });
            }
            if !e.kind.delta_consistent(e.delta) {
                return Err(StreamError::InconsistentDelta { index: i, kind: e.kind, delta: e.delta });
            }
        }
        Ok(Self { day: day.into(), session, events })
    }

    pub fn empty(day: impl Into<String>, session: Session) -> Self {
        Self { day: day.into(), session, events: Vec::new() }
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

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Distinct agents in ascending id order.
    pub fn agents(&self) -> Vec<AgentId> {
        let mut v: Vec<AgentId> = self.events.iter().map(|e| e.agent).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Per-type event counts of one agent.
    pub fn counts(&self, agent: AgentId) -> [usize; N_TYPES] {
        let mut c = [0; N_TYPES];
        for e in self.events.iter().filter(|e| e.agent == agent) {
            c[e.kind.index()] += 1;
        }
        c
    }

    pub fn agent_event_count(&self, agent: AgentId) -> usize {
        self.events.iter().filter(|e| e.agent == agent).count()
    }

    /// Copy with every agent outside `keep` relabelled as [`AgentId::REST`].
    pub fn with_rest_merged(&self, keep: &[AgentId]) -> EventStream {
        let events = self
            .events
            .iter()
            .map(|e| {
                let mut e = *e;
                if !keep.contains(&e.agent) {
                    e.agent = AgentId::REST;
                }
                e
            })
            .collect();
        EventStream { day: self.day.clone(), session: self.session, events }
    }

    /// Copy with agent labels replaced, in order; times, types and jumps untouched.
    pub(crate) fn relabelled(&self, labels: &[AgentId]) -> EventStream {
        debug_assert_eq!(labels.len(), self.events.len());
        let events = self
            .events
            .iter()
            .zip(labels)
            .map(|(e, a)| Event { agent: *a, ..*e })
            .collect();
        EventStream { day: self.day.clone(), session: self.session, events }
    }
}
