//! Deterministic discrete-event simulation of the solvers as message
//! passing between vertex, connection and center agents.
//!
//! Every message is delivered one tick after it is sent; computation is
//! free. Messages sent in the same tick are delivered in send order, and
//! agents within a phase are scheduled by ascending id.

mod fgm_protocol;
mod md_protocol;

pub use fgm_protocol::{run_fgm_protocol, FgmProtocolOptions};
pub use md_protocol::{run_md_protocol, MdProtocolOptions};

use serde::Serialize;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use crate::error::{Error, Result};
use crate::model::IncidenceMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AgentId {
    Vertex(usize),
    Connection(usize),
    Center,
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentId::Vertex(i) => write!(f, "vertex {i}"),
            AgentId::Connection(j) => write!(f, "connection {j}"),
            AgentId::Center => f.write_str("center"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum MessageKind {
    RateReport,
    PriceNotify,
    RateRequest,
    PriceRequest,
    IterTypeRequest,
    IterTypeReply,
    UpdateNotify,
    ResidualReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payload {
    Empty,
    Scalar(f64),
    /// Center's answer to a stepping vertex. `row` is the most violated
    /// connection on a non-productive step.
    IterType {
        productive: bool,
        row: Option<usize>,
        productive_count: u64,
    },
    /// A vertex's completed update.
    Update { delta: f64, bound_exceeded: bool },
    /// Final number of productive steps.
    Count(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub from: AgentId,
    pub to: AgentId,
    pub payload: Payload,
    /// Tick at which the message was enqueued.
    pub tick: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimStats {
    pub messages_by_kind: BTreeMap<MessageKind, u64>,
    pub ticks: u64,
    pub component_oracle_calls: u64,
    /// Data/control messages per global iteration (setup traffic excluded).
    pub round_messages: Vec<u64>,
    /// Residual cache entries the center refreshed at each step.
    pub residual_updates: Vec<u64>,
    /// Replies that carried a most-violated connection index.
    pub jt_announcements: u64,
}

#[derive(Serialize)]
struct StatsJson<'a> {
    messages: &'a BTreeMap<MessageKind, u64>,
    ticks: u64,
    oracle_calls: u64,
}

impl SimStats {
    pub fn total_messages(&self) -> u64 {
        self.messages_by_kind.values().sum()
    }

    pub fn count(&self, kind: MessageKind) -> u64 {
        self.messages_by_kind.get(&kind).copied().unwrap_or(0)
    }

    /// `{"messages": {kind: count}, "ticks": .., "oracle_calls": ..}`
    pub fn to_json(&self) -> String {
        serde_json::to_string(&StatsJson {
            messages: &self.messages_by_kind,
            ticks: self.ticks,
            oracle_calls: self.component_oracle_calls,
        })
        .expect("stats serialization is infallible")
    }
}

/// Event queue plus the locality rules of the network.
pub(crate) struct Network<'a> {
    c: &'a IncidenceMatrix,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    pending: BTreeMap<u64, Message>,
    now: u64,
    seq: u64,
    pub(crate) stats: SimStats,
    /// Messages sent since the last `take_round`.
    round: u64,
}

impl<'a> Network<'a> {
    pub(crate) fn new(c: &'a IncidenceMatrix) -> Self {
        Self {
            c,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            now: 0,
            seq: 0,
            stats: SimStats::default(),
            round: 0,
        }
    }

    pub(crate) fn send(&mut self, kind: MessageKind, from: AgentId, to: AgentId, payload: Payload) {
        let msg = Message {
            kind,
            from,
            to,
            payload,
            tick: self.now,
        };
        let id = self.seq;
        self.seq += 1;
        self.queue.push(Reverse((self.now + 1, id)));
        self.pending.insert(id, msg);
        *self.stats.messages_by_kind.entry(kind).or_insert(0) += 1;
        self.round += 1;
    }

    /// Next message in delivery order, after checking that its endpoints
    /// are allowed to talk.
    pub(crate) fn deliver(&mut self) -> Result<Option<Message>> {
        let Some(Reverse((at, id))) = self.queue.pop() else {
            return Ok(None);
        };
        self.now = self.now.max(at);
        self.stats.ticks = self.now;
        let msg = self.pending.remove(&id).expect("queued message has a body");
        self.check_locality(&msg)?;
        Ok(Some(msg))
    }

    fn check_locality(&self, msg: &Message) -> Result<()> {
        let related = |j: usize, i: usize| self.c.contains(j, i);
        let ok = match (msg.from, msg.to) {
            (AgentId::Vertex(i), AgentId::Connection(j)) | (AgentId::Connection(j), AgentId::Vertex(i)) => {
                related(j, i)
            }
            (AgentId::Center, AgentId::Vertex(_))
            | (AgentId::Vertex(_), AgentId::Center)
            | (AgentId::Center, AgentId::Connection(_))
            | (AgentId::Connection(_), AgentId::Center) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Protocol(format!(
                "{:?} from {} to {} crosses unrelated agents",
                msg.kind, msg.from, msg.to
            )))
        }
    }

    /// Closes the current round's message count.
    pub(crate) fn take_round(&mut self) -> u64 {
        std::mem::take(&mut self.round)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivery_order_and_ticks() {
        let c = IncidenceMatrix::new(1, 2, [(0, 0), (0, 1)]).unwrap();
        let mut net = Network::new(&c);
        net.send(MessageKind::RateReport, AgentId::Vertex(1), AgentId::Connection(0), Payload::Scalar(1.0));
        net.send(MessageKind::RateReport, AgentId::Vertex(0), AgentId::Connection(0), Payload::Scalar(2.0));
        let a = net.deliver().unwrap().unwrap();
        let b = net.deliver().unwrap().unwrap();
        assert_eq!(a.from, AgentId::Vertex(1));
        assert_eq!(b.from, AgentId::Vertex(0));
        assert_eq!(net.stats.ticks, 1);
        net.send(MessageKind::PriceNotify, AgentId::Connection(0), AgentId::Vertex(0), Payload::Scalar(0.0));
        net.deliver().unwrap().unwrap();
        assert_eq!(net.stats.ticks, 2);
        assert!(net.deliver().unwrap().is_none());
        assert_eq!(net.take_round(), 3);
        assert_eq!(net.stats.total_messages(), 3);
    }

    #[test]
    fn unrelated_agents_are_rejected() {
        let c = IncidenceMatrix::new(2, 2, [(0, 0), (1, 1)]).unwrap();
        let mut net = Network::new(&c);
        net.send(MessageKind::RateReport, AgentId::Vertex(0), AgentId::Connection(1), Payload::Scalar(1.0));
        assert!(matches!(net.deliver(), Err(Error::Protocol(_))));
        net.send(MessageKind::RateReport, AgentId::Vertex(0), AgentId::Vertex(1), Payload::Empty);
        assert!(net.deliver().is_err());
    }

    #[test]
    fn stats_json_shape() {
        let mut s = SimStats::default();
        s.messages_by_kind.insert(MessageKind::RateReport, 4);
        s.ticks = 2;
        s.component_oracle_calls = 7;
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(v["messages"]["RateReport"], 4);
        assert_eq!(v["ticks"], 2);
        assert_eq!(v["oracle_calls"], 7);
    }
}
