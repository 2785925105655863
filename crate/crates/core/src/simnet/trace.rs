use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SimTime;
use crate::codec::{NodeId, Packet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Rx,
    Tx,
    Local,
}

/// One structured trace line. `event` and `reason` are stable strings and
/// part of the test contract.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: SimTime,
    pub node: NodeId,
    pub direction: Direction,
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packet: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qseq: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qid: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<Vec<NodeId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl TraceRecord {
    pub fn new(time: SimTime, node: NodeId, direction: Direction, event: &str) -> Self {
        TraceRecord {
            time,
            node,
            direction,
            event: event.to_owned(),
            reason: None,
            packet: None,
            peer: None,
            source: None,
            target: None,
            qseq: None,
            qid: None,
            route: None,
            raw: None,
        }
    }

    pub fn reason(mut self, r: &str) -> Self {
        self.reason = Some(r.to_owned());
        self
    }

    pub fn peer(mut self, p: NodeId) -> Self {
        self.peer = Some(p);
        self
    }

    pub fn route(mut self, r: &[NodeId]) -> Self {
        self.route = Some(r.to_vec());
        self
    }

    pub fn query(mut self, source: NodeId, target: NodeId, qseq: u16, qid: u32) -> Self {
        self.source = Some(source);
        self.target = Some(target);
        self.qseq = Some(qseq);
        self.qid = Some(qid);
        self
    }

    /// Fills in the query fields and a one-line summary from a packet.
    pub fn packet(mut self, pkt: &Packet) -> Self {
        let h = pkt.header();
        self.qseq = Some(h.qseq);
        self.qid = Some(h.qid);
        match pkt {
            Packet::Request(r) => {
                self.source = Some(r.source);
                self.target = Some(r.target);
            }
            Packet::Reply(r) => {
                self.source = Some(r.source);
                self.target = Some(r.target);
            }
            Packet::Error(e) => {
                self.source = e.reported_route.first().copied();
                self.target = e.reported_route.last().copied();
            }
        }
        self.packet = Some(summarize(pkt));
        self
    }

    pub fn has(&self, event: &str, reason: Option<&str>) -> bool {
        self.event == event && (reason.is_none() || self.reason.as_deref() == reason)
    }
}

fn join(route: &[NodeId]) -> String {
    route.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn summarize(pkt: &Packet) -> String {
    match pkt {
        Packet::Request(r) => format!(
            "REQ {}->{} qseq={} qid={:08x} ttl={} route=[{}]{}",
            r.source,
            r.target,
            r.qseq(),
            r.qid(),
            r.ttl,
            join(&r.accumulated_route),
            if r.header.inrt().is_some() { " inrt" } else { "" }
        ),
        Packet::Reply(r) => format!(
            "REP {}->{} qseq={} qid={:08x} route=[{}] sr=[{}] trav=[{}]",
            r.source,
            r.target,
            r.header.qseq,
            r.header.qid,
            join(&r.replied_route),
            join(&r.ip_source_route),
            join(&r.traversed_route)
        ),
        Packet::Error(e) => format!(
            "ERR reporter={} link=({},{}) route=[{}] sr=[{}] trav=[{}]",
            e.reporter,
            e.broken_link.0,
            e.broken_link.1,
            join(&e.reported_route),
            join(&e.ip_source_route),
            join(&e.traversed_route)
        ),
    }
}

/// Append-only run log.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn count(&self, node: Option<NodeId>, event: &str, reason: Option<&str>) -> usize {
        self.records
            .iter()
            .filter(|r| node.is_none_or(|n| r.node == n) && r.has(event, reason))
            .count()
    }

    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Trace, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Trace { records })
    }
}

/// Flat counters keyed by dotted names.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Metrics(BTreeMap<String, u64>);

impl Metrics {
    pub fn add(&mut self, key: &str, v: u64) {
        if v == 0 {
            return;
        }
        *self.0.entry(key.to_owned()).or_default() += v;
    }

    pub fn inc(&mut self, key: &str) {
        self.add(key, 1);
    }

    pub fn get(&self, key: &str) -> u64 {
        self.0.get(key).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let mut t = Trace::default();
        t.push(TraceRecord::new(5, NodeId(1), Direction::Rx, "drop").reason("Duplicate").peer(NodeId(2)));
        t.push(TraceRecord::new(7, NodeId(100), Direction::Local, "accept").route(&[NodeId(100), NodeId(200)]));
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"time":5,"node":1,"direction":"rx","event":"drop","reason":"Duplicate","peer":2}"#));
        assert_eq!(Trace::parse_jsonl(&text).unwrap(), t);
        assert_eq!(t.count(None, "drop", Some("Duplicate")), 1);
        assert_eq!(t.count(Some(NodeId(1)), "accept", None), 0);
    }
}
