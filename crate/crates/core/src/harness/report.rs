use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::NodeId;
use crate::simnet::{GroundTruth, Metrics, SimTime};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub expectation: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteOutcome {
    pub nodes: Vec<NodeId>,
    pub accepted_at: SimTime,
    pub replier: NodeId,
    pub truth: GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryOutcome {
    pub source: NodeId,
    pub target: NodeId,
    pub qseq: u16,
    pub qid: u32,
    pub attempt: u32,
    pub issued_at: SimTime,
    pub closed_at: SimTime,
    pub latency_us: Option<SimTime>,
    pub routes: Vec<RouteOutcome>,
    /// No accepted route, and every path to the target crosses an attacker.
    pub partitioned: bool,
    /// A later attempt for the same pair followed this one.
    pub retried: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub discoveries: Vec<DiscoveryOutcome>,
    pub packets_by_node: BTreeMap<NodeId, u64>,
    /// `event/reason` to count.
    pub rejections: BTreeMap<String, u64>,
    pub metrics: Metrics,
    pub verdicts: Vec<Verdict>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn accepted_routes(&self) -> impl Iterator<Item = &RouteOutcome> {
        self.discoveries.iter().flat_map(|d| d.routes.iter())
    }

    pub fn false_routes(&self) -> impl Iterator<Item = &RouteOutcome> {
        self.accepted_routes().filter(|r| !r.truth.is_genuine())
    }

    pub fn genuine_routes(&self) -> impl Iterator<Item = &RouteOutcome> {
        self.accepted_routes().filter(|r| r.truth.is_genuine())
    }

    /// Share of final attempts that accepted at least one route.
    pub fn success_fraction(&self) -> f64 {
        let finals: Vec<_> = self.discoveries.iter().filter(|d| !d.retried).collect();
        if finals.is_empty() {
            return 0.0;
        }
        finals.iter().filter(|d| !d.routes.is_empty()).count() as f64 / finals.len() as f64
    }

    pub fn rejection(&self, event: &str, reason: &str) -> u64 {
        self.rejections.get(&format!("{event}/{reason}")).copied().unwrap_or(0)
    }

    /// Flat key/value view.
    pub fn flatten(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        m.insert("scenario".into(), Value::from(self.scenario.clone()));
        m.insert("seed".into(), Value::from(self.seed));
        m.insert("passed".into(), Value::from(self.passed()));
        m.insert("discoveries".into(), Value::from(self.discoveries.len()));
        m.insert("success_fraction".into(), Value::from(self.success_fraction()));
        m.insert("routes.accepted".into(), Value::from(self.accepted_routes().count()));
        m.insert("routes.genuine".into(), Value::from(self.genuine_routes().count()));
        m.insert("routes.false".into(), Value::from(self.false_routes().count()));
        for (i, d) in self.discoveries.iter().enumerate() {
            let k = format!("discovery.{i}");
            m.insert(format!("{k}.pair"), Value::from(format!("{}->{}", d.source, d.target)));
            m.insert(format!("{k}.routes"), Value::from(d.routes.len()));
            if let Some(l) = d.latency_us {
                m.insert(format!("{k}.latency_us"), Value::from(l));
            }
            if d.partitioned {
                m.insert(format!("{k}.partitioned"), Value::from(true));
            }
        }
        for (n, c) in &self.packets_by_node {
            m.insert(format!("packets.{n}"), Value::from(*c));
        }
        for (k, c) in &self.rejections {
            m.insert(format!("reject.{k}"), Value::from(*c));
        }
        for (k, v) in self.metrics.iter() {
            m.insert(format!("metric.{k}"), Value::from(v));
        }
        for (i, v) in self.verdicts.iter().enumerate() {
            m.insert(format!("verdict.{i}.{}", v.expectation), Value::from(if v.passed { "pass" } else { "fail" }));
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Human,
    Machine,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "human" => Ok(ReportFormat::Human),
            "machine" => Ok(ReportFormat::Machine),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

pub fn emit_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Human => human(report),
        ReportFormat::Machine => {
            let mut s = serde_json::to_string(&report.flatten()).expect("flat map serializes");
            s.push('\n');
            s
        }
    }
}

/// Reads back the machine format, one JSON object per line.
pub fn parse_machine_report(text: &str) -> Result<BTreeMap<String, Value>, serde_json::Error> {
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: BTreeMap<String, Value> = serde_json::from_str(line)?;
        out.extend(m);
    }
    Ok(out)
}

fn route_str(r: &[NodeId]) -> String {
    r.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

fn human(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario {} (seed {})", r.scenario, r.seed);
    if !r.discoveries.is_empty() {
        let _ = writeln!(s, "\n{:<12} {:>5} {:>4} {:>12} {:>6}", "pair", "qseq", "try", "latency_ms", "routes");
        for d in &r.discoveries {
            let lat = d.latency_us.map(|l| format!("{:.3}", l as f64 / 1000.0)).unwrap_or_else(|| "-".into());
            let pair = format!("{}->{}", d.source, d.target);
            let _ = writeln!(s, "{pair:<12} {:>5} {:>4} {lat:>12} {:>6}", d.qseq, d.attempt, d.routes.len());
            for route in &d.routes {
                let truth = match route.truth {
                    GroundTruth::Genuine => "genuine".to_string(),
                    GroundTruth::False { link: (a, b) } => format!("FALSE at {a}-{b}"),
                };
                let _ = writeln!(s, "    [{}] {truth}", route_str(&route.nodes));
            }
            if d.partitioned {
                let _ = writeln!(s, "    partitioned: every path crosses an attacker");
            }
        }
        let _ = writeln!(
            s,
            "routes: {} accepted, {} genuine, {} false",
            r.accepted_routes().count(),
            r.genuine_routes().count(),
            r.false_routes().count()
        );
    }
    if !r.packets_by_node.is_empty() {
        let _ = writeln!(s, "\n{:<8} {:>8}", "node", "packets");
        for (n, c) in &r.packets_by_node {
            let _ = writeln!(s, "{:<8} {c:>8}", n.to_string());
        }
    }
    if !r.rejections.is_empty() {
        let _ = writeln!(s, "\n{:<40} {:>8}", "rejection", "count");
        for (k, c) in &r.rejections {
            let _ = writeln!(s, "{k:<40} {c:>8}");
        }
    }
    if !r.verdicts.is_empty() {
        s.push('\n');
        for v in &r.verdicts {
            let _ = writeln!(s, "{} {} ({})", if v.passed { "PASS" } else { "FAIL" }, v.expectation, v.detail);
        }
    }
    s
}
