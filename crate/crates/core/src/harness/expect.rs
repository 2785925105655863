use serde::{Deserialize, Serialize};

use super::report::Verdict;
use super::runner::RunOutcome;
use crate::codec::NodeId;
use crate::node::RouteStatus;
use crate::simnet::{SimTime, MS};

/// A check declared by a scenario file and evaluated after the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expectation {
    /// Bounds on the number of matching trace records.
    TraceCount {
        #[serde(default)]
        node: Option<NodeId>,
        event: String,
        #[serde(default)]
        reason: Option<String>,
        #[serde(default)]
        min: Option<usize>,
        #[serde(default)]
        max: Option<usize>,
        /// Only records at or after this time.
        #[serde(default)]
        from_ms: Option<u64>,
        /// Only records before this time.
        #[serde(default)]
        until_ms: Option<u64>,
    },
    NoFalseRoutes,
    /// Exact number of false accepted routes, each containing every listed id.
    FalseRoutes {
        count: usize,
        #[serde(default)]
        containing: Vec<NodeId>,
    },
    RouteAccepted {
        route: Vec<NodeId>,
        #[serde(default)]
        genuine: Option<bool>,
    },
    NoRouteContains { node: NodeId },
    GenuineRoutes { min: usize },
    /// Fraction of discoveries (final attempts) that accepted at least one route.
    SuccessFraction {
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
    RouteStatus { source: NodeId, route: Vec<NodeId>, status: RouteStatus },
}

impl Expectation {
    pub fn label(&self) -> String {
        match self {
            Expectation::TraceCount { node, event, reason, min, max, from_ms, until_ms } => {
                let mut s = format!("trace_count {event}");
                if let Some(r) = reason {
                    s += &format!("/{r}");
                }
                if let Some(n) = node {
                    s += &format!(" at {n}");
                }
                match (from_ms, until_ms) {
                    (None, None) => {}
                    (a, b) => s += &format!(" in [{}, {}) ms", a.unwrap_or(0), b.map_or("end".into(), |b| b.to_string())),
                }
                match (min, max) {
                    (Some(a), Some(b)) if a == b => s += &format!(" == {a}"),
                    _ => {
                        if let Some(a) = min {
                            s += &format!(" >= {a}");
                        }
                        if let Some(b) = max {
                            s += &format!(" <= {b}");
                        }
                    }
                }
                s
            }
            Expectation::NoFalseRoutes => "no_false_routes".into(),
            Expectation::FalseRoutes { count, containing } => {
                format!("false_routes == {count} containing {}", ids(containing))
            }
            Expectation::RouteAccepted { route, genuine } => match genuine {
                Some(true) => format!("route_accepted {} genuine", ids(route)),
                Some(false) => format!("route_accepted {} false", ids(route)),
                None => format!("route_accepted {}", ids(route)),
            },
            Expectation::NoRouteContains { node } => format!("no_route_contains {node}"),
            Expectation::GenuineRoutes { min } => format!("genuine_routes >= {min}"),
            Expectation::SuccessFraction { min, max } => {
                let mut s = "success_fraction".to_string();
                if let Some(a) = min {
                    s += &format!(" >= {a}");
                }
                if let Some(b) = max {
                    s += &format!(" <= {b}");
                }
                s
            }
            Expectation::RouteStatus { source, route, status } => {
                format!("route_status {} at {source} {status:?}", ids(route))
            }
        }
    }

    pub fn evaluate(&self, out: &RunOutcome) -> Verdict {
        let (passed, detail) = self.check(out);
        Verdict { expectation: self.label(), passed, detail }
    }

    fn check(&self, out: &RunOutcome) -> (bool, String) {
        let report = &out.report;
        match self {
            Expectation::TraceCount { node, event, reason, min, max, from_ms, until_ms } => {
                let from = from_ms.map_or(0, |t| t * MS);
                let until = until_ms.map_or(SimTime::MAX, |t| t * MS);
                let n = out
                    .trace
                    .iter()
                    .filter(|r| (from..until).contains(&r.time) && node.is_none_or(|n| r.node == n))
                    .filter(|r| r.has(event, reason.as_deref()))
                    .count();
                let ok = min.is_none_or(|m| n >= m) && max.is_none_or(|m| n <= m);
                (ok, format!("observed {n}"))
            }
            Expectation::NoFalseRoutes => {
                let n = report.false_routes().count();
                (n == 0, format!("{n} false"))
            }
            Expectation::FalseRoutes { count, containing } => {
                let falses: Vec<_> = report.false_routes().collect();
                let all_contain = falses.iter().all(|r| containing.iter().all(|c| r.nodes.contains(c)));
                (falses.len() == *count && all_contain, format!("{} false", falses.len()))
            }
            Expectation::RouteAccepted { route, genuine } => {
                let hit = report.accepted_routes().find(|r| &r.nodes == route);
                match hit {
                    None => (false, "not accepted".into()),
                    Some(r) => {
                        let g = r.truth.is_genuine();
                        (genuine.is_none_or(|want| want == g), if g { "genuine".into() } else { "false".into() })
                    }
                }
            }
            Expectation::NoRouteContains { node } => {
                let n = report.accepted_routes().filter(|r| r.nodes.contains(node)).count();
                (n == 0, format!("{n} routes contain it"))
            }
            Expectation::GenuineRoutes { min } => {
                let n = report.genuine_routes().count();
                (n >= *min, format!("{n} genuine"))
            }
            Expectation::SuccessFraction { min, max } => {
                let f = report.success_fraction();
                let ok = min.is_none_or(|m| f >= m) && max.is_none_or(|m| f <= m);
                (ok, format!("observed {f:.4}"))
            }
            Expectation::RouteStatus { source, route, status } => {
                let cached = out
                    .nodes
                    .get(source)
                    .and_then(|n| route.last().map(|t| n.source.cache.routes_to(*t)))
                    .and_then(|rs| rs.iter().find(|c| &c.nodes == route));
                match cached {
                    None => (false, "not cached".into()),
                    Some(c) => (c.status == *status, format!("{:?}", c.status)),
                }
            }
        }
    }
}

fn ids(route: &[NodeId]) -> String {
    let parts: Vec<String> = route.iter().map(|n| n.to_string()).collect();
    format!("[{}]", parts.join(","))
}
