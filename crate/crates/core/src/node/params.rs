use serde::{Deserialize, Serialize};

use crate::crypto::{MacAlgorithm, QidMode};
use crate::simnet::SimTime;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyMode {
    #[default]
    Normal,
    EmptyPayload,
}

/// Relay scheduler knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerParams {
    /// Queries per second below which a neighbor sits in the top class.
    pub benign_threshold: f64,
    /// Each further class boundary is this many times the previous one.
    pub ladder_factor: f64,
    /// Token-bucket depth per class, highest priority first.
    pub quanta: [u32; 4],
    /// Tokens per second granted per unit of quantum.
    pub refill_per_quantum: f64,
    pub ewma_alpha: f64,
    pub rate_window_us: SimTime,
    pub queue_expiry_us: SimTime,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        SchedulerParams {
            benign_threshold: 2.0,
            ladder_factor: 4.0,
            quanta: [8, 4, 2, 1],
            refill_per_quantum: 1.0,
            ewma_alpha: 0.1,
            rate_window_us: 1_000_000,
            queue_expiry_us: 2_000_000,
        }
    }
}

impl SchedulerParams {
    pub const CLASSES: usize = 4;

    /// Lower rate bound of classes 1..=3.
    pub fn thresholds(&self) -> [f64; 3] {
        let b = self.benign_threshold;
        let f = self.ladder_factor;
        [b, b * f, b * f * f]
    }

    pub fn class_for_rate(&self, rate: f64) -> u8 {
        self.thresholds().iter().filter(|&&t| rate >= t).count() as u8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    pub ttl: u8,
    pub latency_us: SimTime,
    pub tick_us: SimTime,
    pub reply_mode: ReplyMode,
    pub qid_mode: QidMode,
    pub mac: MacAlgorithm,
    pub query_table_size: usize,
    /// Demote transmitters that relay under more than one network id.
    pub hardening: bool,
    /// Source-side reply window. Derived from the topology when absent.
    pub source_window_us: Option<SimTime>,
    /// Destination-side reply window. Derived from the topology when absent.
    pub dest_window_us: Option<SimTime>,
    pub max_routes: usize,
    pub max_retries: u32,
    pub backoff_base_us: SimTime,
    pub request_inrt: bool,
    pub trace_packets: bool,
    pub scheduler: SchedulerParams,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            ttl: 16,
            latency_us: 1_000,
            tick_us: 10_000,
            reply_mode: ReplyMode::Normal,
            qid_mode: QidMode::Random,
            mac: MacAlgorithm::HmacMd5,
            query_table_size: 1024,
            hardening: false,
            source_window_us: None,
            dest_window_us: None,
            max_routes: 8,
            max_retries: 2,
            backoff_base_us: 1_000_000,
            request_inrt: false,
            trace_packets: false,
            scheduler: SchedulerParams::default(),
        }
    }
}

impl ProtocolParams {
    /// Worst-case cost of one request hop: link latency plus a full
    /// scheduler tick of queueing.
    pub fn per_hop_us(&self) -> SimTime {
        self.latency_us + self.tick_us
    }

    /// Fills unset reply windows from the network diameter (4x and 2x the
    /// diameter's traversal time for source and destination).
    pub fn resolve_windows(&mut self, diameter: usize) {
        let span = diameter.max(1) as SimTime * self.per_hop_us();
        self.source_window_us.get_or_insert(4 * span);
        self.dest_window_us.get_or_insert(2 * span);
    }

    pub fn source_window(&self) -> SimTime {
        self.source_window_us.unwrap_or(4 * self.per_hop_us())
    }

    pub fn dest_window(&self) -> SimTime {
        self.dest_window_us.unwrap_or(2 * self.per_hop_us())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_ladder() {
        let p = SchedulerParams::default();
        assert_eq!(p.thresholds(), [2.0, 8.0, 32.0]);
        assert_eq!(p.class_for_rate(0.0), 0);
        assert_eq!(p.class_for_rate(1.99), 0);
        assert_eq!(p.class_for_rate(2.0), 1);
        assert_eq!(p.class_for_rate(31.0), 2);
        assert_eq!(p.class_for_rate(100.0), 3);
    }

    #[test]
    fn windows_from_diameter() {
        let mut p = ProtocolParams::default();
        p.resolve_windows(5);
        assert_eq!(p.source_window_us, Some(4 * 5 * 11_000));
        assert_eq!(p.dest_window_us, Some(2 * 5 * 11_000));
        let mut q = ProtocolParams { source_window_us: Some(7), ..ProtocolParams::default() };
        q.resolve_windows(5);
        assert_eq!(q.source_window_us, Some(7));
    }
}
