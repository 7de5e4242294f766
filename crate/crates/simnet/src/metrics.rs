use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use treesync_core::agent::AgentStats;
use treesync_core::Revision;

/// One scripted command as observed end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub issued_at_ms: u64,
    /// Commit revision, once the server acknowledged the write.
    pub revision: Option<Revision>,
    /// When the agent drove the LED for this revision.
    pub applied_at_ms: Option<u64>,
}

impl CommandRecord {
    pub fn latency_ms(&self) -> Option<u64> {
        self.applied_at_ms.map(|a| a - self.issued_at_ms)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub rejected: u64,
    pub mean_ms: f64,
    pub p50_ms: u64,
    pub p95_ms: u64,
    pub max_ms: u64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Issue-to-actuator latency over the commands the agent accepted.
pub fn measure_control_latency(records: &[CommandRecord]) -> LatencySummary {
    let mut samples: Vec<u64> = records
        .iter()
        .filter_map(CommandRecord::latency_ms)
        .collect();
    samples.sort_unstable();
    let count = samples.len() as u64;
    let mean_ms = if samples.is_empty() {
        0.0
    } else {
        samples.iter().sum::<u64>() as f64 / samples.len() as f64
    };
    LatencySummary {
        count,
        rejected: records.len() as u64 - count,
        mean_ms,
        p50_ms: percentile(&samples, 0.5),
        p95_ms: percentile(&samples, 0.95),
        max_ms: samples.last().copied().unwrap_or(0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub partition_start_ms: u64,
    pub partition_end_ms: u64,
    /// From partition start to the first frame delivered after it ends.
    pub recovery_time_ms: Option<u64>,
    pub after_end_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub duration_ms: u64,
    pub frames_produced: u64,
    pub frames_delivered: u64,
    pub frames_delivered_first_pass: u64,
    pub frames_in_flight: u64,
    pub frames_buffered: u64,
    pub frames_dropped: u64,
    pub first_pass_success_rate: f64,
    pub eventual_delivery_rate: f64,
    /// Agent steps at which produced != delivered + in flight + buffered + dropped.
    pub conservation_violations: u64,
    pub sensor_update_hz: f64,
    pub control_latency: LatencySummary,
    pub commands: Vec<CommandRecord>,
    pub recovery: Vec<RecoveryRecord>,
    pub subscriptions: u64,
    pub events_expected: u64,
    pub events_received: u64,
    pub event_loss_count: u64,
    pub event_order_violations: u64,
    pub commits: u64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub agent: AgentStats,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn mean_recovery_ms(&self) -> Option<f64> {
        let times: Vec<u64> = self.recovery.iter().filter_map(|r| r.recovery_time_ms).collect();
        (!times.is_empty()).then(|| times.iter().sum::<u64>() as f64 / times.len() as f64)
    }

    /// Target-versus-simulated summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, metric: &str, target: &str, got: String, unit: &str| {
            let _ = writeln!(out, "{metric:<28} {target:>8} {got:>10}  {unit}");
        };
        row(&mut out, "Metric", "Target", "Simulated".into(), "Unit");
        row(
            &mut out,
            "Data Transmission Success",
            "99.0",
            format!("{:.2}", 100.0 * self.first_pass_success_rate),
            "%",
        );
        let latency = if self.control_latency.count > 0 {
            format!("{:.2}", self.control_latency.mean_ms / 1000.0)
        } else {
            "n/a".into()
        };
        row(&mut out, "Control Command Latency", "<2.0", latency, "seconds");
        row(
            &mut out,
            "Sensor Update Frequency",
            "1.0",
            format!("{:.2}", self.sensor_update_hz),
            "Hz",
        );
        let recovery = self
            .mean_recovery_ms()
            .map_or_else(|| "n/a".into(), |ms| format!("{:.2}", ms / 1000.0));
        row(&mut out, "Network Recovery Time", "<10", recovery, "seconds");
        let _ = writeln!(
            out,
            "\nframes: {} produced, {} delivered ({} first pass), {} buffered, {} dropped; eventual delivery {:.4}",
            self.frames_produced,
            self.frames_delivered,
            self.frames_delivered_first_pass,
            self.frames_buffered,
            self.frames_dropped,
            self.eventual_delivery_rate
        );
        if self.control_latency.count > 0 {
            let _ = writeln!(
                out,
                "latency: p50 {} ms, p95 {} ms, max {} ms over {} commands ({} not applied)",
                self.control_latency.p50_ms,
                self.control_latency.p95_ms,
                self.control_latency.max_ms,
                self.control_latency.count,
                self.control_latency.rejected
            );
        }
        if self.subscriptions > 0 {
            let _ = writeln!(
                out,
                "events: {} expected, {} received, {} lost across {} subscriptions",
                self.events_expected, self.events_received, self.event_loss_count, self.subscriptions
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 0.95), 95);
        assert_eq!(percentile(&v, 0.5), 50);
        assert_eq!(percentile(&[7], 0.95), 7);
        assert_eq!(percentile(&[], 0.95), 0);
    }

    #[test]
    fn latency_skips_unapplied_commands() {
        let r = |issued, applied| CommandRecord {
            issued_at_ms: issued,
            revision: Some(Revision(1)),
            applied_at_ms: applied,
        };
        let s = measure_control_latency(&[r(0, Some(700)), r(100, Some(800)), r(200, None)]);
        assert_eq!(s.count, 2);
        assert_eq!(s.rejected, 1);
        assert_eq!(s.mean_ms, 700.0);
        assert_eq!(s.max_ms, 700);
    }
}
