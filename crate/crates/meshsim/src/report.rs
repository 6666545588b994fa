//! Run reports: machine-readable summaries, the CSV schemas and paired
//! protocol comparisons.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::engine::{run_scenario_with, EngineError, RunOptions};
use crate::metrics::{packet_loss, pdr, throughput_avg_bps, Counters, TimeSeries};
use crate::scenario::{Protocol, Scenario};

#[derive(Debug, Clone, Serialize)]
pub struct MetricsSummary {
    pub counters: Counters,
    pub pdr: Option<f64>,
    pub packet_loss_count: u64,
    pub packet_loss_ratio: Option<f64>,
    pub throughput_avg_bps: f64,
    pub in_flight_at_end: u64,
}

impl MetricsSummary {
    pub fn compute(counters: Counters, duration_s: f64, in_flight_at_end: u64) -> MetricsSummary {
        let (packet_loss_count, packet_loss_ratio) = packet_loss(&counters);
        MetricsSummary {
            pdr: pdr(&counters),
            packet_loss_count,
            packet_loss_ratio,
            throughput_avg_bps: throughput_avg_bps(&counters, duration_s),
            in_flight_at_end,
            counters,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowSummary {
    pub flow_id: u32,
    #[serde(flatten)]
    pub metrics: MetricsSummary,
    /// Peak transport window occupancy; reliable flows only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reliable_max_in_flight: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesRow {
    pub t_bin_start_s: f64,
    pub delivered_bits_per_s: f64,
    pub pdr_cumulative: Option<f64>,
}

/// Everything one run produced. Reproducible byte-for-byte from
/// (scenario, seed): no wall-clock state is recorded.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub scenario_digest: String,
    pub protocol: Protocol,
    pub seed: u64,
    pub duration_s: f64,
    pub totals: MetricsSummary,
    pub flows: Vec<FlowSummary>,
    pub series_bin_s: f64,
    pub series: Vec<SeriesRow>,
    pub events_processed: u64,
    pub frames_transmitted: u64,
    pub aal2r_hop_violations: u64,
    /// The complete effective configuration, defaults included.
    pub scenario: Scenario,
}

impl Report {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        scenario: &Scenario,
        protocol: Protocol,
        totals: MetricsSummary,
        flows: Vec<FlowSummary>,
        series: &TimeSeries,
        events_processed: u64,
        frames_transmitted: u64,
        aal2r_hop_violations: u64,
    ) -> Report {
        let mut rows = Vec::with_capacity(series.bins());
        let mut cum_sent = 0u64;
        let mut cum_delivered = 0u64;
        for bin in 0..series.bins() {
            cum_sent += series.sent_pkts[bin];
            cum_delivered += series.delivered_pkts[bin];
            rows.push(SeriesRow {
                t_bin_start_s: bin as f64 * series.bin_s,
                delivered_bits_per_s: series.delivered_bytes[bin] as f64 * 8.0 / series.bin_s,
                pdr_cumulative: (cum_sent > 0).then(|| cum_delivered as f64 / cum_sent as f64),
            });
        }
        Report {
            scenario_digest: scenario.digest(),
            protocol,
            seed: scenario.seed,
            duration_s: scenario.duration_s,
            totals,
            flows,
            series_bin_s: series.bin_s,
            series: rows,
            events_processed,
            frames_transmitted,
            aal2r_hop_violations,
            scenario: scenario.clone(),
        }
    }

    /// Summary CSV: one `metric,flow_id,value` row per metric, totals first.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,flow_id,value\n");
        write_metric_rows(&mut out, "total", &self.totals);
        for flow in &self.flows {
            write_metric_rows(&mut out, &flow.flow_id.to_string(), &flow.metrics);
        }
        out
    }

    /// Series CSV: `t_bin_start_s,protocol,delivered_bits_per_s,pdr_cumulative`.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("t_bin_start_s,protocol,delivered_bits_per_s,pdr_cumulative\n");
        for row in &self.series {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                fmt_f64(row.t_bin_start_s),
                self.protocol,
                fmt_f64(row.delivered_bits_per_s),
                fmt_opt(row.pdr_cumulative),
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes summary.csv, series.csv and report.json under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("series.csv"), self.series_csv())?;
        fs::write(dir.join("report.json"), self.to_json())?;
        Ok(())
    }
}

fn write_metric_rows(out: &mut String, flow_id: &str, m: &MetricsSummary) {
    let c = &m.counters;
    let ints: [(&str, u64); 17] = [
        ("sent", c.sent),
        ("received", c.received),
        ("duplicates", c.duplicates),
        ("retransmissions", c.retransmissions),
        ("dropped_queue", c.dropped_queue),
        ("dropped_noroute", c.dropped_noroute),
        ("dropped_hopbudget", c.dropped_hopbudget),
        ("dropped_linkloss", c.dropped_linkloss),
        ("bytes_delivered", c.bytes_delivered),
        ("control_bytes_sent", c.control_bytes_sent),
        ("control_msgs_sent", c.control_msgs_sent),
        ("control_dropped", c.control_dropped),
        ("acks_sent", c.acks_sent),
        ("acks_delivered", c.acks_delivered),
        ("acks_dropped", c.acks_dropped),
        ("routing_errors", c.routing_errors),
        ("in_flight_at_end", m.in_flight_at_end),
    ];
    for (name, value) in ints {
        let _ = writeln!(out, "{name},{flow_id},{value}");
    }
    let _ = writeln!(out, "pdr,{flow_id},{}", fmt_opt(m.pdr));
    let _ = writeln!(out, "packet_loss_count,{flow_id},{}", m.packet_loss_count);
    let _ = writeln!(
        out,
        "packet_loss_ratio,{flow_id},{}",
        fmt_opt(m.packet_loss_ratio)
    );
    let _ = writeln!(
        out,
        "throughput_avg_bps,{flow_id},{}",
        fmt_f64(m.throughput_avg_bps)
    );
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => fmt_f64(v),
        None => "na".to_string(),
    }
}

/// One protocol's metrics on one seed, for side-by-side comparison.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRun {
    pub seed: u64,
    pub protocol: Protocol,
    pub pdr: Option<f64>,
    pub packet_loss_ratio: Option<f64>,
    pub throughput_avg_bps: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub scenario_digest: String,
    pub protocols: Vec<Protocol>,
    pub seeds: Vec<u64>,
    pub runs: Vec<CompareRun>,
    pub mean_pdr: Vec<(Protocol, f64)>,
    pub mean_throughput_bps: Vec<(Protocol, f64)>,
    /// Fraction of seeds on which AAL2R's PDR was at least GSR's; only
    /// present when both protocols were compared.
    pub aal2r_pdr_ge_gsr_fraction: Option<f64>,
    pub aal2r_throughput_ge_gsr_fraction: Option<f64>,
}

/// Runs each protocol over the identical scenario and seed set and pairs up
/// the results. Duplicate protocols are collapsed.
pub fn compare(
    scenario: &Scenario,
    protocols: &[Protocol],
    seeds: &[u64],
) -> Result<CompareReport, EngineError> {
    assert!(
        !protocols.is_empty(),
        "compare requires at least one protocol"
    );
    assert!(!seeds.is_empty(), "compare requires at least one seed");
    let mut unique: Vec<Protocol> = Vec::new();
    for &p in protocols {
        if !unique.contains(&p) {
            unique.push(p);
        }
    }

    let mut runs = Vec::new();
    for &seed in seeds {
        for &protocol in &unique {
            let opts = RunOptions {
                protocol: Some(protocol),
                seed: Some(seed),
                record_tx_log: false,
            };
            let report = run_scenario_with(scenario, &opts)?.report;
            runs.push(CompareRun {
                seed,
                protocol,
                pdr: report.totals.pdr,
                packet_loss_ratio: report.totals.packet_loss_ratio,
                throughput_avg_bps: report.totals.throughput_avg_bps,
            });
        }
    }

    let mean = |f: &dyn Fn(&CompareRun) -> f64, p: Protocol| -> f64 {
        let vals: Vec<f64> = runs.iter().filter(|r| r.protocol == p).map(f).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let mean_pdr: Vec<(Protocol, f64)> = unique
        .iter()
        .map(|&p| (p, mean(&|r| r.pdr.unwrap_or(0.0), p)))
        .collect();
    let mean_throughput_bps: Vec<(Protocol, f64)> = unique
        .iter()
        .map(|&p| (p, mean(&|r| r.throughput_avg_bps, p)))
        .collect();

    let both = unique.contains(&Protocol::Gsr) && unique.contains(&Protocol::Aal2r);
    let fraction = |f: &dyn Fn(&CompareRun) -> f64| -> Option<f64> {
        if !both {
            return None;
        }
        let mut wins = 0usize;
        for &seed in seeds {
            let of = |p: Protocol| {
                runs.iter()
                    .find(|r| r.seed == seed && r.protocol == p)
                    .map(f)
                    .expect("paired run exists")
            };
            if of(Protocol::Aal2r) >= of(Protocol::Gsr) {
                wins += 1;
            }
        }
        Some(wins as f64 / seeds.len() as f64)
    };

    Ok(CompareReport {
        scenario_digest: scenario.digest(),
        protocols: unique,
        seeds: seeds.to_vec(),
        aal2r_pdr_ge_gsr_fraction: fraction(&|r| r.pdr.unwrap_or(0.0)),
        aal2r_throughput_ge_gsr_fraction: fraction(&|r| r.throughput_avg_bps),
        mean_pdr,
        mean_throughput_bps,
        runs,
    })
}

impl CompareReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("seed,protocol,pdr,packet_loss_ratio,throughput_avg_bps\n");
        for run in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                run.seed,
                run.protocol,
                fmt_opt(run.pdr),
                fmt_opt(run.packet_loss_ratio),
                fmt_f64(run.throughput_avg_bps),
            );
        }
        out
    }

    pub fn text_summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario {}  seeds {:?}",
            self.scenario_digest, self.seeds
        );
        for run in &self.runs {
            let _ = writeln!(
                out,
                "  seed {:>3}  {:<5}  pdr {:<10}  throughput {:.1} bit/s",
                run.seed,
                run.protocol.to_string(),
                fmt_opt(run.pdr),
                run.throughput_avg_bps,
            );
        }
        for (p, v) in &self.mean_pdr {
            let _ = writeln!(out, "mean pdr        {p:<5} {v:.6}");
        }
        for (p, v) in &self.mean_throughput_bps {
            let _ = writeln!(out, "mean throughput {p:<5} {v:.1} bit/s");
        }
        if let Some(f) = self.aal2r_pdr_ge_gsr_fraction {
            let _ = writeln!(out, "aal2r pdr >= gsr on {:.0}% of seeds", f * 100.0);
        }
        if let Some(f) = self.aal2r_throughput_ge_gsr_fraction {
            let _ = writeln!(out, "aal2r throughput >= gsr on {:.0}% of seeds", f * 100.0);
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("compare.csv"), self.csv())?;
        fs::write(
            dir.join("compare.json"),
            serde_json::to_string_pretty(self).expect("serializes"),
        )?;
        Ok(())
    }
}

/// Seed list for a multi-seed comparison: base, base+1, ...
pub fn seed_range(base: u64, count: u64) -> Vec<u64> {
    (0..count).map(|i| base + i).collect()
}
