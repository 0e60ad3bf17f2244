//! Reduction of run records into latency figures, counters and logs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use atmosphere_core::node::{NodeStats, Record};
use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::runtime::{is_alert, record_json, Connection, CpuSample, NodeSummary, Outcome, Stamped};

pub const BUCKET_LABELS: [&str; 5] = ["<=5", "6-10", "11-50", "51-100", ">100"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no latencies to bucket")]
pub struct EmptyInput;

/// Bucket index of a latency after rounding to the nearest millisecond.
pub fn bucket_of(latency_ms: f64) -> usize {
    let r = latency_ms.round();
    if r <= 5.0 {
        0
    } else if r <= 10.0 {
        1
    } else if r <= 50.0 {
        2
    } else if r <= 100.0 {
        3
    } else {
        4
    }
}

/// Percentage of latencies in each of the five buckets.
pub fn bucketize(latencies_ms: &[f64]) -> Result<[f64; 5], EmptyInput> {
    if latencies_ms.is_empty() {
        return Err(EmptyInput);
    }
    let mut counts = [0usize; 5];
    for &l in latencies_ms {
        counts[bucket_of(l)] += 1;
    }
    let n = latencies_ms.len() as f64;
    Ok(counts.map(|c| 100.0 * c as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    #[serde(rename = "<=5")]
    pub le_5: f64,
    #[serde(rename = "6-10")]
    pub le_10: f64,
    #[serde(rename = "11-50")]
    pub le_50: f64,
    #[serde(rename = "51-100")]
    pub le_100: f64,
    #[serde(rename = ">100")]
    pub over_100: f64,
}

impl From<[f64; 5]> for Buckets {
    fn from(p: [f64; 5]) -> Self {
        Buckets {
            le_5: p[0],
            le_10: p[1],
            le_50: p[2],
            le_100: p[3],
            over_100: p[4],
        }
    }
}

impl Buckets {
    /// Share of latencies at or below 50 ms.
    pub fn up_to_50(&self) -> f64 {
        self.le_5 + self.le_10 + self.le_50
    }
}

/// One completed round trip. Times are milliseconds since the first input.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round_trip_id: u64,
    pub sent_at: f64,
    pub received_at: f64,
    pub latency_ms: f64,
    pub qos: u8,
    pub mode: &'static str,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packets {
    pub publish: u64,
    pub puback: u64,
    pub acl: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerRoundTrip {
    pub publish: f64,
    pub puback: f64,
    pub acl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    /// `sim`, `threads` or `processes`.
    pub runtime: String,
    pub mode: String,
    pub qos: u8,
    pub clock: String,
    pub seed: u64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub stimuli_sent: usize,
    pub initiated: usize,
    pub completed: usize,
    pub lost: usize,
    pub in_flight: usize,
    /// Round trips sent after the warm-up that completed.
    pub measured: usize,
    pub mean_latency_ms: Option<f64>,
    pub min_latency_ms: Option<f64>,
    pub max_latency_ms: Option<f64>,
    pub buckets: Option<Buckets>,
    /// Completed round trips per second over the measured window.
    pub sustained_rate: f64,
    pub packets: Packets,
    pub per_round_trip: Option<PerRoundTrip>,
    pub cep_ingested: u64,
    pub cep_emitted: u64,
    pub dead_letters: u64,
    pub late_events: u64,
    pub mean_cpu_pct: BTreeMap<String, f64>,
    /// completed + lost + in flight equals initiated, with no id counted
    /// twice or unknown.
    pub conserved: bool,
    pub saturated: bool,
    pub timed_out: bool,
    pub elapsed_s: f64,
    pub nodes: Vec<NodeSummary>,
    pub connections: Vec<Connection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStep {
    Sent,
    Received,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeMark {
    pub id: u64,
    pub step: ProbeStep,
    pub t_us: u64,
}

/// What a report is built from: probe timings, log lines and node totals.
/// Runs split across processes produce one of these per process.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Parts {
    pub probes: Vec<ProbeMark>,
    pub alerts: Vec<(u64, String)>,
    pub emissions: Vec<(u64, String)>,
    pub nodes: Vec<NodeSummary>,
    pub cpu: Vec<CpuSample>,
    pub connections: Vec<Connection>,
    pub stimuli_sent: usize,
    pub saturated: bool,
    pub elapsed_us: u64,
}

impl Parts {
    pub fn from_outcome(mut o: Outcome) -> Parts {
        // Live records arrive from several threads; order them by time.
        o.records.sort_by_key(|r| r.t_us);
        let mut p = Parts {
            nodes: o.nodes,
            cpu: o.cpu,
            connections: o.connections,
            stimuli_sent: o.stimuli_sent,
            saturated: o.saturated,
            elapsed_us: o.elapsed_us,
            ..Parts::default()
        };
        for r in &o.records {
            let mark = |id: &u64, step| ProbeMark {
                id: *id,
                step,
                t_us: r.t_us,
            };
            match &r.record {
                Record::ProbeSent { id } => p.probes.push(mark(id, ProbeStep::Sent)),
                Record::ProbeReceived { id } => p.probes.push(mark(id, ProbeStep::Received)),
                Record::ProbeLost { id } => p.probes.push(mark(id, ProbeStep::Lost)),
                Record::Emission { .. } => p.emissions.push((r.t_us, line(r))),
                rec if is_alert(rec) => p.alerts.push((r.t_us, line(r))),
                _ => {}
            }
        }
        p
    }

    /// Folds in the parts of another process. Lines stay ordered by time,
    /// earlier parts first on ties.
    pub fn merge(&mut self, other: Parts) {
        self.probes.extend(other.probes);
        self.alerts.extend(other.alerts);
        self.emissions.extend(other.emissions);
        self.alerts.sort_by_key(|(t, _)| *t);
        self.emissions.sort_by_key(|(t, _)| *t);
        self.nodes.extend(other.nodes);
        self.cpu.extend(other.cpu);
        self.connections.extend(other.connections);
        self.stimuli_sent += other.stimuli_sent;
        self.saturated |= other.saturated;
        self.elapsed_us = self.elapsed_us.max(other.elapsed_us);
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: Summary,
    pub latencies: Vec<MetricsRecord>,
    pub cpu: Vec<CpuSample>,
    /// One JSON object per line, in time order.
    pub alerts: Vec<String>,
    pub emissions: Vec<String>,
}

impl RunReport {
    pub fn build(s: &Scenario, runtime: &str, parts: Parts) -> RunReport {
        let run = &s.run;
        let mut sent: BTreeMap<u64, u64> = BTreeMap::new();
        let mut received: BTreeMap<u64, u64> = BTreeMap::new();
        let mut lost: BTreeSet<u64> = BTreeSet::new();
        let mut conserved = true;
        for m in &parts.probes {
            conserved &= match m.step {
                ProbeStep::Sent => sent.insert(m.id, m.t_us).is_none(),
                ProbeStep::Received => received.insert(m.id, m.t_us).is_none(),
                ProbeStep::Lost => lost.insert(m.id),
            };
        }
        conserved &= received.keys().chain(lost.iter()).all(|id| sent.contains_key(id));
        conserved &= received.keys().all(|id| !lost.contains(id));
        let in_flight = sent
            .keys()
            .filter(|id| !received.contains_key(id) && !lost.contains(id))
            .count();
        let mode = run.mode.as_str();
        let latencies: Vec<MetricsRecord> = received
            .iter()
            .filter_map(|(id, &rx)| {
                let tx = *sent.get(id)?;
                Some(MetricsRecord {
                    round_trip_id: *id,
                    sent_at: tx as f64 / 1000.0,
                    received_at: rx as f64 / 1000.0,
                    latency_ms: rx.saturating_sub(tx) as f64 / 1000.0,
                    qos: run.qos,
                    mode,
                })
            })
            .collect();

        let warmup_ms = run.warmup_s * 1000.0;
        let measured: Vec<f64> = latencies
            .iter()
            .filter(|m| m.sent_at >= warmup_ms)
            .map(|m| m.latency_ms)
            .collect();
        let window_s = run.duration_s - run.warmup_s;
        let mean = (!measured.is_empty()).then(|| measured.iter().sum::<f64>() / measured.len() as f64);
        let min = measured.iter().copied().reduce(f64::min);
        let max = measured.iter().copied().reduce(f64::max);

        let mut totals = NodeStats::default();
        for n in &parts.nodes {
            totals.add(&n.stats);
        }
        let packets = Packets {
            publish: totals.publish,
            puback: totals.puback,
            acl: totals.acl,
        };
        let completed = received.len();
        let per_round_trip = (completed > 0).then(|| PerRoundTrip {
            publish: packets.publish as f64 / completed as f64,
            puback: packets.puback as f64 / completed as f64,
            acl: packets.acl as f64 / completed as f64,
        });

        let mut cpu_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for c in &parts.cpu {
            let e = cpu_sum.entry(c.node.clone()).or_default();
            e.0 += c.cpu_pct;
            e.1 += 1;
        }

        let summary = Summary {
            scenario: s.name.clone(),
            runtime: runtime.to_string(),
            mode: mode.to_string(),
            qos: run.qos,
            clock: clock_name(run.clock).to_string(),
            seed: run.seed,
            duration_s: run.duration_s,
            warmup_s: run.warmup_s,
            stimuli_sent: parts.stimuli_sent,
            initiated: sent.len(),
            completed,
            lost: lost.len(),
            in_flight,
            measured: measured.len(),
            mean_latency_ms: mean,
            min_latency_ms: min,
            max_latency_ms: max,
            buckets: bucketize(&measured).ok().map(Buckets::from),
            sustained_rate: measured.len() as f64 / window_s,
            packets,
            per_round_trip,
            cep_ingested: totals.cep_ingested,
            cep_emitted: totals.cep_emitted,
            dead_letters: totals.dead_letters,
            late_events: totals.late_events,
            mean_cpu_pct: cpu_sum.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            conserved,
            saturated: parts.saturated,
            timed_out: in_flight > 0,
            elapsed_s: parts.elapsed_us as f64 / 1e6,
            nodes: parts.nodes,
            connections: parts.connections,
        };
        RunReport {
            summary,
            latencies,
            cpu: parts.cpu,
            alerts: parts.alerts.into_iter().map(|(_, l)| l).collect(),
            emissions: parts.emissions.into_iter().map(|(_, l)| l).collect(),
        }
    }

    /// Writes `latency.csv`, `cpu.csv`, `summary.json`, `alerts.jsonl` and
    /// `emissions.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("latency.csv"))?;
        w.write_record(["round_trip_id", "sent_at", "received_at", "latency_ms"])?;
        for m in &self.latencies {
            w.write_record([
                m.round_trip_id.to_string(),
                format!("{:.3}", m.sent_at),
                format!("{:.3}", m.received_at),
                format!("{:.3}", m.latency_ms),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("cpu.csv"))?;
        w.write_record(["t_ms", "node_id", "cpu_pct"])?;
        for c in &self.cpu {
            w.write_record([c.t_ms.to_string(), c.node.clone(), format!("{:.2}", c.cpu_pct)])?;
        }
        w.flush()?;
        let summary = serde_json::to_string_pretty(&self.summary).map_err(io::Error::other)?;
        fs::write(dir.join("summary.json"), summary + "\n")?;
        write_lines(&dir.join("alerts.jsonl"), &self.alerts)?;
        write_lines(&dir.join("emissions.jsonl"), &self.emissions)
    }
}

fn line(r: &Stamped) -> String {
    record_json(r).to_string()
}

fn write_lines(path: &Path, lines: &[String]) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()
}

fn clock_name(c: atmosphere_core::cep::ClockMode) -> &'static str {
    match c {
        atmosphere_core::cep::ClockMode::EventTime => "event_time",
        atmosphere_core::cep::ClockMode::ProcessingTime => "processing_time",
    }
}
