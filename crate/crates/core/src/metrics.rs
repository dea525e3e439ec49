//! Request outcome accounting and report emission.
//!
//! Every request is counted once in each scope it entered: the run-wide
//! `all` scope, the farm that received it, and every service on its
//! forwarding chain. The per-scope outcome is the request's end-to-end
//! outcome, so the conservation identity
//! `presented = in_deadline + late + failed + in_flight` holds everywhere.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;

pub const ROOT_SCOPE: &str = "all";
pub const THROUGHPUT_WINDOW_US: u64 = 1_000_000;

pub const CSV_HEADER: &str =
    "scope,presented,in_deadline,late,failed,in_flight,availability,p50_us,p95_us,p99_us,write_amp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    ServicedInDeadline,
    ServicedLate,
    Failed,
    InFlightAtEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request_id: u64,
    /// Entry scope: the service the request was first presented to, or
    /// [`ROOT_SCOPE`] if it never reached one.
    pub scope: String,
    pub outcome: Outcome,
    pub arrival: SimTime,
    pub completion: Option<SimTime>,
    pub latency_us: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScopeStats {
    pub presented: u64,
    pub serviced_in_deadline: u64,
    pub serviced_late: u64,
    pub failed: u64,
    pub in_flight: u64,
    /// Latencies of serviced requests, ascending once the report is final.
    pub latencies: Vec<u64>,
    pub client_writes: u64,
    pub node_writes: u64,
    pub is_service: bool,
    /// Completions per one-second window, indexed by completion time.
    pub throughput: Vec<u64>,
}

impl ScopeStats {
    pub fn serviced(&self) -> u64 {
        self.serviced_in_deadline + self.serviced_late
    }

    pub fn is_conserved(&self) -> bool {
        self.presented
            == self.serviced_in_deadline + self.serviced_late + self.failed + self.in_flight
    }

    fn merge(&mut self, other: &ScopeStats) {
        self.presented += other.presented;
        self.serviced_in_deadline += other.serviced_in_deadline;
        self.serviced_late += other.serviced_late;
        self.failed += other.failed;
        self.in_flight += other.in_flight;
        self.latencies.extend_from_slice(&other.latencies);
        self.latencies.sort_unstable();
        self.client_writes += other.client_writes;
        self.node_writes += other.node_writes;
        self.is_service |= other.is_service;
        if self.throughput.len() < other.throughput.len() {
            self.throughput.resize(other.throughput.len(), 0);
        }
        for (a, b) in self.throughput.iter_mut().zip(&other.throughput) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeUsage {
    pub busy_us: u64,
    pub utilization: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub duration_us: u64,
    pub scopes: BTreeMap<String, ScopeStats>,
    pub nodes: BTreeMap<String, NodeUsage>,
    /// Per-request outcomes, only when recording was requested.
    pub outcomes: Vec<RequestOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("scope `{0}` saw no traffic")]
    NoTraffic(String),
    #[error("empty latency sample")]
    EmptySample,
    #[error("percentile {0} outside (0, 100]")]
    BadPercentile(String),
    #[error("service `{0}` received no writes")]
    NoWrites(String),
    #[error("unknown scope `{0}`")]
    UnknownScope(String),
}

/// `serviced_in_deadline / presented`, kept exact and printed to six places.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Availability {
    pub serviced: u64,
    pub presented: u64,
}

impl Availability {
    pub fn value(self) -> f64 {
        self.serviced as f64 / self.presented as f64
    }

    /// Value in millionths, rounded half-up.
    pub fn micros(self) -> u64 {
        let num = self.serviced as u128 * 2_000_000 + self.presented as u128;
        (num / (2 * self.presented as u128)) as u64
    }

    pub fn rounded(self) -> f64 {
        self.micros() as f64 / 1e6
    }
}

impl fmt::Display for Availability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.micros();
        write!(f, "{}.{:06}", m / 1_000_000, m % 1_000_000)
    }
}

fn scope<'a>(report: &'a RunReport, name: &str) -> Result<&'a ScopeStats, MetricsError> {
    report
        .scopes
        .get(name)
        .ok_or_else(|| MetricsError::UnknownScope(name.to_string()))
}

pub fn availability(report: &RunReport, scope_name: &str) -> Result<Availability, MetricsError> {
    let s = scope(report, scope_name)?;
    if s.presented == 0 {
        return Err(MetricsError::NoTraffic(scope_name.to_string()));
    }
    Ok(Availability {
        serviced: s.serviced_in_deadline,
        presented: s.presented,
    })
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 * n)`.
pub fn percentile(latencies: &[u64], p: f64) -> Result<u64, MetricsError> {
    if latencies.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::BadPercentile(p.to_string()));
    }
    let sorted;
    let data = if latencies.windows(2).all(|w| w[0] <= w[1]) {
        latencies
    } else {
        let mut v = latencies.to_vec();
        v.sort_unstable();
        sorted = v;
        &sorted
    };
    let n = data.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Ok(data[rank.clamp(1, n) - 1])
}

pub fn write_amplification(report: &RunReport, service: &str) -> Result<f64, MetricsError> {
    let s = scope(report, service)?;
    if s.client_writes == 0 {
        return Err(MetricsError::NoWrites(service.to_string()));
    }
    Ok(s.node_writes as f64 / s.client_writes as f64)
}

/// Folds seed-sweep reports into one.
pub fn merge_reports(reports: &[RunReport]) -> RunReport {
    let mut out = RunReport::default();
    for r in reports {
        out.duration_us += r.duration_us;
        for (name, s) in &r.scopes {
            out.scopes.entry(name.clone()).or_default().merge(s);
        }
        for (name, n) in &r.nodes {
            out.nodes.entry(name.clone()).or_default().busy_us += n.busy_us;
        }
        out.outcomes.extend(r.outcomes.iter().cloned());
    }
    for n in out.nodes.values_mut() {
        n.utilization = utilization(n.busy_us, out.duration_us);
    }
    out
}

pub fn utilization(busy_us: u64, duration_us: u64) -> f64 {
    if duration_us == 0 {
        0.0
    } else {
        (busy_us as f64 / duration_us as f64).min(1.0)
    }
}

/// Machine-readable per-scope summary. Field order is lexicographic so the
/// JSON object keys come out sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeSummary {
    pub availability: Option<f64>,
    pub failed: u64,
    pub in_deadline: u64,
    pub in_flight: u64,
    pub late: u64,
    pub p50_us: Option<u64>,
    pub p95_us: Option<u64>,
    pub p99_us: Option<u64>,
    pub presented: u64,
    pub write_amp: Option<f64>,
}

fn round6(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("formatted float parses")
}

impl ScopeSummary {
    pub fn from_stats(s: &ScopeStats) -> Self {
        let avail = (s.presented > 0).then_some(Availability {
            serviced: s.serviced_in_deadline,
            presented: s.presented,
        });
        let pct = |p| percentile(&s.latencies, p).ok();
        Self {
            availability: avail.map(Availability::rounded),
            failed: s.failed,
            in_deadline: s.serviced_in_deadline,
            in_flight: s.in_flight,
            late: s.serviced_late,
            p50_us: pct(50.0),
            p95_us: pct(95.0),
            p99_us: pct(99.0),
            presented: s.presented,
            write_amp: (s.is_service && s.client_writes > 0)
                .then(|| round6(s.node_writes as f64 / s.client_writes as f64)),
        }
    }
}

pub fn summarize(report: &RunReport) -> BTreeMap<String, ScopeSummary> {
    report
        .scopes
        .iter()
        .map(|(k, s)| (k.clone(), ScopeSummary::from_stats(s)))
        .collect()
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(report: &RunReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (name, s) in &report.scopes {
        let avail = (s.presented > 0).then_some(Availability {
            serviced: s.serviced_in_deadline,
            presented: s.presented,
        });
        let pct = |p| percentile(&s.latencies, p).ok();
        let wamp = (s.is_service && s.client_writes > 0)
            .then(|| format!("{:.6}", s.node_writes as f64 / s.client_writes as f64));
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            name,
            s.presented,
            s.serviced_in_deadline,
            s.serviced_late,
            s.failed,
            s.in_flight,
            opt(avail),
            opt(pct(50.0)),
            opt(pct(95.0)),
            opt(pct(99.0)),
            wamp.unwrap_or_default(),
        )
        .unwrap();
    }
    out
}

pub fn to_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(&summarize(report)).expect("summary serializes");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<BTreeMap<String, ScopeSummary>, serde_json::Error> {
    serde_json::from_str(text)
}

pub fn utilization_csv(report: &RunReport) -> String {
    let mut out = String::from("node,busy_us,utilization\n");
    for (name, n) in &report.nodes {
        writeln!(out, "{},{},{:.6}", name, n.busy_us, n.utilization).unwrap();
    }
    out
}

pub fn throughput_csv(report: &RunReport) -> String {
    let mut out = String::from("scope,window_start_s,completions\n");
    for (name, s) in &report.scopes {
        for (w, n) in s.throughput.iter().enumerate() {
            writeln!(out, "{name},{w},{n}").unwrap();
        }
    }
    out
}

/// Fixed-width table for terminals.
pub fn render_table(summary: &BTreeMap<String, ScopeSummary>) -> String {
    let width = summary.keys().map(String::len).max().unwrap_or(5).max(5);
    let mut out = String::new();
    writeln!(
        out,
        "{:<width$}  {:>10}  {:>10}  {:>8}  {:>8}  {:>9}  {:>12}  {:>10}  {:>10}  {:>10}  {:>9}",
        "scope",
        "presented",
        "in_dl",
        "late",
        "failed",
        "in_flight",
        "availability",
        "p50_us",
        "p95_us",
        "p99_us",
        "write_amp"
    )
    .unwrap();
    for (name, s) in summary {
        writeln!(
            out,
            "{:<width$}  {:>10}  {:>10}  {:>8}  {:>8}  {:>9}  {:>12}  {:>10}  {:>10}  {:>10}  {:>9}",
            name,
            s.presented,
            s.in_deadline,
            s.late,
            s.failed,
            s.in_flight,
            s.availability.map(|a| format!("{a:.6}")).unwrap_or_else(|| "-".into()),
            s.p50_us.map_or("-".into(), |v| v.to_string()),
            s.p95_us.map_or("-".into(), |v| v.to_string()),
            s.p99_us.map_or("-".into(), |v| v.to_string()),
            s.write_amp.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into()),
        )
        .unwrap();
    }
    out
}

/// Accumulates outcomes while a run is in progress.
#[derive(Debug, Default)]
pub struct Recorder {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    stats: Vec<ScopeStats>,
    record_outcomes: bool,
    outcomes: Vec<RequestOutcome>,
}

impl Recorder {
    pub fn new(record_outcomes: bool) -> Self {
        Self {
            record_outcomes,
            ..Self::default()
        }
    }

    pub fn scope_id(&mut self, name: &str, is_service: bool) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.stats.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.stats.push(ScopeStats {
            is_service,
            ..ScopeStats::default()
        });
        id
    }

    pub fn scope_name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn present(&mut self, scope: usize) {
        self.stats[scope].presented += 1;
    }

    pub fn client_write(&mut self, scope: usize) {
        self.stats[scope].client_writes += 1;
    }

    pub fn node_writes(&mut self, scope: usize, n: u64) {
        self.stats[scope].node_writes += n;
    }

    /// Records the final outcome of a request in every scope it entered.
    /// The first service scope in `scopes` is logged as the entry scope.
    pub fn finish(
        &mut self,
        request_id: u64,
        scopes: &[usize],
        arrival: SimTime,
        deadline_abs: SimTime,
        outcome_at: Option<SimTime>,
        failed: bool,
    ) -> Outcome {
        let (outcome, latency) = match (failed, outcome_at) {
            (true, _) => (Outcome::Failed, None),
            (false, None) => (Outcome::InFlightAtEnd, None),
            (false, Some(done)) => {
                let o = if done <= deadline_abs {
                    Outcome::ServicedInDeadline
                } else {
                    Outcome::ServicedLate
                };
                (o, Some(done - arrival))
            }
        };
        for &sc in scopes {
            let s = &mut self.stats[sc];
            match outcome {
                Outcome::ServicedInDeadline => s.serviced_in_deadline += 1,
                Outcome::ServicedLate => s.serviced_late += 1,
                Outcome::Failed => s.failed += 1,
                Outcome::InFlightAtEnd => s.in_flight += 1,
            }
            if let (Some(lat), Some(done)) = (latency, outcome_at) {
                s.latencies.push(lat);
                let w = (done.as_micros() / THROUGHPUT_WINDOW_US) as usize;
                if s.throughput.len() <= w {
                    s.throughput.resize(w + 1, 0);
                }
                s.throughput[w] += 1;
            }
        }
        if self.record_outcomes {
            let entry = scopes
                .iter()
                .copied()
                .find(|&sc| self.stats[sc].is_service)
                .map(|sc| self.names[sc].clone())
                .unwrap_or_else(|| ROOT_SCOPE.to_string());
            self.outcomes.push(RequestOutcome {
                request_id,
                scope: entry,
                outcome,
                arrival,
                completion: outcome_at,
                latency_us: latency,
            });
        }
        outcome
    }

    /// Closes the books. Scopes that never saw a request are dropped.
    pub fn finalize(self, duration_us: u64, nodes: BTreeMap<String, NodeUsage>) -> RunReport {
        let mut scopes = BTreeMap::new();
        for (name, mut s) in self.names.into_iter().zip(self.stats) {
            if s.presented == 0 {
                continue;
            }
            s.latencies.sort_unstable();
            scopes.insert(name, s);
        }
        let mut outcomes = self.outcomes;
        outcomes.sort_by_key(|o| o.request_id);
        RunReport {
            duration_us,
            scopes,
            nodes,
            outcomes,
        }
    }
}
