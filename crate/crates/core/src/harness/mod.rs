//! Benchmark orchestration: run a query plan through a connector while the
//! energy sampler and I/O counters record what it cost.
//!
//! Energy is package-scoped (machine-wide), so results are only meaningful on
//! an otherwise quiescent system.

mod connector;

pub use connector::{
    Connector, ConnectorError, ConnectorSpec, ExecConnector, ExecOutcome, QueryRef, StubConfig, StubConnector,
    SQL_FILE_PLACEHOLDER,
};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeDelta, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{integrate_window, start_sampling, stop_sampling, Clock, EnergyError, EnergySource, EnergyTrace};
use crate::proc_io::{io_delta, IoCounters, IoDelta, ProcFs};
use crate::units::nanos_to_seconds;

pub const DEFAULT_SAMPLING_INTERVAL_NS: u64 = 10_000_000;
pub const DEFAULT_PROBE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid workload plan: {0}")]
    InvalidPlan(String),
    #[error("reading plan {path}: {message}")]
    PlanLoad { path: PathBuf, message: String },
    #[error("connector unhealthy: {0}")]
    ConnectorUnhealthy(String),
    #[error("query {query_id} failed: {diagnostics}")]
    QueryFailed { query_id: String, diagnostics: String },
    #[error("energy sampling lost: {0}")]
    SamplingLost(#[source] EnergyError),
    #[error("energy source: {0}")]
    Energy(#[from] EnergyError),
}

impl From<ConnectorError> for HarnessError {
    fn from(e: ConnectorError) -> Self {
        match e {
            ConnectorError::Unhealthy(d) => Self::ConnectorUnhealthy(d),
            ConnectorError::QueryFailed { query_id, diagnostics } => Self::QueryFailed { query_id, diagnostics },
            ConnectorError::InvalidSpec(d) => Self::ConnectorUnhealthy(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanQuery {
    pub query_id: String,
    pub sql_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadPlan {
    pub queries: Vec<PlanQuery>,
    #[serde(default = "one")]
    pub repetitions: u32,
    #[serde(default)]
    pub warmup_runs: u32,
    #[serde(default)]
    pub randomize_order: bool,
    /// Shuffle seed; drawn from OS entropy at run time when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_interval")]
    pub sampling_interval_ns: u64,
}

fn one() -> u32 {
    1
}

fn default_interval() -> u64 {
    DEFAULT_SAMPLING_INTERVAL_NS
}

impl WorkloadPlan {
    /// Reads a JSON plan; relative `sql_path`s resolve against the plan's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let err = |message: String| HarnessError::PlanLoad {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut plan: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for q in &mut plan.queries {
            if q.sql_path.is_relative() {
                q.sql_path = base.join(&q.sql_path);
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidPlan(m));
        if self.queries.is_empty() {
            return bad("no queries".into());
        }
        if self.repetitions < 1 {
            return bad("repetitions must be at least 1".into());
        }
        let mut seen = BTreeSet::new();
        for q in &self.queries {
            if q.query_id.is_empty() {
                return bad("empty query_id".into());
            }
            if !seen.insert(q.query_id.as_str()) {
                return bad(format!("duplicate query_id `{}`", q.query_id));
            }
        }
        Ok(())
    }

    /// Measured executions the plan asks for.
    pub fn measured_runs(&self) -> usize {
        self.queries.len() * self.repetitions as usize
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub probe_timeout: Duration,
    /// Seconds of idle power to measure before the run and subtract per query.
    pub idle_baseline: Option<Duration>,
    /// UTC instant corresponding to the source clock's zero. `None` anchors
    /// the run start at the current wall-clock time.
    pub clock_epoch: Option<DateTime<Utc>>,
    pub hardware_profile: Option<String>,
    pub procfs: ProcFs,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            probe_timeout: DEFAULT_PROBE_TIMEOUT,
            idle_baseline: None,
            clock_epoch: None,
            hardware_profile: None,
            procfs: ProcFs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRunResult {
    pub query_id: String,
    pub repetition: u32,
    pub wall_time_s: f64,
    pub cpu_energy_j: f64,
    pub dram_energy_j: f64,
    /// Absent when the monitored processes' counters could not be read.
    pub read_bytes: Option<u64>,
    pub write_bytes: Option<u64>,
    pub started_at: DateTime<Utc>,
    pub start_ns: u64,
    pub end_ns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_count: Option<u64>,
}

impl QueryRunResult {
    pub fn energy_j(&self) -> f64 {
        self.cpu_energy_j + self.dram_energy_j
    }
}

/// The execution that stopped a run early.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    /// `None` for warmup executions.
    pub repetition: Option<u32>,
    pub diagnostics: String,
}

/// Idle power measured before the run. Per-query energies have
/// `power × wall_time` removed (clamped at zero); run totals do not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdleBaseline {
    pub duration_s: f64,
    pub cpu_power_w: f64,
    pub dram_power_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub executions: u64,
    /// From the first measured start to the last measured end, gaps included.
    pub wall_time_s: f64,
    pub cpu_energy_j: f64,
    pub dram_energy_j: f64,
    pub read_bytes: Option<u64>,
    pub write_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadResult {
    pub plan: WorkloadPlan,
    pub connector: String,
    pub hardware_profile: Option<String>,
    pub started_at: DateTime<Utc>,
    /// Seed actually used for shuffling, when the order was randomized.
    pub order_seed: Option<u64>,
    pub runs: Vec<QueryRunResult>,
    pub totals: RunTotals,
    pub failure: Option<QueryFailure>,
    pub idle_baseline: Option<IdleBaseline>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub trace: Option<EnergyTrace>,
}

impl WorkloadResult {
    pub fn is_partial(&self) -> bool {
        self.failure.is_some()
    }
}

/// Runs the connector's health query under a timeout.
pub fn probe(connector: &dyn Connector, timeout: Duration, clock: &dyn Clock) -> Result<(), HarnessError> {
    connector.probe(timeout, clock).map_err(Into::into)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryExecution {
    pub start_ns: u64,
    pub end_ns: u64,
    pub wall_time_s: f64,
    pub row_count: Option<u64>,
    pub reported_io: Option<IoDelta>,
}

/// Executes one query, timing the full request on `clock`.
pub fn execute_query(
    connector: &dyn Connector,
    query: QueryRef<'_>,
    clock: &dyn Clock,
) -> Result<QueryExecution, HarnessError> {
    let start_ns = clock.now_ns();
    let outcome = connector.execute(query, clock)?;
    let end_ns = clock.now_ns();
    Ok(QueryExecution {
        start_ns,
        end_ns,
        wall_time_s: nanos_to_seconds(end_ns - start_ns),
        row_count: outcome.row_count,
        reported_io: outcome.reported_io,
    })
}

struct Measured {
    exec: QueryExecution,
    io: Option<IoDelta>,
}

struct IoMonitor<'a> {
    procfs: &'a ProcFs,
    pids: Vec<u32>,
    warnings: Vec<String>,
}

impl IoMonitor<'_> {
    fn snapshot(&mut self, clock: &dyn Clock) -> Option<IoCounters> {
        if self.pids.is_empty() {
            return None;
        }
        match self.procfs.snapshot_many(&self.pids, clock) {
            Ok(c) => Some(c),
            Err(e) => {
                self.warn(format!("i/o counters unavailable: {e}"));
                None
            }
        }
    }

    fn delta(&mut self, before: Option<IoCounters>, after: Option<IoCounters>) -> Option<IoDelta> {
        match io_delta(&before?, &after?) {
            Ok(d) => Some(d),
            Err(e) => {
                self.warn(format!("i/o delta discarded: {e}"));
                None
            }
        }
    }

    fn warn(&mut self, w: String) {
        if !self.warnings.contains(&w) {
            self.warnings.push(w);
        }
    }
}

fn measure_one(
    connector: &dyn Connector,
    query: &PlanQuery,
    clock: &dyn Clock,
    io: &mut IoMonitor<'_>,
) -> Result<Measured, HarnessError> {
    let before = io.snapshot(clock);
    let exec = execute_query(
        connector,
        QueryRef {
            query_id: &query.query_id,
            sql_path: &query.sql_path,
        },
        clock,
    )?;
    let after = io.snapshot(clock);
    let io = exec.reported_io.or_else(|| io.delta(before, after));
    Ok(Measured { exec, io })
}

/// Sequential execution order of measured runs: one round per repetition,
/// each round visiting every query once (shuffled per round when randomized).
pub fn execution_order(plan: &WorkloadPlan, seed: Option<u64>) -> Vec<(usize, u32)> {
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let mut order = Vec::with_capacity(plan.measured_runs());
    for rep in 0..plan.repetitions {
        let mut round: Vec<usize> = (0..plan.queries.len()).collect();
        if let Some(rng) = rng.as_mut() {
            round.shuffle(rng);
        }
        order.extend(round.into_iter().map(|q| (q, rep)));
    }
    order
}

/// Runs warmups and then every measured (query, repetition) while sampling.
///
/// A connector failure ends the run early but still returns the results so
/// far together with a [`QueryFailure`]. Losing the energy sampler aborts.
pub fn run_workload(
    plan: &WorkloadPlan,
    connector: &dyn Connector,
    source: &Arc<EnergySource>,
    options: &RunOptions,
) -> Result<WorkloadResult, HarnessError> {
    plan.validate()?;
    let clock = source.clock();
    probe(connector, options.probe_timeout, clock)?;

    let order_seed = plan.randomize_order.then(|| plan.seed.unwrap_or_else(rand::random));
    let order = execution_order(plan, order_seed);

    let epoch = match options.clock_epoch {
        Some(epoch) => epoch,
        None => Utc::now() - ns_delta(clock.now_ns()),
    };
    let mut io = IoMonitor {
        procfs: &options.procfs,
        pids: connector.io_pids(),
        warnings: Vec::new(),
    };

    let session = start_sampling(source, plan.sampling_interval_ns)?;

    let idle_window = options.idle_baseline.map(|d| {
        let start = clock.now_ns();
        clock.sleep(d);
        (start, clock.now_ns())
    });

    let mut failure = None;
    'warmup: for _ in 0..plan.warmup_runs {
        for q in &plan.queries {
            if let Err(e) = measure_one(connector, q, clock, &mut io) {
                failure = Some(QueryFailure {
                    query_id: q.query_id.clone(),
                    repetition: None,
                    diagnostics: diagnostics(e),
                });
                break 'warmup;
            }
        }
    }

    let run_start_ns = clock.now_ns();
    let io_start = io.snapshot(clock);
    let mut measured = Vec::with_capacity(order.len());
    if failure.is_none() {
        for &(qi, rep) in &order {
            let q = &plan.queries[qi];
            match measure_one(connector, q, clock, &mut io) {
                Ok(m) => measured.push((q, rep, m)),
                Err(e) => {
                    failure = Some(QueryFailure {
                        query_id: q.query_id.clone(),
                        repetition: Some(rep),
                        diagnostics: diagnostics(e),
                    });
                    break;
                }
            }
        }
    }
    let run_end_ns = clock.now_ns();
    let io_end = io.snapshot(clock);

    let trace = stop_sampling(session).map_err(HarnessError::SamplingLost)?;
    let window = |start: u64, end: u64| -> Result<(f64, f64), HarnessError> {
        if end <= start {
            return Ok((0.0, 0.0));
        }
        let w = integrate_window(&trace, start, end).map_err(HarnessError::SamplingLost)?;
        Ok((w.cpu_energy_j, w.dram_energy_j))
    };

    let idle_baseline = match idle_window {
        Some((s, e)) if e > s => {
            let (cpu, dram) = window(s, e)?;
            let secs = nanos_to_seconds(e - s);
            Some(IdleBaseline {
                duration_s: secs,
                cpu_power_w: cpu / secs,
                dram_power_w: dram / secs,
            })
        }
        _ => None,
    };

    let mut runs = Vec::with_capacity(measured.len());
    let mut summed_io = Some(IoDelta::default());
    for (q, rep, m) in measured {
        let (mut cpu, mut dram) = window(m.exec.start_ns, m.exec.end_ns)?;
        if let Some(idle) = &idle_baseline {
            cpu = (cpu - idle.cpu_power_w * m.exec.wall_time_s).max(0.0);
            dram = (dram - idle.dram_power_w * m.exec.wall_time_s).max(0.0);
        }
        summed_io = summed_io.zip(m.io).map(|(a, b)| a + b);
        runs.push(QueryRunResult {
            query_id: q.query_id.clone(),
            repetition: rep,
            wall_time_s: m.exec.wall_time_s,
            cpu_energy_j: cpu,
            dram_energy_j: dram,
            read_bytes: m.io.map(|d| d.read_bytes),
            write_bytes: m.io.map(|d| d.write_bytes),
            started_at: epoch + ns_delta(m.exec.start_ns),
            start_ns: m.exec.start_ns,
            end_ns: m.exec.end_ns,
            row_count: m.exec.row_count,
        });
    }

    let (cpu_total, dram_total) = window(run_start_ns, run_end_ns)?;
    let run_io = if io.pids.is_empty() {
        summed_io
    } else {
        io.delta(io_start, io_end)
    };
    let totals = RunTotals {
        executions: runs.len() as u64,
        wall_time_s: nanos_to_seconds(run_end_ns - run_start_ns),
        cpu_energy_j: cpu_total,
        dram_energy_j: dram_total,
        read_bytes: run_io.map(|d| d.read_bytes),
        write_bytes: run_io.map(|d| d.write_bytes),
    };

    Ok(WorkloadResult {
        plan: plan.clone(),
        connector: connector.describe(),
        hardware_profile: options.hardware_profile.clone(),
        started_at: epoch + ns_delta(run_start_ns),
        order_seed,
        runs,
        totals,
        failure,
        idle_baseline,
        warnings: io.warnings,
        trace: Some(trace),
    })
}

fn diagnostics(e: HarnessError) -> String {
    match e {
        HarnessError::QueryFailed { diagnostics, .. } => diagnostics,
        e => e.to_string(),
    }
}

fn ns_delta(ns: u64) -> TimeDelta {
    TimeDelta::nanoseconds(i64::try_from(ns).unwrap_or(i64::MAX))
}
