//! Database connectors: how a query file gets executed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::energy::Clock;
use crate::proc_io::IoDelta;

/// Placeholder substituted with the SQL file path in exec templates.
pub const SQL_FILE_PLACEHOLDER: &str = "{sql_file}";

#[derive(Debug, Error)]
pub enum ConnectorError {
    #[error("connector unhealthy: {0}")]
    Unhealthy(String),
    #[error("query {query_id} failed: {diagnostics}")]
    QueryFailed { query_id: String, diagnostics: String },
    #[error("invalid connector spec: {0}")]
    InvalidSpec(String),
}

/// A query handed to a connector.
#[derive(Debug, Clone, Copy)]
pub struct QueryRef<'a> {
    pub query_id: &'a str,
    pub sql_path: &'a Path,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecOutcome {
    pub row_count: Option<u64>,
    /// I/O the connector accounts for itself, replacing `/proc` measurement.
    pub reported_io: Option<IoDelta>,
}

pub trait Connector: Send + Sync + Debug {
    /// Short human-readable description recorded in results.
    fn describe(&self) -> String;

    /// Runs the trivial health query, failing if it exceeds `timeout`.
    fn probe(&self, timeout: Duration, clock: &dyn Clock) -> Result<(), ConnectorError>;

    /// Executes one query to completion.
    fn execute(&self, query: QueryRef<'_>, clock: &dyn Clock) -> Result<ExecOutcome, ConnectorError>;

    /// Processes whose `/proc/<pid>/io` counters represent this database.
    fn io_pids(&self) -> Vec<u32>;
}

/// Connector selection as written in configs: `exec:<template>` or `stub[:k=v,...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ConnectorSpec {
    Exec { template: String },
    Stub(StubConfig),
}

impl FromStr for ConnectorSpec {
    type Err = ConnectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(template) = s.strip_prefix("exec:") {
            ExecConnector::from_template(template, None)?;
            return Ok(Self::Exec {
                template: template.to_owned(),
            });
        }
        if s == "stub" {
            return Ok(Self::Stub(StubConfig::default()));
        }
        if let Some(opts) = s.strip_prefix("stub:") {
            return Ok(Self::Stub(opts.parse()?));
        }
        Err(ConnectorError::InvalidSpec(format!(
            "`{s}` (expected `exec:<command template>` or `stub[:options]`)"
        )))
    }
}

impl TryFrom<String> for ConnectorSpec {
    type Error = ConnectorError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ConnectorSpec> for String {
    fn from(spec: ConnectorSpec) -> String {
        match spec {
            ConnectorSpec::Exec { template } => format!("exec:{template}"),
            ConnectorSpec::Stub(cfg) => format!("stub:{cfg}"),
        }
    }
}

impl ConnectorSpec {
    pub fn build(&self, server_pid_file: Option<PathBuf>) -> Result<Box<dyn Connector>, ConnectorError> {
        Ok(match self {
            Self::Exec { template } => Box::new(ExecConnector::from_template(template, server_pid_file)?),
            Self::Stub(cfg) => Box::new(StubConnector::new(cfg.clone())),
        })
    }
}

/// Spawns one process per query from an argument template.
#[derive(Debug, Clone)]
pub struct ExecConnector {
    argv: Vec<String>,
    server_pid_file: Option<PathBuf>,
}

impl ExecConnector {
    /// Splits `template` with shell quoting rules; `{sql_file}` may appear in any argument.
    pub fn from_template(template: &str, server_pid_file: Option<PathBuf>) -> Result<Self, ConnectorError> {
        let argv = shlex::split(template)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| ConnectorError::InvalidSpec(format!("cannot parse command `{template}`")))?;
        if !argv.iter().any(|a| a.contains(SQL_FILE_PLACEHOLDER)) {
            return Err(ConnectorError::InvalidSpec(format!(
                "command `{template}` has no {SQL_FILE_PLACEHOLDER} placeholder"
            )));
        }
        Ok(Self { argv, server_pid_file })
    }

    fn command(&self, sql_file: &Path) -> Command {
        let path = sql_file.to_string_lossy();
        let mut args = self.argv.iter().map(|a| a.replace(SQL_FILE_PLACEHOLDER, &path));
        let mut cmd = Command::new(args.next().expect("non-empty argv"));
        cmd.args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped());
        cmd
    }

    fn server_pid(&self) -> Option<u32> {
        let text = std::fs::read_to_string(self.server_pid_file.as_ref()?).ok()?;
        text.trim().parse().ok()
    }
}

impl Connector for ExecConnector {
    fn describe(&self) -> String {
        format!(
            "exec:{}",
            shlex::try_join(self.argv.iter().map(String::as_str)).unwrap_or_default()
        )
    }

    fn probe(&self, timeout: Duration, _clock: &dyn Clock) -> Result<(), ConnectorError> {
        let dir = tempfile_dir()?;
        let sql = dir.join("probe.sql");
        std::fs::write(&sql, "SELECT 1;\n")
            .map_err(|e| ConnectorError::Unhealthy(format!("writing probe query: {e}")))?;
        let result = (|| {
            let mut child = self
                .command(&sql)
                .spawn()
                .map_err(|e| ConnectorError::Unhealthy(format!("spawning `{}`: {e}", self.argv[0])))?;
            match child.wait_timeout(timeout) {
                Ok(Some(status)) if status.success() => Ok(()),
                Ok(Some(status)) => Err(ConnectorError::Unhealthy(format!("probe exited with {status}"))),
                Ok(None) => {
                    let _ = child.kill();
                    let _ = child.wait();
                    Err(ConnectorError::Unhealthy(format!(
                        "probe did not finish within {timeout:?}"
                    )))
                }
                Err(e) => Err(ConnectorError::Unhealthy(e.to_string())),
            }
        })();
        let _ = std::fs::remove_dir_all(&dir);
        result
    }

    fn execute(&self, query: QueryRef<'_>, _clock: &dyn Clock) -> Result<ExecOutcome, ConnectorError> {
        let failed = |diagnostics: String| ConnectorError::QueryFailed {
            query_id: query.query_id.to_owned(),
            diagnostics,
        };
        let output = self
            .command(query.sql_path)
            .spawn()
            .and_then(|c| c.wait_with_output())
            .map_err(|e| failed(format!("spawning `{}`: {e}", self.argv[0])))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(failed(format!("{}: {}", output.status, stderr.trim())));
        }
        Ok(ExecOutcome::default())
    }

    /// The harness itself (reaped children fold into its counters) plus the
    /// server named by the pid file, if any.
    fn io_pids(&self) -> Vec<u32> {
        let mut pids = vec![std::process::id()];
        pids.extend(self.server_pid());
        pids
    }
}

fn tempfile_dir() -> Result<PathBuf, ConnectorError> {
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let dir = std::env::temp_dir().join(format!(
        "atlas-probe-{}-{}",
        std::process::id(),
        SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir).map_err(|e| ConnectorError::Unhealthy(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Options of the deterministic test double.
#[derive(Debug, Clone, PartialEq)]
pub struct StubConfig {
    pub latency: Duration,
    pub probe_latency: Duration,
    /// Per-query latency overrides.
    pub latencies: BTreeMap<String, Duration>,
    pub fail_on: BTreeSet<String>,
    pub read_bytes: Option<u64>,
    pub write_bytes: Option<u64>,
    pub rows: Option<u64>,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            latency: Duration::from_millis(10),
            probe_latency: Duration::ZERO,
            latencies: BTreeMap::new(),
            fail_on: BTreeSet::new(),
            read_bytes: None,
            write_bytes: None,
            rows: None,
        }
    }
}

impl FromStr for StubConfig {
    type Err = ConnectorError;

    /// Comma-separated `key=value` options: `latency_ms`, `probe_latency_ms`,
    /// `latency_ms.<query_id>`, `fail_on` (`+`-separated ids), `read_bytes`,
    /// `write_bytes` and `rows`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut cfg = Self::default();
        let bad = |m: String| ConnectorError::InvalidSpec(m);
        for opt in s.split(',').map(str::trim).filter(|o| !o.is_empty()) {
            let (key, value) = opt
                .split_once('=')
                .ok_or_else(|| bad(format!("stub option `{opt}` is not key=value")))?;
            let int = || {
                value
                    .parse::<u64>()
                    .map_err(|_| bad(format!("stub option `{key}` needs an integer, got `{value}`")))
            };
            match key {
                "latency_ms" => cfg.latency = Duration::from_millis(int()?),
                "probe_latency_ms" => cfg.probe_latency = Duration::from_millis(int()?),
                "fail_on" => cfg.fail_on.extend(value.split('+').map(str::to_owned)),
                "read_bytes" => cfg.read_bytes = Some(int()?),
                "write_bytes" => cfg.write_bytes = Some(int()?),
                "rows" => cfg.rows = Some(int()?),
                k => match k.strip_prefix("latency_ms.") {
                    Some(id) if !id.is_empty() => {
                        cfg.latencies.insert(id.to_owned(), Duration::from_millis(int()?));
                    }
                    _ => return Err(bad(format!("unknown stub option `{key}`"))),
                },
            }
        }
        Ok(cfg)
    }
}

impl std::fmt::Display for StubConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut opts = vec![
            format!("latency_ms={}", self.latency.as_millis()),
            format!("probe_latency_ms={}", self.probe_latency.as_millis()),
        ];
        for (id, l) in &self.latencies {
            opts.push(format!("latency_ms.{id}={}", l.as_millis()));
        }
        if !self.fail_on.is_empty() {
            let ids: Vec<&str> = self.fail_on.iter().map(String::as_str).collect();
            opts.push(format!("fail_on={}", ids.join("+")));
        }
        for (k, v) in [
            ("read_bytes", self.read_bytes),
            ("write_bytes", self.write_bytes),
            ("rows", self.rows),
        ] {
            if let Some(v) = v {
                opts.push(format!("{k}={v}"));
            }
        }
        f.write_str(&opts.join(","))
    }
}

/// Deterministic connector that "runs" queries by sleeping on the harness clock.
#[derive(Debug)]
pub struct StubConnector {
    config: StubConfig,
    calls: AtomicU64,
}

impl StubConnector {
    pub fn new(config: StubConfig) -> Self {
        Self {
            config,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Connector for StubConnector {
    fn describe(&self) -> String {
        format!("stub:{}", self.config)
    }

    fn probe(&self, timeout: Duration, clock: &dyn Clock) -> Result<(), ConnectorError> {
        if self.config.probe_latency > timeout {
            clock.sleep(timeout);
            return Err(ConnectorError::Unhealthy(format!(
                "probe did not finish within {timeout:?}"
            )));
        }
        clock.sleep(self.config.probe_latency);
        Ok(())
    }

    fn execute(&self, query: QueryRef<'_>, clock: &dyn Clock) -> Result<ExecOutcome, ConnectorError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.config.fail_on.contains(query.query_id) {
            return Err(ConnectorError::QueryFailed {
                query_id: query.query_id.to_owned(),
                diagnostics: "stub configured to fail".into(),
            });
        }
        let latency = self
            .config
            .latencies
            .get(query.query_id)
            .copied()
            .unwrap_or(self.config.latency);
        clock.sleep(latency);
        let reported_io = (self.config.read_bytes.is_some() || self.config.write_bytes.is_some()).then(|| IoDelta {
            read_bytes: self.config.read_bytes.unwrap_or(0),
            write_bytes: self.config.write_bytes.unwrap_or(0),
        });
        Ok(ExecOutcome {
            row_count: self.config.rows,
            reported_io,
        })
    }

    fn io_pids(&self) -> Vec<u32> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{MonotonicClock, VirtualClock};

    fn q<'a>(id: &'a str, path: &'a Path) -> QueryRef<'a> {
        QueryRef {
            query_id: id,
            sql_path: path,
        }
    }

    #[test]
    fn parses_specs() {
        let spec: ConnectorSpec = "stub:latency_ms=2000,fail_on=q2+q3,write_bytes=5,latency_ms.q1=7"
            .parse()
            .unwrap();
        let ConnectorSpec::Stub(cfg) = &spec else {
            panic!("expected stub")
        };
        assert_eq!(cfg.latency, Duration::from_secs(2));
        assert_eq!(cfg.latencies["q1"], Duration::from_millis(7));
        assert!(cfg.fail_on.contains("q3"));
        assert_eq!(cfg.write_bytes, Some(5));
        let round: ConnectorSpec = String::from(spec.clone()).parse().unwrap();
        assert_eq!(round, spec);

        assert!(matches!(
            "exec:duckdb tpch.db -f {sql_file}".parse::<ConnectorSpec>().unwrap(),
            ConnectorSpec::Exec { .. }
        ));
        assert!("exec:duckdb tpch.db".parse::<ConnectorSpec>().is_err());
        assert!("stub:nope=1".parse::<ConnectorSpec>().is_err());
        assert!("odbc:x".parse::<ConnectorSpec>().is_err());
    }

    #[test]
    fn stub_probe() {
        let clock = VirtualClock::starting_at(0);
        let healthy = StubConnector::new(StubConfig::default());
        healthy.probe(Duration::from_secs(1), &clock).unwrap();
        let slow = StubConnector::new("probe_latency_ms=5000".parse().unwrap());
        assert!(matches!(
            slow.probe(Duration::from_secs(1), &clock),
            Err(ConnectorError::Unhealthy(_))
        ));
    }

    #[test]
    fn stub_execution_advances_virtual_clock() {
        let clock = VirtualClock::starting_at(0);
        let stub = StubConnector::new("latency_ms=2000,rows=3".parse().unwrap());
        let out = stub.execute(q("q1", Path::new("q1.sql")), &clock).unwrap();
        assert_eq!(clock.now_ns(), 2_000_000_000);
        assert_eq!(out.row_count, Some(3));
        assert_eq!(out.reported_io, None);
        assert_eq!(stub.calls(), 1);
    }

    #[test]
    fn stub_failure() {
        let clock = VirtualClock::starting_at(0);
        let stub = StubConnector::new("fail_on=q2".parse().unwrap());
        assert!(matches!(
            stub.execute(q("q2", Path::new("q2.sql")), &clock),
            Err(ConnectorError::QueryFailed { query_id, .. }) if query_id == "q2"
        ));
    }

    #[test]
    fn exec_missing_binary_is_unhealthy() {
        let c = ExecConnector::from_template("/nonexistent/bin/dbcli {sql_file}", None).unwrap();
        let err = c.probe(Duration::from_secs(5), &MonotonicClock::new()).unwrap_err();
        match err {
            ConnectorError::Unhealthy(detail) => assert!(detail.contains("spawning"), "{detail}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn exec_probe_and_run() {
        let c = ExecConnector::from_template("cat {sql_file}", None).unwrap();
        let clock = MonotonicClock::new();
        c.probe(Duration::from_secs(5), &clock).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sql = dir.path().join("q 1.sql");
        std::fs::write(&sql, "select 1;").unwrap();
        c.execute(q("q1", &sql), &clock).unwrap();
        assert_eq!(c.io_pids(), vec![std::process::id()]);
    }

    #[test]
    fn exec_failure_captures_stderr() {
        let c = ExecConnector::from_template("sh -c 'echo broken >&2; exit 3' {sql_file}", None).unwrap();
        let err = c
            .execute(q("q9", Path::new("x.sql")), &MonotonicClock::new())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("q9") && msg.contains("broken"), "{msg}");
    }

    #[test]
    fn exec_probe_timeout() {
        let c = ExecConnector::from_template("sh -c 'sleep 5' {sql_file}", None).unwrap();
        let started = std::time::Instant::now();
        let err = c.probe(Duration::from_millis(100), &MonotonicClock::new()).unwrap_err();
        assert!(matches!(err, ConnectorError::Unhealthy(_)));
        assert!(started.elapsed() < Duration::from_secs(4));
    }

    #[test]
    fn server_pid_file_is_monitored() {
        let dir = tempfile::tempdir().unwrap();
        let pid_file = dir.path().join("db.pid");
        std::fs::write(&pid_file, "12345\n").unwrap();
        let c = ExecConnector::from_template("true {sql_file}", Some(pid_file)).unwrap();
        assert_eq!(c.io_pids(), vec![std::process::id(), 12345]);
    }
}
