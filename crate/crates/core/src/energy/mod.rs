//! Energy counter acquisition and integration.
//!
//! Counters are cumulative microjoule values that wrap at a per-domain
//! `max_range`. Sources produce [`DomainCounter`] samples, a
//! [`SamplingSession`] collects them into an [`EnergyTrace`], and
//! [`integrate_window`] turns a trace plus a time window into joules.

mod clock;
mod sampling;
mod source;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::MICROJOULES_PER_JOULE;

pub use clock::{Clock, MonotonicClock, VirtualClock};
pub use sampling::{start_sampling, stop_sampling, SamplingSession, MIN_SAMPLING_INTERVAL_NS};
pub use source::{open_energy_source, EnergySource, SourceConfig, DEFAULT_POWERCAP_ROOT};

/// Header of the replay trace CSV format.
pub const TRACE_CSV_HEADER: &str = "timestamp_ns,domain,cumulative_uj,max_range_uj";

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("energy source unavailable: {0}")]
    SourceUnavailable(String),
    #[error("trace format error in {path} line {line}: {message}")]
    TraceFormatError { path: PathBuf, line: u64, message: String },
    #[error("invalid counter: prev={prev} curr={curr} max_range={max_range}")]
    InvalidCounter { prev: u64, curr: u64, max_range: u64 },
    #[error("trace invariant violated for {domain}: {message}")]
    TraceInvariant { domain: Domain, message: String },
    #[error("sampling already active on this source")]
    AlreadySampling,
    #[error("sampling interval {0} ns is below the 1 ms minimum")]
    InvalidInterval(u64),
    #[error("window [{start}, {end}] ns does not overlap the trace span")]
    WindowOutOfRange { start: u64, end: u64 },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = EnergyError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Package,
    Dram,
}

/// A RAPL domain: package socket or DRAM controller, by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Domain {
    pub kind: DomainKind,
    pub id: u32,
}

impl Domain {
    pub fn package(id: u32) -> Self {
        Self {
            kind: DomainKind::Package,
            id,
        }
    }

    pub fn dram(id: u32) -> Self {
        Self {
            kind: DomainKind::Dram,
            id,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DomainKind::Package => write!(f, "package-{}", self.id),
            DomainKind::Dram => write!(f, "dram-{}", self.id),
        }
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, id) = if let Some(rest) = s.strip_prefix("package-") {
            (DomainKind::Package, rest)
        } else if let Some(rest) = s.strip_prefix("dram-") {
            (DomainKind::Dram, rest)
        } else {
            return Err(format!("unknown domain `{s}`"));
        };
        let id = id.parse::<u32>().map_err(|_| format!("bad domain index in `{s}`"))?;
        Ok(Self { kind, id })
    }
}

/// One cumulative counter reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainCounter {
    pub domain: Domain,
    pub cumulative_uj: u64,
    pub max_range_uj: u64,
    pub timestamp_ns: u64,
}

/// Wraparound-corrected difference between two counter readings.
///
/// Assumes at most one wrap between `prev` and `curr`.
pub fn counter_delta(prev: u64, curr: u64, max_range: u64) -> Result<u64> {
    if max_range == 0 || prev >= max_range || curr >= max_range {
        return Err(EnergyError::InvalidCounter { prev, curr, max_range });
    }
    Ok(if curr >= prev {
        curr - prev
    } else {
        max_range - prev + curr
    })
}

/// Samples grouped per domain, each group strictly increasing in time.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EnergyTrace {
    groups: BTreeMap<Domain, Vec<DomainCounter>>,
    sampling_interval_ns: u64,
}

impl EnergyTrace {
    pub fn new(sampling_interval_ns: u64) -> Self {
        Self {
            groups: BTreeMap::new(),
            sampling_interval_ns,
        }
    }

    pub fn from_samples<I>(sampling_interval_ns: u64, samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = DomainCounter>,
    {
        let mut trace = Self::new(sampling_interval_ns);
        for s in samples {
            trace.push(s)?;
        }
        Ok(trace)
    }

    /// Appends a sample, enforcing the per-domain ordering and range invariants.
    pub fn push(&mut self, sample: DomainCounter) -> Result<()> {
        let invariant = |message: String| EnergyError::TraceInvariant {
            domain: sample.domain,
            message,
        };
        if sample.max_range_uj == 0 {
            return Err(invariant("max_range must be positive".into()));
        }
        if sample.cumulative_uj >= sample.max_range_uj {
            return Err(invariant(format!(
                "cumulative {} not below max_range {}",
                sample.cumulative_uj, sample.max_range_uj
            )));
        }
        let group = self.groups.entry(sample.domain).or_default();
        if let Some(last) = group.last() {
            if sample.timestamp_ns <= last.timestamp_ns {
                return Err(invariant(format!(
                    "timestamp {} does not follow {}",
                    sample.timestamp_ns, last.timestamp_ns
                )));
            }
            if sample.max_range_uj != last.max_range_uj {
                return Err(invariant(format!(
                    "max_range changed from {} to {}",
                    last.max_range_uj, sample.max_range_uj
                )));
            }
        }
        group.push(sample);
        Ok(())
    }

    pub fn sampling_interval_ns(&self) -> u64 {
        self.sampling_interval_ns
    }

    pub fn domains(&self) -> impl Iterator<Item = Domain> + '_ {
        self.groups.keys().copied()
    }

    pub fn samples(&self, domain: Domain) -> &[DomainCounter] {
        self.groups.get(&domain).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.groups.values().all(Vec::is_empty)
    }

    /// Total number of samples across all domains.
    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    /// Earliest and latest timestamp over all groups.
    pub fn span(&self) -> Option<(u64, u64)> {
        let first = self
            .groups
            .values()
            .filter_map(|g| g.first())
            .map(|s| s.timestamp_ns)
            .min()?;
        let last = self
            .groups
            .values()
            .filter_map(|g| g.last())
            .map(|s| s.timestamp_ns)
            .max()?;
        Some((first, last))
    }

    /// Sum of wraparound-corrected deltas over all consecutive samples of a domain.
    ///
    /// Widened so long traces of wide counters cannot overflow.
    pub fn total_delta_uj(&self, domain: Domain) -> Result<u128> {
        self.samples(domain).windows(2).try_fold(0u128, |acc, w| {
            Ok(acc
                + u128::from(counter_delta(
                    w[0].cumulative_uj,
                    w[1].cumulative_uj,
                    w[1].max_range_uj,
                )?))
        })
    }

    /// Reads a replay trace in the `timestamp_ns,domain,cumulative_uj,max_range_uj` format.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| EnergyError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv_reader(file, path)
    }

    fn from_csv_reader<R: io::Read>(reader: R, path: &Path) -> Result<Self> {
        let format_err = |line: u64, message: String| EnergyError::TraceFormatError {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| format_err(1, e.to_string()))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != TRACE_CSV_HEADER {
            return Err(format_err(
                1,
                format!("expected header `{TRACE_CSV_HEADER}`, found `{header}`"),
            ));
        }

        let mut trace = Self::new(0);
        let mut last_ts = 0u64;
        for (idx, record) in rdr.records().enumerate() {
            let line = idx as u64 + 2;
            let record = record.map_err(|e| format_err(line, e.to_string()))?;
            if record.len() != 4 {
                return Err(format_err(line, format!("expected 4 fields, found {}", record.len())));
            }
            let num = |i: usize, name: &str| {
                record[i]
                    .parse::<u64>()
                    .map_err(|_| format_err(line, format!("bad {name} `{}`", &record[i])))
            };
            let timestamp_ns = num(0, "timestamp_ns")?;
            let domain = record[1].parse::<Domain>().map_err(|m| format_err(line, m))?;
            let cumulative_uj = num(2, "cumulative_uj")?;
            let max_range_uj = num(3, "max_range_uj")?;
            if timestamp_ns < last_ts {
                return Err(format_err(line, "rows not sorted by timestamp".into()));
            }
            last_ts = timestamp_ns;
            trace
                .push(DomainCounter {
                    domain,
                    cumulative_uj,
                    max_range_uj,
                    timestamp_ns,
                })
                .map_err(|e| format_err(line, e.to_string()))?;
        }
        trace.sampling_interval_ns = trace
            .groups
            .values()
            .find(|g| g.len() >= 2)
            .map(|g| g[1].timestamp_ns - g[0].timestamp_ns)
            .unwrap_or(0);
        Ok(trace)
    }

    /// Writes the trace in replay format, rows ordered by timestamp then domain.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source: io::Error| EnergyError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut rows: Vec<&DomainCounter> = self.groups.values().flatten().collect();
        rows.sort_by_key(|s| (s.timestamp_ns, s.domain));
        let mut out = String::with_capacity(rows.len() * 40 + 64);
        out.push_str(TRACE_CSV_HEADER);
        out.push('\n');
        for s in rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.timestamp_ns, s.domain, s.cumulative_uj, s.max_range_uj
            ));
        }
        std::fs::write(path, out).map_err(io_err)
    }
}

/// CPU (package) and DRAM energy over `[start_ns, end_ns]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWindow {
    pub start_ns: u64,
    pub end_ns: u64,
    pub cpu_energy_j: f64,
    pub dram_energy_j: f64,
}

impl EnergyWindow {
    pub fn total_j(&self) -> f64 {
        self.cpu_energy_j + self.dram_energy_j
    }
}

/// Integrates the trace over `[start_ns, end_ns]`.
///
/// Each domain's window is clipped to that domain's sampled span; cumulative
/// energy at the window edges is linearly interpolated between neighbouring
/// samples. Package domains add into `cpu_energy_j`, DRAM into `dram_energy_j`.
pub fn integrate_window(trace: &EnergyTrace, start_ns: u64, end_ns: u64) -> Result<EnergyWindow> {
    if trace.is_empty() {
        return Err(EnergyError::EmptyTrace);
    }
    let out_of_range = EnergyError::WindowOutOfRange {
        start: start_ns,
        end: end_ns,
    };
    if start_ns >= end_ns {
        return Err(out_of_range);
    }

    let mut cpu_uj = 0.0;
    let mut dram_uj = 0.0;
    for (domain, samples) in &trace.groups {
        let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
            continue;
        };
        let lo = start_ns.max(first.timestamp_ns);
        let hi = end_ns.min(last.timestamp_ns);
        if lo >= hi {
            return Err(out_of_range);
        }
        let unwrapped = unwrap_cumulative(samples)?;
        let energy = energy_at(samples, &unwrapped, hi) - energy_at(samples, &unwrapped, lo);
        match domain.kind {
            DomainKind::Package => cpu_uj += energy,
            DomainKind::Dram => dram_uj += energy,
        }
    }

    Ok(EnergyWindow {
        start_ns,
        end_ns,
        cpu_energy_j: cpu_uj / MICROJOULES_PER_JOULE,
        dram_energy_j: dram_uj / MICROJOULES_PER_JOULE,
    })
}

/// Running sum of corrected deltas; element 0 is zero.
fn unwrap_cumulative(samples: &[DomainCounter]) -> Result<Vec<u64>> {
    let mut acc = 0u64;
    let mut out = Vec::with_capacity(samples.len());
    out.push(0);
    for w in samples.windows(2) {
        acc += counter_delta(w[0].cumulative_uj, w[1].cumulative_uj, w[1].max_range_uj)?;
        out.push(acc);
    }
    Ok(out)
}

/// Interpolated unwrapped energy (µJ) at `t`, which must lie within the samples' span.
fn energy_at(samples: &[DomainCounter], unwrapped: &[u64], t: u64) -> f64 {
    let idx = samples.partition_point(|s| s.timestamp_ns <= t);
    // idx >= 1 because t >= first timestamp
    let k = idx - 1;
    if k + 1 >= samples.len() || samples[k].timestamp_ns == t {
        return unwrapped[k] as f64;
    }
    let (t0, t1) = (samples[k].timestamp_ns, samples[k + 1].timestamp_ns);
    let (e0, e1) = (unwrapped[k] as f64, unwrapped[k + 1] as f64);
    e0 + (e1 - e0) * ((t - t0) as f64 / (t1 - t0) as f64)
}
