use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use super::clock::{Clock, MonotonicClock, VirtualClock};
use super::{counter_delta, Domain, DomainCounter, EnergyError, EnergyTrace, Result};

pub const DEFAULT_POWERCAP_ROOT: &str = "/sys/class/powercap";

/// Which backend to open: live powercap counters or a recorded trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SourceConfig {
    Rapl { root: PathBuf },
    Replay { trace: PathBuf },
}

impl FromStr for SourceConfig {
    type Err = String;

    /// Accepts `rapl`, `rapl:<root>` and `replay:<trace.csv>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "rapl" => Ok(Self::Rapl {
                root: DEFAULT_POWERCAP_ROOT.into(),
            }),
            Some(("rapl", root)) if !root.is_empty() => Ok(Self::Rapl { root: root.into() }),
            Some(("replay", trace)) if !trace.is_empty() => Ok(Self::Replay { trace: trace.into() }),
            _ => Err(format!(
                "invalid energy source `{s}` (expected `rapl`, `rapl:<root>` or `replay:<file>`)"
            )),
        }
    }
}

impl TryFrom<String> for SourceConfig {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SourceConfig> for String {
    fn from(c: SourceConfig) -> Self {
        match c {
            SourceConfig::Rapl { root } => format!("rapl:{}", root.display()),
            SourceConfig::Replay { trace } => format!("replay:{}", trace.display()),
        }
    }
}

#[derive(Debug)]
struct RaplZone {
    domain: Domain,
    energy_path: PathBuf,
    max_range_uj: u64,
}

#[derive(Debug)]
enum Backend {
    Rapl {
        zones: Vec<RaplZone>,
        clock: MonotonicClock,
    },
    Replay {
        trace: EnergyTrace,
        clock: VirtualClock,
    },
}

/// An open energy counter source.
#[derive(Debug)]
pub struct EnergySource {
    backend: Backend,
    domains: Vec<Domain>,
    pub(super) sampling: AtomicBool,
}

pub fn open_energy_source(config: &SourceConfig) -> Result<EnergySource> {
    match config {
        SourceConfig::Rapl { root } => EnergySource::rapl(root),
        SourceConfig::Replay { trace } => EnergySource::replay(EnergyTrace::read_csv(trace)?),
    }
}

impl EnergySource {
    /// Enumerates `intel-rapl:<i>` zones named `package-N` and their `dram` subzones.
    pub fn rapl(root: &Path) -> Result<Self> {
        let unavailable = |what: String| EnergyError::SourceUnavailable(what);
        let entries = fs::read_dir(root)
            .map_err(|e| unavailable(format!("cannot read powercap root {}: {e}", root.display())))?;

        let mut zones = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| unavailable(format!("{}: {e}", root.display())))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !is_top_level_zone(&name) {
                continue;
            }
            let zone_dir = entry.path();
            let zone_name = read_trimmed(&zone_dir.join("name"))
                .map_err(|e| unavailable(format!("{}: {e}", zone_dir.display())))?;
            let Some(package) = zone_name.strip_prefix("package-").and_then(|n| n.parse::<u32>().ok()) else {
                continue;
            };
            zones.push(open_zone(&zone_dir, Domain::package(package))?);

            for sub in fs::read_dir(&zone_dir)
                .map_err(|e| unavailable(format!("{}: {e}", zone_dir.display())))?
                .flatten()
            {
                let sub_name = sub.file_name().to_string_lossy().into_owned();
                if !sub_name.starts_with(&format!("{name}:")) {
                    continue;
                }
                if read_trimmed(&sub.path().join("name")).ok().as_deref() == Some("dram") {
                    zones.push(open_zone(&sub.path(), Domain::dram(package))?);
                }
            }
        }
        if zones.is_empty() {
            return Err(unavailable(format!("no RAPL package domains under {}", root.display())));
        }
        zones.sort_by_key(|z| z.domain);
        let domains = zones.iter().map(|z| z.domain).collect();
        Ok(Self {
            backend: Backend::Rapl {
                zones,
                clock: MonotonicClock::new(),
            },
            domains,
            sampling: AtomicBool::new(false),
        })
    }

    /// Wraps a recorded trace; virtual time starts where every domain has data.
    pub fn replay(trace: EnergyTrace) -> Result<Self> {
        let domains: Vec<Domain> = trace.domains().collect();
        let start = domains
            .iter()
            .filter_map(|d| trace.samples(*d).first())
            .map(|s| s.timestamp_ns)
            .max()
            .ok_or(EnergyError::EmptyTrace)?;
        Ok(Self {
            backend: Backend::Replay {
                trace,
                clock: VirtualClock::starting_at(start),
            },
            domains,
            sampling: AtomicBool::new(false),
        })
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn clock(&self) -> &dyn Clock {
        match &self.backend {
            Backend::Rapl { clock, .. } => clock,
            Backend::Replay { clock, .. } => clock,
        }
    }

    /// The virtual clock driving a replay source.
    pub fn virtual_clock(&self) -> Option<&VirtualClock> {
        match &self.backend {
            Backend::Replay { clock, .. } => Some(clock),
            Backend::Rapl { .. } => None,
        }
    }

    pub fn is_replay(&self) -> bool {
        matches!(self.backend, Backend::Replay { .. })
    }

    pub fn is_sampling(&self) -> bool {
        self.sampling.load(Ordering::SeqCst)
    }

    /// One counter per domain, all stamped with a single clock read.
    pub fn read_counters(&self) -> Result<Vec<DomainCounter>> {
        match &self.backend {
            Backend::Rapl { zones, clock } => {
                let timestamp_ns = clock.now_ns();
                zones
                    .iter()
                    .map(|z| {
                        let raw = read_trimmed(&z.energy_path)
                            .map_err(|e| EnergyError::SourceUnavailable(format!("{}: {e}", z.energy_path.display())))
                            .and_then(|s| parse_u64(&s, &z.energy_path))?;
                        Ok(DomainCounter {
                            domain: z.domain,
                            cumulative_uj: raw % z.max_range_uj,
                            max_range_uj: z.max_range_uj,
                            timestamp_ns,
                        })
                    })
                    .collect()
            }
            Backend::Replay { clock, .. } => self.read_at(clock.now_ns()),
        }
    }

    /// Replay counters at an arbitrary virtual instant.
    ///
    /// Exact row timestamps return that row; instants between rows are
    /// linearly interpolated (wrap-aware) and rounded to whole microjoules.
    pub(super) fn read_at(&self, t: u64) -> Result<Vec<DomainCounter>> {
        let Backend::Replay { trace, .. } = &self.backend else {
            return self.read_counters();
        };
        self.domains
            .iter()
            .map(|&domain| {
                let samples = trace.samples(domain);
                let exhausted =
                    || EnergyError::SourceUnavailable(format!("replay trace has no data for {domain} at t={t} ns"));
                let idx = samples.partition_point(|s| s.timestamp_ns <= t);
                if idx == 0 {
                    return Err(exhausted());
                }
                let a = samples[idx - 1];
                if a.timestamp_ns == t {
                    return Ok(a);
                }
                let b = *samples.get(idx).ok_or_else(exhausted)?;
                let delta = counter_delta(a.cumulative_uj, b.cumulative_uj, b.max_range_uj)?;
                let frac = (t - a.timestamp_ns) as f64 / (b.timestamp_ns - a.timestamp_ns) as f64;
                let step = (delta as f64 * frac).round() as u64;
                let cumulative_uj = ((a.cumulative_uj as u128 + step as u128) % a.max_range_uj as u128) as u64;
                Ok(DomainCounter {
                    domain,
                    cumulative_uj,
                    max_range_uj: a.max_range_uj,
                    timestamp_ns: t,
                })
            })
            .collect()
    }
}

/// `intel-rapl:<i>` with no subzone suffix.
fn is_top_level_zone(name: &str) -> bool {
    name.strip_prefix("intel-rapl:")
        .is_some_and(|idx| !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()))
}

fn open_zone(dir: &Path, domain: Domain) -> Result<RaplZone> {
    let energy_path = dir.join("energy_uj");
    let range_path = dir.join("max_energy_range_uj");
    let unavailable = |p: &Path, e: io::Error| EnergyError::SourceUnavailable(format!("{}: {e}", p.display()));
    let max_range_uj = parse_u64(
        &read_trimmed(&range_path).map_err(|e| unavailable(&range_path, e))?,
        &range_path,
    )?;
    if max_range_uj == 0 {
        return Err(EnergyError::SourceUnavailable(format!(
            "{}: zero max_energy_range_uj",
            range_path.display()
        )));
    }
    // energy_uj is often root-only; fail at open time rather than mid-run
    read_trimmed(&energy_path).map_err(|e| unavailable(&energy_path, e))?;
    Ok(RaplZone {
        domain,
        energy_path,
        max_range_uj,
    })
}

fn read_trimmed(path: &Path) -> io::Result<String> {
    Ok(fs::read_to_string(path)?.trim().to_owned())
}

fn parse_u64(s: &str, path: &Path) -> Result<u64> {
    s.parse()
        .map_err(|_| EnergyError::SourceUnavailable(format!("{}: not an integer: `{s}`", path.display())))
}
