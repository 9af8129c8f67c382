//! Per-process I/O counters from `/proc/<pid>/io`.

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::Clock;

#[derive(Debug, Error)]
pub enum ProcIoError {
    #[error("process {0} not found")]
    ProcessNotFound(u32),
    #[error("access denied reading i/o counters of process {0}")]
    AccessDenied(u32),
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("i/o counters went backwards ({field}: {before} -> {after}); pid reused?")]
    CounterRegression {
        field: &'static str,
        before: u64,
        after: u64,
    },
    #[error("snapshot taken at {after_ns} ns precedes the earlier one at {before_ns} ns")]
    TimestampOrder { before_ns: u64, after_ns: u64 },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoCounters {
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub timestamp_ns: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoDelta {
    pub read_bytes: u64,
    pub write_bytes: u64,
}

impl std::ops::Add for IoDelta {
    type Output = IoDelta;
    fn add(self, rhs: IoDelta) -> IoDelta {
        IoDelta {
            read_bytes: self.read_bytes + rhs.read_bytes,
            write_bytes: self.write_bytes + rhs.write_bytes,
        }
    }
}

/// Reader rooted at a procfs mount (normally `/proc`).
#[derive(Debug, Clone)]
pub struct ProcFs {
    root: PathBuf,
}

impl Default for ProcFs {
    fn default() -> Self {
        Self::new("/proc")
    }
}

impl ProcFs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Cumulative block-layer bytes for one process.
    ///
    /// Children are not aggregated until the kernel reaps them, at which point
    /// their counters fold into the parent's totals.
    pub fn snapshot_io(&self, pid: u32, clock: &dyn Clock) -> Result<IoCounters, ProcIoError> {
        let path = self.root.join(pid.to_string()).join("io");
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ProcIoError::ProcessNotFound(pid),
            io::ErrorKind::PermissionDenied => ProcIoError::AccessDenied(pid),
            _ => ProcIoError::Io {
                path: path.clone(),
                source: e,
            },
        })?;
        let timestamp_ns = clock.now_ns();
        let (read_bytes, write_bytes) = parse_io(&text, &path)?;
        Ok(IoCounters {
            read_bytes,
            write_bytes,
            timestamp_ns,
        })
    }

    /// Sum of counters over a set of processes, under one timestamp.
    pub fn snapshot_many(&self, pids: &[u32], clock: &dyn Clock) -> Result<IoCounters, ProcIoError> {
        let timestamp_ns = clock.now_ns();
        let mut total = IoCounters {
            read_bytes: 0,
            write_bytes: 0,
            timestamp_ns,
        };
        for &pid in pids {
            let c = self.snapshot_io(pid, clock)?;
            total.read_bytes += c.read_bytes;
            total.write_bytes += c.write_bytes;
        }
        Ok(total)
    }
}

/// [`ProcFs::snapshot_io`] against `/proc`.
pub fn snapshot_io(pid: u32, clock: &dyn Clock) -> Result<IoCounters, ProcIoError> {
    ProcFs::default().snapshot_io(pid, clock)
}

fn parse_io(text: &str, path: &Path) -> Result<(u64, u64), ProcIoError> {
    let field = |name: &str| -> Result<u64, ProcIoError> {
        let malformed = |message: String| ProcIoError::Malformed {
            path: path.to_path_buf(),
            message,
        };
        let line = text
            .lines()
            .find_map(|l| l.strip_prefix(name)?.strip_prefix(':'))
            .ok_or_else(|| malformed(format!("missing `{name}:`")))?;
        line.trim()
            .parse()
            .map_err(|_| malformed(format!("bad value for `{name}`: `{}`", line.trim())))
    };
    Ok((field("read_bytes")?, field("write_bytes")?))
}

/// Component-wise `after - before`.
pub fn io_delta(before: &IoCounters, after: &IoCounters) -> Result<IoDelta, ProcIoError> {
    if after.timestamp_ns < before.timestamp_ns {
        return Err(ProcIoError::TimestampOrder {
            before_ns: before.timestamp_ns,
            after_ns: after.timestamp_ns,
        });
    }
    let sub = |field, b: u64, a: u64| {
        a.checked_sub(b).ok_or(ProcIoError::CounterRegression {
            field,
            before: b,
            after: a,
        })
    };
    Ok(IoDelta {
        read_bytes: sub("read_bytes", before.read_bytes, after.read_bytes)?,
        write_bytes: sub("write_bytes", before.write_bytes, after.write_bytes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{MonotonicClock, VirtualClock};

    const SAMPLE: &str = "rchar: 4208\nwchar: 0\nsyscr: 11\nsyscw: 0\nread_bytes: 4096\nwrite_bytes: 1048576\ncancelled_write_bytes: 0\n";

    fn counters(r: u64, w: u64, t: u64) -> IoCounters {
        IoCounters {
            read_bytes: r,
            write_bytes: w,
            timestamp_ns: t,
        }
    }

    #[test]
    fn parses_proc_io_format() {
        assert_eq!(parse_io(SAMPLE, Path::new("x")).unwrap(), (4096, 1_048_576));
        // cancelled_write_bytes must not shadow write_bytes
        let reordered = "cancelled_write_bytes: 7\nwrite_bytes: 3\nread_bytes: 1\n";
        assert_eq!(parse_io(reordered, Path::new("x")).unwrap(), (1, 3));
        assert!(parse_io("rchar: 1\n", Path::new("x")).is_err());
    }

    #[test]
    fn fake_procfs_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("42")).unwrap();
        std::fs::write(dir.path().join("42/io"), SAMPLE).unwrap();
        let fs = ProcFs::new(dir.path());
        let clock = VirtualClock::starting_at(9);
        let c = fs.snapshot_io(42, &clock).unwrap();
        assert_eq!(c, counters(4096, 1_048_576, 9));
        let both = fs.snapshot_many(&[42, 42], &clock).unwrap();
        assert_eq!(both.write_bytes, 2 * 1_048_576);
        assert!(matches!(
            fs.snapshot_io(43, &clock),
            Err(ProcIoError::ProcessNotFound(43))
        ));
    }

    #[test]
    fn own_process_is_readable() {
        let clock = MonotonicClock::new();
        let a = snapshot_io(std::process::id(), &clock).unwrap();
        let b = snapshot_io(std::process::id(), &clock).unwrap();
        assert!(b.read_bytes >= a.read_bytes && b.write_bytes >= a.write_bytes);
    }

    #[test]
    fn nonexistent_pid() {
        let clock = MonotonicClock::new();
        // pid_max never exceeds 2^22
        assert!(matches!(
            snapshot_io(4_999_999, &clock),
            Err(ProcIoError::ProcessNotFound(4_999_999))
        ));
    }

    #[test]
    fn delta_identity_and_values() {
        let a = counters(10, 20, 5);
        assert_eq!(io_delta(&a, &a).unwrap(), IoDelta::default());
        let b = counters(15, 1_048_596, 6);
        assert_eq!(
            io_delta(&a, &b).unwrap(),
            IoDelta {
                read_bytes: 5,
                write_bytes: 1_048_576
            }
        );
    }

    #[test]
    fn delta_errors() {
        let a = counters(10, 20, 5);
        assert!(matches!(
            io_delta(&a, &counters(10, 20, 4)),
            Err(ProcIoError::TimestampOrder { .. })
        ));
        assert!(matches!(
            io_delta(&a, &counters(9, 20, 6)),
            Err(ProcIoError::CounterRegression {
                field: "read_bytes",
                ..
            })
        ));
    }

    proptest::proptest! {
        #[test]
        fn delta_is_additive(r in proptest::array::uniform3(0u64..1 << 40), w in proptest::array::uniform3(0u64..1 << 40)) {
            let mut r = r; r.sort();
            let mut w = w; w.sort();
            let snaps: Vec<_> = (0..3).map(|i| counters(r[i], w[i], i as u64)).collect();
            let ac = io_delta(&snaps[0], &snaps[2]).unwrap();
            let ab = io_delta(&snaps[0], &snaps[1]).unwrap();
            let bc = io_delta(&snaps[1], &snaps[2]).unwrap();
            proptest::prop_assert_eq!(ac, ab + bc);
        }
    }
}
