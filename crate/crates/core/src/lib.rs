//! Energy profiling and environmental accounting for database workloads.
//!
//! The crate measures CPU and DRAM energy per query (RAPL powercap counters or
//! replayed traces), captures per-process I/O, and converts the measurements
//! into operational carbon and water figures. Hardware manufacturing costs,
//! break-even points, SSD wear and multi-year lifetime footprints are derived
//! on top of those measurements.
//!
//! Module map:
//!
//! - [`energy`]: counter acquisition, sampling and window integration
//! - [`proc_io`]: `/proc/<pid>/io` snapshots
//! - [`grid`]: regional carbon intensity and generation mix datasets
//! - [`footprint`]: operational/embodied carbon and water models
//! - [`analysis`]: SCI, break-even, endurance, lifetime and region comparison
//! - [`harness`]: workload plans, connectors and the measurement loop
//! - [`report`]: canonical JSON, CSV and plot series output

pub mod analysis;
pub mod energy;
pub mod footprint;
pub mod grid;
pub mod harness;
pub mod proc_io;
pub mod report;
pub mod units;

/// Version string embedded in generated reports.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
