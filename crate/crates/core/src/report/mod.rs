//! Environmental reports: per-query carbon and water derived from measured
//! energy, plus optional analysis sections, with every input embedded.

mod canonical;

pub use canonical::to_canonical_string;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    self, AnalysisError, BreakEvenResult, EmbodiedScope, EnergyAccounting, LifetimeInputs, LifetimeReport,
    PerQueryAggregate, RegionRow, SciResult, DEFAULT_UNIT_SIZE,
};
use crate::footprint::{
    component_embodied, operational_carbon, operational_water, EmbodiedBreakdown, FootprintError, HardwareProfile,
    WaterFactorTable,
};
use crate::grid::{GenerationSource, GridDataset, GridLookup, GridSnapshot};
use crate::harness::{IdleBaseline, QueryFailure, RunTotals, WorkloadPlan, WorkloadResult};
use crate::units::{joules_to_kwh, joules_to_mwh, SECONDS_PER_YEAR};

pub const FORMAT_VERSION: u32 = 1;
pub const CSV_HEADER: &str =
    "query_id,repetition,wall_time_s,cpu_energy_j,dram_energy_j,carbon_g,water_l,read_bytes,write_bytes";
pub const SERIES_HEADER: &str = "label,value";
/// Relative tolerance for re-deriving stored carbon and water figures.
pub const SELF_CONTAINED_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("writing {path}: {message}")]
    WriteError { path: PathBuf, message: String },
    #[error("reading report {path}: {message}")]
    ReadError { path: PathBuf, message: String },
    #[error("unsupported report format_version {0}")]
    UnsupportedVersion(u32),
    #[error("metric `{0}` is not available in this report")]
    MetricUnavailable(&'static str),
    #[error("report is not self-contained: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Footprint(#[from] FootprintError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool_version: String,
    pub hardware_profile: String,
    pub region: String,
    pub timestamp: DateTime<Utc>,
    pub connector: String,
    pub energy_source: String,
    /// Which measured domains feed the carbon and water figures.
    pub energy_accounting: EnergyAccounting,
    pub partial: bool,
}

/// Inputs the figures were computed from, copied in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportInputs {
    pub grid_snapshot: GridSnapshot,
    /// The run started before the region's earliest snapshot, which was used anyway.
    pub grid_extrapolated: bool,
    pub hardware_profile: HardwareProfile,
    pub water_factors: WaterFactorTable,
    pub plan: WorkloadPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub repetition: u32,
    pub started_at: DateTime<Utc>,
    pub wall_time_s: f64,
    pub cpu_energy_j: f64,
    pub dram_energy_j: f64,
    pub carbon_g: f64,
    pub water_l: f64,
    pub water_by_source_l: BTreeMap<GenerationSource, f64>,
    pub read_bytes: Option<u64>,
    pub write_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub executions: u64,
    pub wall_time_s: f64,
    pub cpu_energy_j: f64,
    pub dram_energy_j: f64,
    pub carbon_g: f64,
    pub water_l: f64,
    pub read_bytes: Option<u64>,
    pub write_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerUnitFigures {
    pub unit_size: u64,
    pub wall_time_s: f64,
    pub cpu_energy_j: f64,
    pub dram_energy_j: f64,
    pub carbon_g: f64,
    pub water_l: f64,
    pub read_bytes: Option<f64>,
    pub write_bytes: Option<f64>,
}

/// The whole measured run, including gaps between queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WholeRun {
    #[serde(flatten)]
    pub totals: RunTotals,
    pub carbon_g: f64,
    pub water_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Sums over the per-query rows.
    pub totals: Totals,
    /// `totals` per 1000 executions; absent for an empty run.
    pub per_1000: Option<PerUnitFigures>,
    pub whole_run: WholeRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SciSection {
    pub lifespan_years: f64,
    pub embodied_scope: EmbodiedScope,
    pub embodied_total_g: f64,
    pub run_duration_s: f64,
    #[serde(flatten)]
    pub result: SciResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakEvenSection {
    pub embodied_scope: EmbodiedScope,
    pub energy_accounting: EnergyAccounting,
    pub embodied_g: f64,
    pub per_query_operational_g: f64,
    pub per_query_seconds: f64,
    #[serde(flatten)]
    pub result: BreakEvenResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSection {
    pub energy_kwh: f64,
    pub at: DateTime<Utc>,
    pub rows: Vec<RegionRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Analyses {
    pub sci: Option<SciSection>,
    pub breakeven: Option<BreakEvenSection>,
    pub lifetime: Option<LifetimeReport>,
    pub regions: Option<RegionSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvReport {
    pub format_version: u32,
    pub metadata: ReportMetadata,
    pub inputs: ReportInputs,
    pub per_query: Vec<QueryRow>,
    pub aggregates: Aggregates,
    pub failure: Option<QueryFailure>,
    /// Present when idle power was subtracted from per-query energies.
    pub idle_baseline: Option<IdleBaseline>,
    pub warnings: Vec<String>,
    pub analyses: Analyses,
}

/// What a measurement is converted with.
#[derive(Debug, Clone)]
pub struct ReportContext<'a> {
    pub profile: &'a HardwareProfile,
    pub grid: GridLookup<'a>,
    pub water_factors: &'a WaterFactorTable,
    pub accounting: EnergyAccounting,
    pub energy_source: String,
}

struct Converter<'a> {
    snapshot: &'a GridSnapshot,
    factors: &'a WaterFactorTable,
    accounting: EnergyAccounting,
}

impl Converter<'_> {
    fn energy_j(&self, cpu_j: f64, dram_j: f64) -> f64 {
        self.accounting.select(cpu_j, dram_j)
    }

    fn carbon(&self, cpu_j: f64, dram_j: f64) -> Result<f64, FootprintError> {
        operational_carbon(
            joules_to_kwh(self.energy_j(cpu_j, dram_j)),
            self.snapshot.carbon_intensity,
        )
    }

    fn water(&self, cpu_j: f64, dram_j: f64) -> Result<crate::footprint::WaterBreakdown, FootprintError> {
        operational_water(
            joules_to_mwh(self.energy_j(cpu_j, dram_j)),
            &self.snapshot.mix,
            self.factors,
        )
    }
}

fn sum_opt(values: impl Iterator<Item = Option<u64>>) -> Option<u64> {
    values.sum()
}

impl EnvReport {
    /// Converts a workload result into a report under `ctx`.
    pub fn build(result: &WorkloadResult, ctx: &ReportContext<'_>) -> Result<Self, ReportError> {
        let conv = Converter {
            snapshot: ctx.grid.snapshot,
            factors: ctx.water_factors,
            accounting: ctx.accounting,
        };
        let mut per_query = Vec::with_capacity(result.runs.len());
        for r in &result.runs {
            let water = conv.water(r.cpu_energy_j, r.dram_energy_j)?;
            per_query.push(QueryRow {
                query_id: r.query_id.clone(),
                repetition: r.repetition,
                started_at: r.started_at,
                wall_time_s: r.wall_time_s,
                cpu_energy_j: r.cpu_energy_j,
                dram_energy_j: r.dram_energy_j,
                carbon_g: conv.carbon(r.cpu_energy_j, r.dram_energy_j)?,
                water_l: water.total_l,
                water_by_source_l: water.by_source,
                read_bytes: r.read_bytes,
                write_bytes: r.write_bytes,
            });
        }

        let totals = Totals {
            executions: per_query.len() as u64,
            wall_time_s: per_query.iter().map(|r| r.wall_time_s).sum(),
            cpu_energy_j: per_query.iter().map(|r| r.cpu_energy_j).sum(),
            dram_energy_j: per_query.iter().map(|r| r.dram_energy_j).sum(),
            carbon_g: per_query.iter().map(|r| r.carbon_g).sum(),
            water_l: per_query.iter().map(|r| r.water_l).sum(),
            read_bytes: sum_opt(per_query.iter().map(|r| r.read_bytes)),
            write_bytes: sum_opt(per_query.iter().map(|r| r.write_bytes)),
        };
        let per_1000 = match totals.executions {
            0 => None,
            n => {
                let pu = |v: f64| analysis::per_unit(v, n, DEFAULT_UNIT_SIZE);
                Some(PerUnitFigures {
                    unit_size: DEFAULT_UNIT_SIZE,
                    wall_time_s: pu(totals.wall_time_s)?,
                    cpu_energy_j: pu(totals.cpu_energy_j)?,
                    dram_energy_j: pu(totals.dram_energy_j)?,
                    carbon_g: pu(totals.carbon_g)?,
                    water_l: pu(totals.water_l)?,
                    read_bytes: totals.read_bytes.map(|b| pu(b as f64)).transpose()?,
                    write_bytes: totals.write_bytes.map(|b| pu(b as f64)).transpose()?,
                })
            }
        };
        let run = &result.totals;
        let whole_run = WholeRun {
            totals: run.clone(),
            carbon_g: conv.carbon(run.cpu_energy_j, run.dram_energy_j)?,
            water_l: conv.water(run.cpu_energy_j, run.dram_energy_j)?.total_l,
        };

        Ok(Self {
            format_version: FORMAT_VERSION,
            metadata: ReportMetadata {
                tool_version: crate::TOOL_VERSION.to_owned(),
                hardware_profile: ctx.profile.name.clone(),
                region: ctx.grid.snapshot.region.clone(),
                timestamp: result.started_at,
                connector: result.connector.clone(),
                energy_source: ctx.energy_source.clone(),
                energy_accounting: ctx.accounting,
                partial: result.is_partial(),
            },
            inputs: ReportInputs {
                grid_snapshot: ctx.grid.snapshot.clone(),
                grid_extrapolated: ctx.grid.extrapolated,
                hardware_profile: ctx.profile.clone(),
                water_factors: ctx.water_factors.clone(),
                plan: result.plan.clone(),
            },
            per_query,
            aggregates: Aggregates {
                totals,
                per_1000,
                whole_run,
            },
            failure: result.failure.clone(),
            idle_baseline: result.idle_baseline,
            warnings: result.warnings.clone(),
            analyses: Analyses::default(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn read_json(path: &Path) -> Result<Self, ReportError> {
        let err = |message: String| ReportError::ReadError {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let version: serde_json::Value = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(ReportError::UnsupportedVersion(v as u32)),
            None => return Err(err("missing format_version".into())),
        }
        Self::from_json(&text).map_err(|e| err(e.to_string()))
    }

    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes to json");
        to_canonical_string(&value)
    }

    fn converter(&self) -> Converter<'_> {
        Converter {
            snapshot: &self.inputs.grid_snapshot,
            factors: &self.inputs.water_factors,
            accounting: self.metadata.energy_accounting,
        }
    }

    /// Mean per-query figures across all rows.
    pub fn per_query_aggregate(&self) -> Option<PerQueryAggregate> {
        let n = self.per_query.len();
        if n == 0 {
            return None;
        }
        let mean = |f: &dyn Fn(&QueryRow) -> f64| self.per_query.iter().map(f).sum::<f64>() / n as f64;
        Some(PerQueryAggregate {
            cpu_energy_j: mean(&|r| r.cpu_energy_j),
            dram_energy_j: mean(&|r| r.dram_energy_j),
            write_bytes: mean(&|r| r.write_bytes.unwrap_or(0) as f64),
            wall_time_s: mean(&|r| r.wall_time_s),
        })
    }

    fn embodied(&self, scope: EmbodiedScope) -> Result<(EmbodiedBreakdown, f64), ReportError> {
        let breakdown = component_embodied(&self.inputs.hardware_profile)?;
        let selected = scope.select(&breakdown);
        Ok((breakdown, selected))
    }

    /// Adds an SCI section: the run's operational carbon plus embodied carbon
    /// amortized over `lifespan_years`, per `units` functional units.
    pub fn attach_sci(
        &mut self,
        functional_unit: &str,
        units: f64,
        lifespan_years: f64,
        scope: EmbodiedScope,
    ) -> Result<&SciSection, ReportError> {
        let (_, embodied) = self.embodied(scope)?;
        let run_duration_s = self.aggregates.whole_run.totals.wall_time_s;
        let result = analysis::sci(
            functional_unit,
            self.aggregates.totals.carbon_g,
            embodied,
            run_duration_s,
            lifespan_years * SECONDS_PER_YEAR,
            units,
        )?;
        Ok(self.analyses.sci.insert(SciSection {
            lifespan_years,
            embodied_scope: scope,
            embodied_total_g: embodied,
            run_duration_s,
            result,
        }))
    }

    pub fn attach_breakeven(
        &mut self,
        scope: EmbodiedScope,
        accounting: EnergyAccounting,
    ) -> Result<&BreakEvenSection, ReportError> {
        let agg = self
            .per_query_aggregate()
            .ok_or(ReportError::MetricUnavailable("per_query"))?;
        let (_, embodied_g) = self.embodied(scope)?;
        let conv = Converter {
            accounting,
            ..self.converter()
        };
        let per_query_operational_g = conv.carbon(agg.cpu_energy_j, agg.dram_energy_j)?;
        let result = analysis::breakeven(embodied_g, per_query_operational_g, agg.wall_time_s)?;
        Ok(self.analyses.breakeven.insert(BreakEvenSection {
            embodied_scope: scope,
            energy_accounting: accounting,
            embodied_g,
            per_query_operational_g,
            per_query_seconds: agg.wall_time_s,
            result,
        }))
    }

    pub fn attach_lifetime(
        &mut self,
        horizon_years: f64,
        queries_per_day: f64,
    ) -> Result<&LifetimeReport, ReportError> {
        let per_query = self.per_query_aggregate().unwrap_or_default();
        let mut lifetime = analysis::lifetime_footprint(&LifetimeInputs {
            profile: &self.inputs.hardware_profile,
            per_query,
            grid: &self.inputs.grid_snapshot,
            water_factors: &self.inputs.water_factors,
            horizon_years,
            queries_per_day,
            accounting: self.metadata.energy_accounting,
        })?;
        if self.per_query.iter().any(|r| r.write_bytes.is_none()) {
            lifetime
                .warnings
                .push("some queries have no write measurement; counted as zero bytes".into());
        }
        Ok(self.analyses.lifetime.insert(lifetime))
    }

    /// Compares the run's total energy across regions at `at`.
    pub fn attach_regions(
        &mut self,
        dataset: &GridDataset,
        regions: &[String],
        at: DateTime<Utc>,
    ) -> Result<&RegionSection, ReportError> {
        let t = &self.aggregates.totals;
        let energy_kwh = joules_to_kwh(self.metadata.energy_accounting.select(t.cpu_energy_j, t.dram_energy_j));
        let rows = analysis::region_compare(energy_kwh, dataset, regions, at, &self.inputs.water_factors)?;
        Ok(self.analyses.regions.insert(RegionSection { energy_kwh, at, rows }))
    }

    /// Re-derives every per-query and whole-run carbon and water figure from
    /// its energy and the embedded grid snapshot.
    pub fn verify_self_contained(&self) -> Result<(), ReportError> {
        let conv = self.converter();
        let check = |what: String, stored: f64, derived: f64| {
            if rel_close(stored, derived, SELF_CONTAINED_TOLERANCE) {
                Ok(())
            } else {
                Err(ReportError::Inconsistent(format!(
                    "{what}: stored {stored}, derived {derived}"
                )))
            }
        };
        for r in &self.per_query {
            let label = format!("{} repetition {}", r.query_id, r.repetition);
            check(
                format!("{label} carbon_g"),
                r.carbon_g,
                conv.carbon(r.cpu_energy_j, r.dram_energy_j)?,
            )?;
            let water = conv.water(r.cpu_energy_j, r.dram_energy_j)?;
            check(format!("{label} water_l"), r.water_l, water.total_l)?;
            for (source, &l) in &water.by_source {
                let stored = r.water_by_source_l.get(source).copied().unwrap_or(f64::NAN);
                check(format!("{label} water_l[{source}]"), stored, l)?;
            }
        }
        let run = &self.aggregates.whole_run;
        let (cpu, dram) = (run.totals.cpu_energy_j, run.totals.dram_energy_j);
        check("whole_run carbon_g".into(), run.carbon_g, conv.carbon(cpu, dram)?)?;
        check("whole_run water_l".into(), run.water_l, conv.water(cpu, dram)?.total_l)?;
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<u64>| v.map(|b| b.to_string()).unwrap_or_default();
        for r in &self.per_query {
            let id = if r.query_id.contains([',', '"', '\n']) {
                format!("\"{}\"", r.query_id.replace('"', "\"\""))
            } else {
                r.query_id.clone()
            };
            out.push_str(&format!(
                "{id},{},{},{},{},{},{},{},{}\n",
                r.repetition,
                r.wall_time_s,
                r.cpu_energy_j,
                r.dram_energy_j,
                r.carbon_g,
                r.water_l,
                opt(r.read_bytes),
                opt(r.write_bytes),
            ));
        }
        out
    }

    /// One `(query_id, value)` per distinct query, in natural query-id order.
    /// Repetitions are averaged; power is mean energy over mean wall time.
    pub fn plot_series(&self, metric: PlotMetric) -> Result<Vec<(String, f64)>, ReportError> {
        let mut groups: BTreeMap<NaturalKey, Vec<&QueryRow>> = BTreeMap::new();
        for r in &self.per_query {
            groups.entry(NaturalKey::new(&r.query_id)).or_default().push(r);
        }
        let accounting = self.metadata.energy_accounting;
        let mut series = Vec::with_capacity(groups.len());
        for (key, rows) in groups {
            let n = rows.len() as f64;
            let mean = |f: &dyn Fn(&QueryRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let energy = || mean(&|r| accounting.select(r.cpu_energy_j, r.dram_energy_j));
            let value = match metric {
                PlotMetric::Carbon => mean(&|r| r.carbon_g),
                PlotMetric::Water => mean(&|r| r.water_l),
                PlotMetric::Energy => energy(),
                PlotMetric::Power => energy() / mean(&|r| r.wall_time_s),
                PlotMetric::WriteIo => {
                    if rows.iter().any(|r| r.write_bytes.is_none()) {
                        return Err(ReportError::MetricUnavailable("write_io"));
                    }
                    mean(&|r| r.write_bytes.unwrap_or(0) as f64)
                }
            };
            series.push((key.0, value));
        }
        Ok(series)
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    std::fs::write(path, contents).map_err(|e| ReportError::WriteError {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn emit_json(report: &EnvReport, path: &Path) -> Result<(), ReportError> {
    write_file(path, &report.to_canonical_json())
}

pub fn emit_csv(report: &EnvReport, path: &Path) -> Result<(), ReportError> {
    write_file(path, &report.csv_string())
}

pub fn emit_plot_series(report: &EnvReport, metric: PlotMetric, path: &Path) -> Result<(), ReportError> {
    let mut out = String::from(SERIES_HEADER);
    out.push('\n');
    for (label, value) in report.plot_series(metric)? {
        out.push_str(&format!("{label},{value}\n"));
    }
    write_file(path, &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotMetric {
    Carbon,
    Water,
    Energy,
    Power,
    WriteIo,
}

impl PlotMetric {
    pub const ALL: [PlotMetric; 5] = [Self::Carbon, Self::Water, Self::Energy, Self::Power, Self::WriteIo];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Carbon => "carbon",
            Self::Water => "water",
            Self::Energy => "energy",
            Self::Power => "power",
            Self::WriteIo => "write_io",
        }
    }
}

impl FromStr for PlotMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric `{s}` (expected carbon, water, energy, power or write_io)"))
    }
}

impl std::fmt::Display for PlotMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Orders `q2` before `q10` by comparing digit runs numerically.
#[derive(Debug, Clone, PartialEq, Eq)]
struct NaturalKey(String);

impl NaturalKey {
    fn new(s: &str) -> Self {
        Self(s.to_owned())
    }

    fn chunks(&self) -> Vec<(bool, &str)> {
        let s = self.0.as_str();
        let mut out = Vec::new();
        let mut start = 0;
        let mut prev_digit = None;
        for (i, c) in s.char_indices() {
            let d = c.is_ascii_digit();
            if prev_digit.is_some_and(|p| p != d) {
                out.push((prev_digit.unwrap(), &s[start..i]));
                start = i;
            }
            prev_digit = Some(d);
        }
        if let Some(d) = prev_digit {
            out.push((d, &s[start..]));
        }
        out
    }
}

impl Ord for NaturalKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        use std::cmp::Ordering;
        let (a, b) = (self.chunks(), other.chunks());
        for ((da, ca), (db, cb)) in a.iter().zip(&b) {
            let ord = if *da && *db {
                let (ta, tb) = (ca.trim_start_matches('0'), cb.trim_start_matches('0'));
                ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb))
            } else {
                ca.cmp(cb)
            };
            if ord != Ordering::Equal {
                return ord;
            }
        }
        a.len().cmp(&b.len()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for NaturalKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
