//! Derived analyses on top of measured energy and the footprint models.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::footprint::{
    self, component_embodied, manufacturing_water, operational_carbon, operational_water, EmbodiedBreakdown,
    FootprintError, HardwareProfile, WaterFactorTable,
};
use crate::grid::{GridDataset, GridError, GridSnapshot};
use crate::units::{joules_to_kwh, joules_to_mwh, DAYS_PER_YEAR, SECONDS_PER_DAY};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("execution count must be positive")]
    InvalidCount,
    #[error("duration must be positive, got {0} s")]
    InvalidDuration(f64),
    #[error("invalid quantity {name} = {value}")]
    InvalidQuantity { name: &'static str, value: f64 },
    #[error(transparent)]
    Footprint(#[from] FootprintError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

type Result<T> = std::result::Result<T, AnalysisError>;

fn non_negative(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(AnalysisError::InvalidQuantity { name, value })
    }
}

/// Which RAPL domains count as operational energy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyAccounting {
    #[default]
    CpuAndDram,
    CpuOnly,
}

impl EnergyAccounting {
    pub fn select(self, cpu_j: f64, dram_j: f64) -> f64 {
        match self {
            Self::CpuAndDram => cpu_j + dram_j,
            Self::CpuOnly => cpu_j,
        }
    }
}

/// Default normalization: per 1,000 executions.
pub const DEFAULT_UNIT_SIZE: u64 = 1000;

/// `total × unit_size / executions`.
pub fn per_unit(total: f64, executions: u64, unit_size: u64) -> Result<f64> {
    if executions == 0 {
        return Err(AnalysisError::InvalidCount);
    }
    Ok(total * unit_size as f64 / executions as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SciResult {
    pub functional_unit: String,
    pub units: f64,
    pub operational_g: f64,
    pub amortized_embodied_g: f64,
    pub sci_g_per_unit: f64,
    /// How embodied carbon was apportioned to the run.
    pub amortization: String,
}

/// Software carbon intensity with embodied carbon amortized by the run's
/// share of the hardware lifespan.
pub fn sci(
    functional_unit: &str,
    operational_g: f64,
    embodied_total_g: f64,
    run_duration_s: f64,
    lifespan_s: f64,
    units: f64,
) -> Result<SciResult> {
    if !(lifespan_s > 0.0 && lifespan_s.is_finite()) {
        return Err(AnalysisError::InvalidDuration(lifespan_s));
    }
    if !(units > 0.0 && units.is_finite()) {
        return Err(AnalysisError::InvalidCount);
    }
    non_negative("operational_g", operational_g)?;
    non_negative("embodied_total_g", embodied_total_g)?;
    non_negative("run_duration_s", run_duration_s)?;
    let amortized_embodied_g = embodied_total_g * run_duration_s / lifespan_s;
    Ok(SciResult {
        functional_unit: functional_unit.to_owned(),
        units,
        operational_g,
        amortized_embodied_g,
        sci_g_per_unit: (operational_g + amortized_embodied_g) / units,
        amortization: "time-proportional".into(),
    })
}

/// Queries and back-to-back days until operational carbon matches embodied.
///
/// `None` fields mean the point is never reached (zero per-query emissions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakEvenResult {
    pub queries: Option<u64>,
    pub days_continuous: Option<f64>,
    pub unbounded: bool,
}

pub fn breakeven(embodied_g: f64, per_query_operational_g: f64, per_query_seconds: f64) -> Result<BreakEvenResult> {
    let embodied = non_negative("embodied_g", embodied_g)?;
    let per_query = non_negative("per_query_operational_g", per_query_operational_g)?;
    let seconds = non_negative("per_query_seconds", per_query_seconds)?;
    if per_query == 0.0 {
        return Ok(BreakEvenResult {
            queries: None,
            days_continuous: None,
            unbounded: true,
        });
    }
    let queries = smallest_multiple_reaching(per_query, embodied);
    Ok(BreakEvenResult {
        queries: Some(queries),
        days_continuous: Some(queries as f64 * seconds / SECONDS_PER_DAY),
        unbounded: false,
    })
}

/// Smallest `n ≥ 0` with `n × step ≥ target`, compared exactly.
///
/// The quotient's ceiling can be off by one after rounding. A fused
/// multiply-add rounds once, so the sign of `n × step - target` it yields is
/// exact and the nudge lands on the true count.
fn smallest_multiple_reaching(step: f64, target: f64) -> u64 {
    let mut n = (target / step).ceil();
    if n >= 2f64.powi(53) {
        return n as u64;
    }
    let reaches = |n: f64| n.mul_add(step, -target) >= 0.0;
    while n > 0.0 && reaches(n - 1.0) {
        n -= 1.0;
    }
    while !reaches(n) {
        n += 1.0;
    }
    n as u64
}

/// Average power over a window: joules per second.
pub fn avg_power(energy_j: f64, duration_s: f64) -> Result<f64> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(AnalysisError::InvalidDuration(duration_s));
    }
    Ok(non_negative("energy_j", energy_j)? / duration_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Endurance {
    pub lifetime_write_bytes: f64,
    pub total_units: u64,
    pub replacements: u64,
}

/// SSD units needed to absorb `annual_write_bytes` for `horizon_years`.
pub fn ssd_endurance(annual_write_bytes: f64, tbw_bytes: f64, horizon_years: f64) -> Result<Endurance> {
    if !(tbw_bytes > 0.0 && tbw_bytes.is_finite()) {
        return Err(AnalysisError::InvalidQuantity {
            name: "tbw_bytes",
            value: tbw_bytes,
        });
    }
    let lifetime =
        non_negative("annual_write_bytes", annual_write_bytes)? * non_negative("horizon_years", horizon_years)?;
    let total_units = smallest_multiple_reaching(tbw_bytes, lifetime).max(1);
    Ok(Endurance {
        lifetime_write_bytes: lifetime,
        total_units,
        replacements: total_units - 1,
    })
}

/// Mean per-query measurements feeding lifetime projections.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerQueryAggregate {
    pub cpu_energy_j: f64,
    pub dram_energy_j: f64,
    pub write_bytes: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct LifetimeInputs<'a> {
    pub profile: &'a HardwareProfile,
    pub per_query: PerQueryAggregate,
    pub grid: &'a GridSnapshot,
    pub water_factors: &'a WaterFactorTable,
    pub horizon_years: f64,
    pub queries_per_day: f64,
    pub accounting: EnergyAccounting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeReport {
    pub horizon_years: f64,
    pub queries_per_day: f64,
    pub total_queries: f64,
    pub lifetime_energy_j: f64,
    pub lifetime_write_bytes: f64,
    pub operational_carbon_g: f64,
    pub operational_water_l: f64,
    pub embodied_initial_g: f64,
    pub embodied_replacements_g: f64,
    pub embodied_carbon_g: f64,
    pub manufacturing_water_initial_l: f64,
    pub manufacturing_water_replacements_l: f64,
    pub manufacturing_water_l: f64,
    pub ssd_units: u64,
    pub ssd_replacements: u64,
    pub total_carbon_g: f64,
    pub total_water_l: f64,
    pub warnings: Vec<String>,
}

impl LifetimeReport {
    /// Fraction of lifetime carbon attributable to manufacturing.
    pub fn manufacturing_carbon_share(&self) -> f64 {
        if self.total_carbon_g == 0.0 {
            0.0
        } else {
            self.embodied_carbon_g / self.total_carbon_g
        }
    }
}

/// Operational plus manufacturing footprint over a deployment horizon,
/// including SSDs replaced after exhausting their rated writes.
pub fn lifetime_footprint(inputs: &LifetimeInputs<'_>) -> Result<LifetimeReport> {
    let horizon = non_negative("horizon_years", inputs.horizon_years)?;
    let duty = non_negative("queries_per_day", inputs.queries_per_day)?;
    let pq = inputs.per_query;
    let energy_per_query = inputs.accounting.select(
        non_negative("cpu_energy_j", pq.cpu_energy_j)?,
        non_negative("dram_energy_j", pq.dram_energy_j)?,
    );
    let write_per_query = non_negative("write_bytes", pq.write_bytes)?;

    let days = horizon * DAYS_PER_YEAR;
    let total_queries = duty * days;
    let lifetime_energy_j = energy_per_query * total_queries;
    let operational_carbon_g = operational_carbon(joules_to_kwh(lifetime_energy_j), inputs.grid.carbon_intensity)?;
    let operational_water_l =
        operational_water(joules_to_mwh(lifetime_energy_j), &inputs.grid.mix, inputs.water_factors)?.total_l;

    let annual_write_bytes = write_per_query * duty * DAYS_PER_YEAR;
    let mut warnings = Vec::new();
    let (ssd_units, ssd_replacements, replacement_g, replacement_l) = match inputs.profile.primary_ssd() {
        Some(ssd) => {
            let tbw = ssd.tbw_bytes.unwrap_or(0) as f64;
            let e = ssd_endurance(annual_write_bytes, tbw, horizon)?;
            (
                e.total_units,
                e.replacements,
                e.replacements as f64 * ssd.embodied_g(),
                e.replacements as f64 * ssd.water_l(),
            )
        }
        None => {
            if annual_write_bytes * horizon > 0.0 {
                warnings.push("profile has no SSD: write wear is unbounded and not modeled".to_owned());
            }
            (0, 0, 0.0, 0.0)
        }
    };

    let embodied = component_embodied(inputs.profile)?;
    let water = manufacturing_water(inputs.profile);
    let embodied_carbon_g = embodied.total_g + replacement_g;
    let manufacturing_water_l = water.total_l + replacement_l;
    Ok(LifetimeReport {
        horizon_years: horizon,
        queries_per_day: duty,
        total_queries,
        lifetime_energy_j,
        lifetime_write_bytes: annual_write_bytes * horizon,
        operational_carbon_g,
        operational_water_l,
        embodied_initial_g: embodied.total_g,
        embodied_replacements_g: replacement_g,
        embodied_carbon_g,
        manufacturing_water_initial_l: water.total_l,
        manufacturing_water_replacements_l: replacement_l,
        manufacturing_water_l,
        ssd_units,
        ssd_replacements,
        total_carbon_g: operational_carbon_g + embodied_carbon_g,
        total_water_l: operational_water_l + manufacturing_water_l,
        warnings,
    })
}

/// Component classes counted as the break-even embodied baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbodiedScope {
    pub cpu: bool,
    pub dram: bool,
    pub storage: bool,
}

impl Default for EmbodiedScope {
    fn default() -> Self {
        Self {
            cpu: true,
            dram: true,
            storage: true,
        }
    }
}

impl EmbodiedScope {
    /// Parses a comma list such as `cpu,dram`.
    pub fn parse(list: &str) -> std::result::Result<Self, String> {
        let mut scope = Self {
            cpu: false,
            dram: false,
            storage: false,
        };
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "cpu" => scope.cpu = true,
                "dram" => scope.dram = true,
                "storage" => scope.storage = true,
                other => return Err(format!("unknown component `{other}`")),
            }
        }
        Ok(scope)
    }

    pub fn select(&self, e: &EmbodiedBreakdown) -> f64 {
        [(self.cpu, e.cpu_g), (self.dram, e.dram_g), (self.storage, e.storage_g)]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, g)| g)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: String,
    pub carbon_intensity: f64,
    pub carbon_g: f64,
    pub water_l: f64,
    pub snapshot_time: DateTime<Utc>,
    pub extrapolated: bool,
}

/// Carbon and water of the same energy under each region's grid at `at`.
pub fn region_compare(
    energy_kwh: f64,
    dataset: &GridDataset,
    regions: &[String],
    at: DateTime<Utc>,
    water_factors: &WaterFactorTable,
) -> Result<Vec<RegionRow>> {
    let energy_mwh = non_negative("energy_kwh", energy_kwh)? / 1000.0;
    regions
        .iter()
        .map(|region| {
            let hit = dataset.lookup(region, at)?;
            let s = hit.snapshot;
            Ok(RegionRow {
                region: region.clone(),
                carbon_intensity: s.carbon_intensity,
                carbon_g: footprint::operational_carbon(energy_kwh, s.carbon_intensity)?,
                water_l: operational_water(energy_mwh, &s.mix, water_factors)?.total_l,
                snapshot_time: s.timestamp,
                extrapolated: hit.extrapolated,
            })
        })
        .collect()
}
