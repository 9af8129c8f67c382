//! Python bindings: the footprint models, analyses and report handling of
//! `atlas-core`, plus a replay-driven measurement entry point.
//!
//! Structured results cross the boundary as plain dicts.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use atlas_core::analysis::{self, EmbodiedScope, EnergyAccounting};
use atlas_core::energy::{self, SourceConfig};
use atlas_core::footprint::{self, FabParameters, WaterFactorTable};
use atlas_core::grid::{self, GenerationMix, GenerationSource};
use atlas_core::harness::{self, ConnectorSpec, RunOptions, WorkloadPlan};
use atlas_core::report::{self, PlotMetric, ReportContext};
use chrono::{DateTime, Utc};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Round-trips a serde value through `json.loads`.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_instant(s: &str) -> PyResult<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| value_err(format!("bad timestamp `{s}`: {e}")))
}

fn parse_mix(mix: BTreeMap<String, f64>) -> PyResult<GenerationMix> {
    mix.into_iter()
        .map(|(k, v)| {
            GenerationSource::parse(&k)
                .map(|s| (s, v))
                .ok_or_else(|| value_err(format!("unknown generation source `{k}`")))
        })
        .collect()
}

fn water_table(factors: Option<BTreeMap<String, f64>>) -> PyResult<WaterFactorTable> {
    match factors {
        None => Ok(WaterFactorTable::default()),
        Some(f) => {
            let table = WaterFactorTable(parse_mix(f)?);
            table.validate().map_err(value_err)?;
            Ok(table)
        }
    }
}

fn accounting(cpu_only: bool) -> EnergyAccounting {
    if cpu_only {
        EnergyAccounting::CpuOnly
    } else {
        EnergyAccounting::CpuAndDram
    }
}

/// Wraparound-corrected difference of two energy counter readings.
#[pyfunction]
fn counter_delta(prev: u64, curr: u64, max_range: u64) -> PyResult<u64> {
    energy::counter_delta(prev, curr, max_range).map_err(value_err)
}

/// Share-weighted intensity of `[(intensity, share), ...]`.
#[pyfunction]
fn fab_carbon_intensity(mix: Vec<(f64, f64)>) -> PyResult<f64> {
    footprint::fab_carbon_intensity(&mix).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (*, yield_fraction, fab_carbon_intensity, energy_per_area, gas_per_area, materials_per_area))]
fn cpa(
    yield_fraction: f64,
    fab_carbon_intensity: f64,
    energy_per_area: f64,
    gas_per_area: f64,
    materials_per_area: f64,
) -> PyResult<f64> {
    footprint::cpa(&FabParameters {
        yield_fraction,
        energy_per_area,
        gas_emissions_per_area: gas_per_area,
        materials_per_area,
        fab_carbon_intensity,
    })
    .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (die_area_cm2, cpa_g_per_cm2, sockets = 1))]
fn cpu_embodied(die_area_cm2: f64, cpa_g_per_cm2: f64, sockets: u32) -> PyResult<f64> {
    footprint::cpu_embodied(die_area_cm2, cpa_g_per_cm2, sockets).map_err(value_err)
}

#[pyfunction]
fn operational_carbon(energy_kwh: f64, intensity_g_per_kwh: f64) -> PyResult<f64> {
    footprint::operational_carbon(energy_kwh, intensity_g_per_kwh).map_err(value_err)
}

/// Liters for `energy_mwh` under `mix`; returns `(total, by_source)`.
#[pyfunction]
#[pyo3(signature = (energy_mwh, mix, factors = None))]
fn operational_water(
    energy_mwh: f64,
    mix: BTreeMap<String, f64>,
    factors: Option<BTreeMap<String, f64>>,
) -> PyResult<(f64, BTreeMap<String, f64>)> {
    let table = water_table(factors)?;
    let w = footprint::operational_water(energy_mwh, &parse_mix(mix)?, &table).map_err(value_err)?;
    let by_source = w
        .by_source
        .into_iter()
        .map(|(s, v)| (s.as_str().to_owned(), v))
        .collect();
    Ok((w.total_l, by_source))
}

/// Median liters per MWh for each generation source.
#[pyfunction]
fn default_water_factors() -> BTreeMap<String, f64> {
    WaterFactorTable::default()
        .0
        .into_iter()
        .map(|(s, v)| (s.as_str().to_owned(), v))
        .collect()
}

#[pyfunction]
fn breakeven<'py>(
    py: Python<'py>,
    embodied_g: f64,
    per_query_operational_g: f64,
    per_query_seconds: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let r = analysis::breakeven(embodied_g, per_query_operational_g, per_query_seconds).map_err(value_err)?;
    to_py(py, &r)
}

#[pyfunction]
fn ssd_endurance<'py>(
    py: Python<'py>,
    annual_write_bytes: f64,
    tbw_bytes: f64,
    horizon_years: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let r = analysis::ssd_endurance(annual_write_bytes, tbw_bytes, horizon_years).map_err(value_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (total, executions, unit_size = 1000))]
fn per_unit(total: f64, executions: u64, unit_size: u64) -> PyResult<f64> {
    analysis::per_unit(total, executions, unit_size).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (operational_g, embodied_total_g, run_duration_s, lifespan_s, units, functional_unit = "query"))]
fn sci<'py>(
    py: Python<'py>,
    operational_g: f64,
    embodied_total_g: f64,
    run_duration_s: f64,
    lifespan_s: f64,
    units: f64,
    functional_unit: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let r = analysis::sci(
        functional_unit,
        operational_g,
        embodied_total_g,
        run_duration_s,
        lifespan_s,
        units,
    )
    .map_err(value_err)?;
    to_py(py, &r)
}

/// Server bill of materials with embodied carbon and manufacturing water.
#[pyclass(name = "HardwareProfile", frozen, from_py_object)]
#[derive(Clone)]
struct PyHardwareProfile(footprint::HardwareProfile);

#[pymethods]
impl PyHardwareProfile {
    /// The bundled dual-socket reference server.
    #[staticmethod]
    fn reference_server() -> Self {
        Self(footprint::HardwareProfile::reference_server())
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let p = footprint::HardwareProfile::load(&path).map_err(value_err)?;
        p.validate().map_err(value_err)?;
        Ok(Self(p))
    }

    #[getter]
    fn name(&self) -> &str {
        &self.0.name
    }

    fn embodied<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &footprint::component_embodied(&self.0).map_err(value_err)?)
    }

    fn manufacturing_water<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &footprint::manufacturing_water(&self.0))
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    fn __repr__(&self) -> String {
        format!("HardwareProfile({:?})", self.0.name)
    }
}

/// Regional carbon intensity and generation mix time series.
#[pyclass(name = "GridDataset", frozen)]
struct PyGridDataset(grid::GridDataset);

#[pymethods]
impl PyGridDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        grid::import_grid_csv(&path).map(Self).map_err(value_err)
    }

    fn regions(&self) -> Vec<String> {
        self.0.regions().map(str::to_owned).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Latest snapshot at or before `at` (RFC 3339), plus an `extrapolated` flag.
    fn lookup<'py>(&self, py: Python<'py>, region: &str, at: &str) -> PyResult<Bound<'py, PyAny>> {
        let hit = self.0.lookup(region, parse_instant(at)?).map_err(value_err)?;
        let d = to_py(py, hit.snapshot)?;
        d.set_item("extrapolated", hit.extrapolated)?;
        Ok(d)
    }

    /// Carbon and water of `energy_kwh` in each region at `at`.
    #[pyo3(signature = (energy_kwh, regions, at, water_factors = None))]
    fn compare<'py>(
        &self,
        py: Python<'py>,
        energy_kwh: f64,
        regions: Vec<String>,
        at: &str,
        water_factors: Option<BTreeMap<String, f64>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let table = water_table(water_factors)?;
        let rows =
            analysis::region_compare(energy_kwh, &self.0, &regions, parse_instant(at)?, &table).map_err(value_err)?;
        to_py(py, &rows)
    }
}

/// A self-contained measurement report.
#[pyclass(name = "Report")]
struct PyReport(report::EnvReport);

#[pymethods]
impl PyReport {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        report::EnvReport::read_json(&path).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        report::EnvReport::from_json(text).map(Self).map_err(value_err)
    }

    /// Canonical JSON: sorted keys, 17 significant digits.
    fn to_json(&self) -> String {
        self.0.to_canonical_json()
    }

    fn to_csv(&self) -> String {
        self.0.csv_string()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        report::emit_json(&self.0, &path).map_err(runtime_err)
    }

    #[getter]
    fn per_query<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.per_query)
    }

    #[getter]
    fn partial(&self) -> bool {
        self.0.metadata.partial
    }

    /// Raises if any carbon or water figure does not follow from the embedded inputs.
    fn verify(&self) -> PyResult<()> {
        self.0.verify_self_contained().map_err(value_err)
    }

    /// `[(label, value), ...]` for one of carbon, water, energy, power, write_io.
    fn series(&self, metric: &str) -> PyResult<Vec<(String, f64)>> {
        let metric: PlotMetric = metric.parse().map_err(value_err)?;
        self.0.plot_series(metric).map_err(value_err)
    }

    #[pyo3(signature = (units, functional_unit = "query", lifespan_years = 5.0))]
    fn attach_sci<'py>(
        &mut self,
        py: Python<'py>,
        units: f64,
        functional_unit: &str,
        lifespan_years: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let s = self
            .0
            .attach_sci(functional_unit, units, lifespan_years, EmbodiedScope::default())
            .map_err(value_err)?;
        to_py(py, s)
    }

    #[pyo3(signature = (cpu_only = false))]
    fn attach_breakeven<'py>(&mut self, py: Python<'py>, cpu_only: bool) -> PyResult<Bound<'py, PyAny>> {
        let s = self
            .0
            .attach_breakeven(EmbodiedScope::default(), accounting(cpu_only))
            .map_err(value_err)?;
        to_py(py, s)
    }

    fn attach_lifetime<'py>(
        &mut self,
        py: Python<'py>,
        horizon_years: f64,
        queries_per_day: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let s = self
            .0
            .attach_lifetime(horizon_years, queries_per_day)
            .map_err(value_err)?;
        to_py(py, s)
    }
}

/// Runs `plan` against a recorded trace with a stub connector and converts
/// the result with `region`'s grid snapshot at the run start.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (plan, trace, grid, region, connector = "stub", profile = None, cpu_only = false))]
fn replay(
    py: Python<'_>,
    plan: PathBuf,
    trace: PathBuf,
    grid: &PyGridDataset,
    region: &str,
    connector: &str,
    profile: Option<PyHardwareProfile>,
    cpu_only: bool,
) -> PyResult<PyReport> {
    let plan = WorkloadPlan::load(&plan).map_err(value_err)?;
    let spec: ConnectorSpec = connector.parse().map_err(value_err)?;
    let profile = profile.map_or_else(footprint::HardwareProfile::reference_server, |p| p.0);
    let source_label = format!("replay:{}", trace.display());
    let source = energy::open_energy_source(&SourceConfig::Replay { trace }).map_err(value_err)?;
    let opts = RunOptions {
        clock_epoch: Some(DateTime::UNIX_EPOCH),
        hardware_profile: Some(profile.name.clone()),
        ..RunOptions::default()
    };
    let result = py
        .detach(|| {
            let conn = spec.build(None).map_err(|e| e.to_string())?;
            harness::run_workload(&plan, conn.as_ref(), &Arc::new(source), &opts).map_err(|e| e.to_string())
        })
        .map_err(runtime_err)?;
    let water = WaterFactorTable::default();
    let ctx = ReportContext {
        profile: &profile,
        grid: grid.0.lookup(region, result.started_at).map_err(value_err)?,
        water_factors: &water,
        accounting: accounting(cpu_only),
        energy_source: source_label,
    };
    report::EnvReport::build(&result, &ctx).map(PyReport).map_err(value_err)
}

#[pymodule]
fn atlas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", atlas_core::TOOL_VERSION)?;
    m.add_function(wrap_pyfunction!(counter_delta, m)?)?;
    m.add_function(wrap_pyfunction!(fab_carbon_intensity, m)?)?;
    m.add_function(wrap_pyfunction!(cpa, m)?)?;
    m.add_function(wrap_pyfunction!(cpu_embodied, m)?)?;
    m.add_function(wrap_pyfunction!(operational_carbon, m)?)?;
    m.add_function(wrap_pyfunction!(operational_water, m)?)?;
    m.add_function(wrap_pyfunction!(default_water_factors, m)?)?;
    m.add_function(wrap_pyfunction!(breakeven, m)?)?;
    m.add_function(wrap_pyfunction!(ssd_endurance, m)?)?;
    m.add_function(wrap_pyfunction!(per_unit, m)?)?;
    m.add_function(wrap_pyfunction!(sci, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_class::<PyHardwareProfile>()?;
    m.add_class::<PyGridDataset>()?;
    m.add_class::<PyReport>()?;
    Ok(())
}
