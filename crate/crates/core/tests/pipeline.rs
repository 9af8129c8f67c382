//! Replay pipeline from on-disk fixtures: trace, plan and grid through the
//! harness into a report, compared against a frozen golden document.
//!
//! Set `ATLAS_BLESS_GOLDEN=1` to regenerate the golden file after an
//! intentional format change.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use atlas_core::analysis::EnergyAccounting;
use atlas_core::energy::{integrate_window, open_energy_source, EnergyTrace, SourceConfig};
use atlas_core::footprint::{HardwareProfile, WaterFactorTable};
use atlas_core::grid::import_grid_csv;
use atlas_core::harness::{run_workload, ConnectorSpec, RunOptions, WorkloadPlan, WorkloadResult};
use atlas_core::report::{EnvReport, PlotMetric, ReportContext, CSV_HEADER};
use atlas_core::units::{JOULES_PER_KWH, JOULES_PER_MWH};
use chrono::DateTime;

const STUB: &str = "stub:latency_ms.q1=500,latency_ms.q2=1000,write_bytes=4096,read_bytes=65536";

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run() -> WorkloadResult {
    let plan = WorkloadPlan::load(&data("plan.json")).unwrap();
    let source = open_energy_source(&SourceConfig::Replay {
        trace: data("trace.csv"),
    })
    .unwrap();
    let connector = STUB.parse::<ConnectorSpec>().unwrap().build(None).unwrap();
    let opts = RunOptions {
        clock_epoch: Some(DateTime::UNIX_EPOCH),
        hardware_profile: Some("reference-server".into()),
        ..RunOptions::default()
    };
    run_workload(&plan, connector.as_ref(), &Arc::new(source), &opts).unwrap()
}

fn report(result: &WorkloadResult) -> EnvReport {
    let grid = import_grid_csv(&data("grid.csv")).unwrap();
    let profile = HardwareProfile::reference_server();
    let water = WaterFactorTable::default();
    let ctx = ReportContext {
        profile: &profile,
        grid: grid.lookup("IE", result.started_at).unwrap(),
        water_factors: &water,
        accounting: EnergyAccounting::CpuAndDram,
        energy_source: "replay:trace.csv".into(),
    };
    EnvReport::build(result, &ctx).unwrap()
}

#[test]
fn replay_run_matches_the_trace() {
    let result = run();
    assert!(!result.is_partial());
    assert_eq!(result.runs.len(), 4);
    assert_eq!(result.order_seed, Some(7));
    for r in &result.runs {
        let expected_s = if r.query_id == "q1" { 0.5 } else { 1.0 };
        assert!((r.wall_time_s - expected_s).abs() < 1e-12, "{r:?}");
        // 10 W package, 2 W DRAM whose counter wraps every 0.5 s
        assert!((r.cpu_energy_j - 10.0 * expected_s).abs() < 1e-9, "{r:?}");
        assert!((r.dram_energy_j - 2.0 * expected_s).abs() < 1e-9, "{r:?}");
        assert_eq!(r.write_bytes, Some(4096));
        assert_eq!(r.read_bytes, Some(65536));
    }
    // run totals span the two measured rounds; the 1.5 s warmup precedes them
    assert!((result.totals.wall_time_s - 3.0).abs() < 1e-9);
    let per_query: f64 = result.runs.iter().map(|r| r.cpu_energy_j).sum();
    assert!(per_query <= result.totals.cpu_energy_j + 1e-9);
}

#[test]
fn recorded_trace_reintegrates_to_the_same_windows() {
    let result = run();
    let trace = result.trace.as_ref().expect("trace retained");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    trace.write_csv(&path).unwrap();
    let reread = EnergyTrace::read_csv(&path).unwrap();
    for r in &result.runs {
        let w = integrate_window(&reread, r.start_ns, r.end_ns).unwrap();
        assert_eq!(w.cpu_energy_j.to_bits(), r.cpu_energy_j.to_bits());
        assert_eq!(w.dram_energy_j.to_bits(), r.dram_energy_j.to_bits());
    }
}

#[test]
fn report_carbon_follows_the_embedded_snapshot() {
    let report = report(&run());
    report.verify_self_contained().unwrap();
    let ci = report.inputs.grid_snapshot.carbon_intensity;
    assert_eq!(ci, 296.5);
    assert!(!report.inputs.grid_extrapolated);
    for row in &report.per_query {
        let kwh = (row.cpu_energy_j + row.dram_energy_j) / JOULES_PER_KWH;
        let carbon = kwh * ci;
        assert!((row.carbon_g - carbon).abs() <= 1e-12 * carbon, "{row:?}");
        let mwh = (row.cpu_energy_j + row.dram_energy_j) / JOULES_PER_MWH;
        let water: f64 = report
            .inputs
            .grid_snapshot
            .mix
            .iter()
            .map(|(src, share)| mwh * share * report.inputs.water_factors.get(*src).unwrap_or(0.0))
            .sum();
        assert!((row.water_l - water).abs() <= 1e-12 * water, "{row:?}");
    }

    let csv = report.csv_string();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.count(), report.per_query.len());
    let carbon = report.plot_series(PlotMetric::Carbon).unwrap();
    assert_eq!(carbon.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>(), ["q1", "q2"]);
}

#[test]
fn golden_report() {
    let text = report(&run()).to_canonical_json();
    let golden = data("golden-report.json");
    if std::env::var_os("ATLAS_BLESS_GOLDEN").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    let frozen = std::fs::read_to_string(&golden).expect("golden file present");
    assert_eq!(text, frozen, "report drifted from {}", golden.display());
    assert_eq!(EnvReport::from_json(&frozen).unwrap().to_canonical_json(), frozen);
}
