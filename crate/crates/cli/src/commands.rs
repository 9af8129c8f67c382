use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use atlas_core::analysis::{EmbodiedScope, EnergyAccounting};
use atlas_core::energy::{open_energy_source, SourceConfig};
use atlas_core::footprint::{HardwareProfile, WaterFactorTable};
use atlas_core::grid::{import_grid_csv, GridDataset};
use atlas_core::harness::{run_workload, RunOptions, WorkloadPlan, DEFAULT_PROBE_TIMEOUT};
use atlas_core::report::{emit_csv, emit_json, emit_plot_series, EnvReport, PlotMetric, ReportContext, ReportError};
use chrono::{DateTime, SecondsFormat};

use crate::config::{ResolvedConfig, RunConfig};
use crate::{AnalyzeArgs, Cli, Command, GridValidateArgs, MeasureArgs, RegionsArgs, EXIT_FATAL, EXIT_OK, EXIT_PARTIAL};

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Measure(args) => cmd_measure(cli, args.clone()),
        Command::Replay(args) => {
            let mut m = args.measure.clone();
            m.source = Some(SourceConfig::Replay {
                trace: args.trace.clone(),
            });
            cmd_measure(cli, m)
        }
        Command::Analyze(args) => cmd_analyze(cli, args),
        Command::Regions(args) => cmd_regions(cli, args),
        Command::GridValidate(args) => cmd_grid_validate(args),
    }
}

fn qualified<E>(module: &'static str) -> impl FnOnce(E) -> anyhow::Error
where
    E: std::error::Error + Send + Sync + 'static,
{
    move |e| anyhow!(e).context(module)
}

struct Log(bool);

impl Log {
    fn info(&self, msg: impl AsRef<str>) {
        if self.0 {
            eprintln!("atlas: {}", msg.as_ref());
        }
    }
}

fn measure_config(cli: &Cli, args: MeasureArgs) -> Result<ResolvedConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig {
        plan: args.plan,
        connector: args.connector,
        hardware_profile: args.profile,
        grid: args.grid,
        region: args.region,
        energy_source: args.source,
        output_dir: cli.output.clone(),
        server_pid_file: args.server_pid_file,
        water_factors: args.water_factors,
        idle_baseline_s: args.idle_baseline,
        energy_accounting: args.cpu_only.then_some(EnergyAccounting::CpuOnly),
        grid_at: args.grid_at,
        probe_timeout_s: args.probe_timeout,
    };
    base.overlay(flags).resolve()
}

fn load_profile(path: Option<&Path>) -> Result<HardwareProfile> {
    let profile = match path {
        Some(p) => HardwareProfile::load(p).map_err(qualified("footprint-models"))?,
        None => HardwareProfile::reference_server(),
    };
    profile.validate().map_err(qualified("footprint-models"))?;
    Ok(profile)
}

fn load_water(path: Option<&Path>) -> Result<WaterFactorTable> {
    let table = match path {
        Some(p) => WaterFactorTable::load(p).map_err(qualified("footprint-models"))?,
        None => WaterFactorTable::default(),
    };
    table.validate().map_err(qualified("footprint-models"))?;
    Ok(table)
}

fn load_grid(path: &Path) -> Result<GridDataset> {
    import_grid_csv(path).map_err(|e| anyhow!(e).context(format!("grid-data: {}", path.display())))
}

fn cmd_measure(cli: &Cli, args: MeasureArgs) -> Result<u8> {
    let log = Log(cli.verbose);
    let cfg = measure_config(cli, args)?;
    let plan = WorkloadPlan::load(&cfg.plan).map_err(qualified("workload-harness"))?;
    let profile = load_profile(cfg.hardware_profile.as_deref())?;
    let water = load_water(cfg.water_factors.as_deref())?;
    let grid = load_grid(&cfg.grid)?;
    grid.series(&cfg.region).map_err(qualified("grid-data"))?;
    let connector = cfg
        .connector
        .build(cfg.server_pid_file.clone())
        .map_err(qualified("workload-harness"))?;
    let source = Arc::new(open_energy_source(&cfg.energy_source).map_err(qualified("energy-capture"))?);
    let replay = source.is_replay();
    log.info(format!(
        "running {} measured executions via {} on {}",
        plan.measured_runs(),
        connector.describe(),
        String::from(cfg.energy_source.clone())
    ));

    let options = RunOptions {
        probe_timeout: cfg
            .probe_timeout_s
            .map(Duration::from_secs_f64)
            .unwrap_or(DEFAULT_PROBE_TIMEOUT),
        idle_baseline: cfg.idle_baseline_s.map(Duration::from_secs_f64),
        // replay timestamps are read as nanoseconds since the Unix epoch
        clock_epoch: replay.then_some(DateTime::UNIX_EPOCH),
        hardware_profile: Some(profile.name.clone()),
        ..RunOptions::default()
    };
    let result = run_workload(&plan, connector.as_ref(), &source, &options).map_err(qualified("workload-harness"))?;

    let at = cfg.grid_at.unwrap_or(result.started_at);
    let lookup = grid.lookup(&cfg.region, at).map_err(qualified("grid-data"))?;
    if lookup.extrapolated {
        eprintln!(
            "atlas: warning: {} precedes every {} grid snapshot; using the earliest ({})",
            at.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            cfg.region,
            lookup.snapshot.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true)
        );
    }
    let ctx = ReportContext {
        profile: &profile,
        grid: lookup,
        water_factors: &water,
        accounting: cfg.energy_accounting,
        energy_source: String::from(cfg.energy_source.clone()),
    };
    let report = EnvReport::build(&result, &ctx).map_err(qualified("reporting"))?;
    report.verify_self_contained().map_err(qualified("reporting"))?;

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out.join("series")).with_context(|| format!("creating {}", out.display()))?;
    emit_json(&report, &out.join("report.json")).map_err(qualified("reporting"))?;
    emit_csv(&report, &out.join("report.csv")).map_err(qualified("reporting"))?;
    if let Some(trace) = &result.trace {
        trace
            .write_csv(&out.join("trace.csv"))
            .map_err(qualified("energy-capture"))?;
    }
    for metric in PlotMetric::ALL {
        let path = out.join("series").join(format!("{metric}.csv"));
        match emit_plot_series(&report, metric, &path) {
            Ok(()) => {}
            Err(ReportError::MetricUnavailable(m)) => log.info(format!("no {m} series: metric unavailable")),
            Err(e) => return Err(qualified("reporting")(e)),
        }
    }
    for w in &report.warnings {
        eprintln!("atlas: warning: {w}");
    }

    let t = &report.aggregates.totals;
    println!(
        "{} executions, {:.3} s, cpu {:.6} J, dram {:.6} J, {:.6e} gCO2e, {:.6e} L -> {}",
        t.executions,
        t.wall_time_s,
        t.cpu_energy_j,
        t.dram_energy_j,
        t.carbon_g,
        t.water_l,
        out.join("report.json").display()
    );
    if let Some(f) = &report.failure {
        eprintln!("atlas: partial run: query {} failed: {}", f.query_id, f.diagnostics);
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

/// Where an augmented report goes: `--output DIR/report.json`, else in place.
fn report_destination(cli: &Cli, input: &Path) -> Result<PathBuf> {
    match &cli.output {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            Ok(dir.join("report.json"))
        }
        None => Ok(input.to_path_buf()),
    }
}

fn read_report(path: &Path) -> Result<EnvReport> {
    EnvReport::read_json(path).map_err(qualified("reporting"))
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "inf".into())
}

fn cmd_analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<u8> {
    let mut report = read_report(&args.report)?;
    let scope = EmbodiedScope::parse(&args.embodied).map_err(|e| anyhow!("--embodied: {e}"))?;
    let analysis = "sustainability-analysis";

    if let Some(units) = args.sci {
        let s = report
            .attach_sci(&args.functional_unit, units, args.lifespan, scope)
            .map_err(qualified(analysis))?;
        println!(
            "sci: {:.6e} gCO2e per {} (O {:.6e} g, M {:.6e} g, {} units)",
            s.result.sci_g_per_unit,
            s.result.functional_unit,
            s.result.operational_g,
            s.result.amortized_embodied_g,
            s.result.units
        );
    }
    if args.breakeven {
        let accounting = if args.cpu_only {
            EnergyAccounting::CpuOnly
        } else {
            report.metadata.energy_accounting
        };
        let b = report
            .attach_breakeven(scope, accounting)
            .map_err(qualified(analysis))?;
        println!(
            "breakeven: queries={} days={} (embodied {:.3} g, {:.6e} g/query)",
            fmt_opt(b.result.queries),
            fmt_opt(b.result.days_continuous),
            b.embodied_g,
            b.per_query_operational_g
        );
    }
    if let (Some(years), Some(duty)) = (args.lifetime, args.duty) {
        let l = report.attach_lifetime(years, duty).map_err(qualified(analysis))?;
        println!(
            "lifetime: {years} y at {duty} q/day: carbon {:.3} g (operational {:.3}, embodied {:.3}), water {:.3} L, ssd replacements {}",
            l.total_carbon_g, l.operational_carbon_g, l.embodied_carbon_g, l.total_water_l, l.ssd_replacements
        );
        for w in &l.warnings {
            eprintln!("atlas: warning: {w}");
        }
    }

    let dest = report_destination(cli, &args.report)?;
    emit_json(&report, &dest).map_err(qualified("reporting"))?;
    Ok(EXIT_OK)
}

fn cmd_regions(cli: &Cli, args: &RegionsArgs) -> Result<u8> {
    let mut report = read_report(&args.report)?;
    let grid = load_grid(&args.grid)?;
    let at = args.at.unwrap_or(report.metadata.timestamp);
    let section = report
        .attach_regions(&grid, &args.regions, at)
        .map_err(qualified("sustainability-analysis"))?;
    println!("region,carbon_intensity,carbon_g,water_l,snapshot_time,extrapolated");
    for r in &section.rows {
        println!(
            "{},{},{},{},{},{}",
            r.region,
            r.carbon_intensity,
            r.carbon_g,
            r.water_l,
            r.snapshot_time.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            r.extrapolated
        );
    }
    let dest = report_destination(cli, &args.report)?;
    emit_json(&report, &dest).map_err(qualified("reporting"))?;
    Ok(EXIT_OK)
}

fn cmd_grid_validate(args: &GridValidateArgs) -> Result<u8> {
    let path = &args.dataset;
    let text = std::fs::read_to_string(path).with_context(|| format!("grid-data: reading {}", path.display()))?;
    if text.trim().is_empty() {
        eprintln!("atlas: warning: {} is empty", path.display());
        return Ok(EXIT_OK);
    }
    let scan = GridDataset::scan_reader(text.as_bytes())
        .map_err(|e| anyhow!(e).context(format!("grid-data: {}", path.display())))?;
    for v in &scan.violations {
        println!("{v}");
    }
    for (line, problems) in &scan.mix_problems {
        println!("line {line}: {problems}");
    }
    let rows = scan.dataset.len();
    if rows == 0 && scan.violations.is_empty() {
        eprintln!("atlas: warning: {} has no data rows", path.display());
    }
    let regions = scan.dataset.regions().count();
    if scan.is_clean() {
        println!("ok: {rows} snapshots across {regions} regions");
        Ok(EXIT_OK)
    } else {
        let n = scan.violations.len() + scan.mix_problems.len();
        eprintln!("atlas: {} has {n} invalid rows", path.display());
        Ok(EXIT_FATAL)
    }
}
