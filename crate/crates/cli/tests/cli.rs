//! The `atlas` binary end to end: exit codes, written artifacts and the
//! analysis subcommands over a replayed fixture run.

mod common;

use common::{code, json, stderr, stdout, Workspace, GRID_HEADER};

const TWO_SECONDS: &str = "stub:latency_ms=2000";

fn measured() -> Workspace {
    let ws = Workspace::new();
    let out = ws.replay("out", "plan.json", TWO_SECONDS, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    ws
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn measure_replay_writes_every_artifact() {
    let ws = measured();
    for f in [
        "report.json",
        "report.csv",
        "trace.csv",
        "series/carbon.csv",
        "series/power.csv",
    ] {
        assert!(ws.path("out").join(f).exists(), "missing {f}");
    }
    let report = json(&ws.path("out/report.json"));
    assert_eq!(report["format_version"], 1);
    let row = &report["per_query"][0];
    assert!((row["cpu_energy_j"].as_f64().unwrap() - 20.0).abs() < 1e-6);
    assert!((row["dram_energy_j"].as_f64().unwrap() - 4.0).abs() < 1e-6);
    let csv = ws.read("out/report.csv");
    assert_eq!(csv.lines().count(), 2);
    let power = ws.read("out/series/power.csv");
    let value: f64 = power
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(close(value, 12.0, 1e-12), "{power}");
}

#[test]
fn replay_subcommand_matches_measure() {
    let ws = measured();
    let out = ws.atlas(&[
        "--output",
        "again",
        "replay",
        "--trace",
        "trace.csv",
        "--plan",
        "plan.json",
        "--connector",
        TWO_SECONDS,
        "--grid",
        "grid.csv",
        "--region",
        "IE",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(ws.read("out/report.json"), ws.read("again/report.json"));
}

#[test]
fn config_file_supplies_fields_and_flags_override() {
    let ws = Workspace::new();
    ws.write(
        "run.json",
        r#"{"plan":"plan.json","connector":"stub:latency_ms=2000","grid":"grid.csv","region":"FR",
            "energy_source":"replay:trace.csv","output_dir":"cfg-out"}"#,
    );
    let out = ws.atlas(&["--config", "run.json", "measure", "--region", "IE"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(&ws.path("cfg-out/report.json"));
    assert_eq!(report["metadata"]["region"], "IE");
}

#[test]
fn missing_profile_is_fatal() {
    let ws = Workspace::new();
    let out = ws.replay("out", "plan.json", TWO_SECONDS, &["--profile", "nope.json"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.json"), "{}", stderr(&out));
}

#[test]
fn unknown_region_at_measure_is_fatal() {
    let ws = Workspace::new();
    let out = ws.atlas(&[
        "measure",
        "--plan",
        "plan.json",
        "--connector",
        "stub",
        "--grid",
        "grid.csv",
        "--region",
        "XX",
        "--source",
        "replay:trace.csv",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("XX"));
}

#[test]
fn failing_query_gives_a_partial_report() {
    let ws = Workspace::new();
    let out = ws.replay("out", "plan2.json", "stub:latency_ms=500,fail_on=q2", &[]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let report = json(&ws.path("out/report.json"));
    assert_eq!(report["metadata"]["partial"], true);
    assert_eq!(report["per_query"].as_array().unwrap().len(), 1);
    assert_eq!(report["per_query"][0]["query_id"], "q1");
    assert_eq!(report["failure"]["query_id"], "q2");
}

#[test]
fn usage_errors_exit_64() {
    let ws = measured();
    assert_eq!(code(&ws.atlas(&["analyze", "out/report.json", "--bogus"])), 64);
    assert_eq!(code(&ws.atlas(&["analyze", "out/report.json"])), 64);
    assert_eq!(code(&ws.atlas(&["analyze", "out/report.json", "--lifetime", "5"])), 64);
    assert_eq!(code(&ws.atlas(&["frobnicate"])), 64);
    assert_eq!(code(&ws.atlas(&["--help"])), 0);
}

#[test]
fn analyze_breakeven_adds_queries_and_days() {
    let ws = measured();
    let out = ws.atlas(&["--output", "an", "analyze", "out/report.json", "--breakeven"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(&ws.path("an/report.json"));
    let be = &report["analyses"]["breakeven"];
    assert!(be["queries"].as_u64().unwrap() > 0, "{be}");
    assert!(be["days_continuous"].as_f64().unwrap() > 0.0, "{be}");
    // the original report is left untouched when --output is given
    assert!(json(&ws.path("out/report.json"))["analyses"]["breakeven"].is_null());
}

#[test]
fn analyze_in_place_and_sci() {
    let ws = measured();
    let out = ws.atlas(&["analyze", "out/report.json", "--sci", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(&ws.path("out/report.json"));
    let sci = &report["analyses"]["sci"];
    let f = |k: &str| sci[k].as_f64().unwrap();
    assert!(f("sci_g_per_unit") > 0.0, "{sci}");
    assert!(
        close(
            f("sci_g_per_unit"),
            f("operational_g") + f("amortized_embodied_g"),
            1e-12
        ),
        "{sci}"
    );
}

#[test]
fn lifetime_horizon_zero_is_manufacturing_only() {
    let ws = measured();
    let out = ws.atlas(&["analyze", "out/report.json", "--lifetime", "0", "--duty", "86400"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(&ws.path("out/report.json"));
    let l = &report["analyses"]["lifetime"];
    assert_eq!(l["operational_carbon_g"].as_f64(), Some(0.0));
    assert_eq!(l["operational_water_l"].as_f64(), Some(0.0));
    assert_eq!(l["embodied_replacements_g"].as_f64(), Some(0.0));
    assert_eq!(l["total_carbon_g"], l["embodied_initial_g"]);
    assert_eq!(l["total_water_l"], l["manufacturing_water_initial_l"]);
}

#[test]
fn regions_single_and_unknown() {
    let ws = measured();
    let out = ws.atlas(&["regions", "out/report.json", "--grid", "grid.csv", "--regions", "IE"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<String> = stdout(&out).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 2);
    let report = json(&ws.path("out/report.json"));
    let row = &report["analyses"]["regions"]["rows"][0];
    // a single region equals the measurement's own conversion
    assert!(close(
        row["carbon_g"].as_f64().unwrap(),
        report["aggregates"]["totals"]["carbon_g"].as_f64().unwrap(),
        1e-12
    ));
    assert!(close(
        row["water_l"].as_f64().unwrap(),
        report["aggregates"]["totals"]["water_l"].as_f64().unwrap(),
        1e-12
    ));

    let out = ws.atlas(&["regions", "out/report.json", "--grid", "grid.csv", "--regions", "IE,XX"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("XX"), "{}", stderr(&out));
}

#[test]
fn regions_two_region_fixture_matches_hand_computation() {
    let ws = measured();
    let out = ws.atlas(&["regions", "out/report.json", "--grid", "grid.csv", "--regions", "FR,NO"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // 24 J = 20 J package + 4 J DRAM; FR is pure nuclear (2200 L/MWh), NO pure hydro (51480 L/MWh)
    let kwh = 24.0 / 3.6e6;
    let mwh = 24.0 / 3.6e9;
    let expected = [("FR", 56.0 * kwh, 2200.0 * mwh), ("NO", 19.0 * kwh, 51480.0 * mwh)];
    let rows: Vec<Vec<String>> = stdout(&out)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    for (row, (region, carbon, water)) in rows.iter().zip(expected) {
        assert_eq!(row[0], region);
        assert!(close(row[2].parse().unwrap(), carbon, 1e-9), "{row:?} vs {carbon}");
        assert!(close(row[3].parse().unwrap(), water, 1e-9), "{row:?} vs {water}");
    }
}

#[test]
fn grid_validate_exit_codes() {
    let ws = Workspace::new();
    let out = ws.atlas(&["grid-validate", "grid.csv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("3 snapshots"), "{}", stdout(&out));

    ws.write(
        "bad.csv",
        &format!(
            "{GRID_HEADER}\n\
             2024-01-01T00:00:00Z,IE,300,0,0,0,0,0.1,0,0.5,0,0.4\n\
             2024-01-01T01:00:00Z,IE,300,0,0,0,0,0.1,0,0.5,0,0.2\n"
        ),
    );
    let out = ws.atlas(&["grid-validate", "bad.csv"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("line 3"), "{}", stdout(&out));

    ws.write("empty.csv", "");
    let out = ws.atlas(&["grid-validate", "empty.csv"]);
    assert_eq!(code(&out), 0);
    assert!(stderr(&out).contains("warning"));
}

#[test]
fn inputs_are_never_modified() {
    let ws = Workspace::new();
    let inputs = ["plan.json", "grid.csv", "trace.csv", "q1.sql"];
    let before: Vec<String> = inputs.iter().map(|f| ws.read(f)).collect();
    assert_eq!(code(&ws.replay("out", "plan.json", TWO_SECONDS, &[])), 0);
    assert_eq!(
        code(&ws.atlas(&["--output", "an", "analyze", "out/report.json", "--breakeven"])),
        0
    );
    assert_eq!(
        code(&ws.atlas(&[
            "--output",
            "rg",
            "regions",
            "out/report.json",
            "--grid",
            "grid.csv",
            "--regions",
            "FR"
        ])),
        0
    );
    assert_eq!(code(&ws.atlas(&["grid-validate", "grid.csv"])), 0);
    let after: Vec<String> = inputs.iter().map(|f| ws.read(f)).collect();
    assert_eq!(before, after);
}
