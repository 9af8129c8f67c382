//! Fixture workspace shared by the CLI test targets.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const GRID_HEADER: &str = "timestamp,region,carbon_intensity_gco2_kwh,mix_biomass,mix_hydropower,mix_nuclear,mix_oil,mix_coal,mix_geothermal,mix_natural_gas,mix_solar,mix_wind";

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    /// A constant-power trace (10 W package, 2 W DRAM over 10 s), a grid with
    /// IE, FR and NO snapshots, and a two-query plan.
    pub fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ws.write("trace.csv", &constant_trace(10, 2, 10));
        ws.write(
            "grid.csv",
            &format!(
                "{GRID_HEADER}\n\
                 1970-01-01T00:00:00Z,IE,300,0,0,0,0,0.1,0,0.5,0,0.4\n\
                 1970-01-01T00:00:00Z,FR,56,0,0,1,0,0,0,0,0,0\n\
                 1970-01-01T00:00:00Z,NO,19,0,1,0,0,0,0,0,0,0\n"
            ),
        );
        ws.write("q1.sql", "SELECT 1;\n");
        ws.write("q2.sql", "SELECT 2;\n");
        ws.plan("plan.json", &["q1"], 1);
        ws.plan("plan2.json", &["q1", "q2"], 1);
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    pub fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.path(name)).unwrap()
    }

    pub fn plan(&self, name: &str, ids: &[&str], reps: u32) -> PathBuf {
        let queries: Vec<String> = ids
            .iter()
            .map(|id| format!(r#"{{"query_id":"{id}","sql_path":"{id}.sql"}}"#))
            .collect();
        self.write(
            name,
            &format!(
                r#"{{"queries":[{}],"repetitions":{reps},"sampling_interval_ns":100000000}}"#,
                queries.join(",")
            ),
        )
    }

    pub fn atlas(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_atlas"))
            .current_dir(self.dir.path())
            .args(args)
            .env_remove("ATLAS_POWERCAP_ROOT")
            .output()
            .unwrap()
    }

    /// `atlas measure --source replay:trace.csv` writing into `out`.
    pub fn replay(&self, out: &str, plan: &str, connector: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "--output",
            out,
            "measure",
            "--plan",
            plan,
            "--connector",
            connector,
            "--grid",
            "grid.csv",
            "--region",
            "IE",
            "--source",
            "replay:trace.csv",
        ];
        args.extend_from_slice(extra);
        self.atlas(&args)
    }
}

pub fn constant_trace(cpu_w: u64, dram_w: u64, secs: u64) -> String {
    let mut s = String::from("timestamp_ns,domain,cumulative_uj,max_range_uj\n");
    for i in 0..=secs * 10 {
        let t = i * 100_000_000;
        s += &format!("{t},package-0,{},262143328850\n", cpu_w * 100_000 * i);
        s += &format!("{t},dram-0,{},65712999613\n", dram_w * 100_000 * i);
    }
    s
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
