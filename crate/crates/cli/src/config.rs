//! Run configuration: a JSON file, overridden field by field from flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use atlas_core::analysis::EnergyAccounting;
use atlas_core::energy::{SourceConfig, DEFAULT_POWERCAP_ROOT};
use atlas_core::harness::ConnectorSpec;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub const POWERCAP_ROOT_ENV: &str = "ATLAS_POWERCAP_ROOT";

/// Every field optional so flags can fill the gaps; [`RunConfig::resolve`]
/// checks what a measurement needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub plan: Option<PathBuf>,
    pub connector: Option<ConnectorSpec>,
    /// Bundled default server when absent.
    pub hardware_profile: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub region: Option<String>,
    pub energy_source: Option<SourceConfig>,
    pub output_dir: Option<PathBuf>,
    pub server_pid_file: Option<PathBuf>,
    /// Bundled default table when absent.
    pub water_factors: Option<PathBuf>,
    pub idle_baseline_s: Option<f64>,
    pub energy_accounting: Option<EnergyAccounting>,
    /// Instant to pick the grid snapshot at; defaults to the run start.
    pub grid_at: Option<DateTime<Utc>>,
    pub probe_timeout_s: Option<f64>,
}

impl RunConfig {
    /// Reads a config file, resolving its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.plan);
        fix(&mut self.hardware_profile);
        fix(&mut self.grid);
        fix(&mut self.output_dir);
        fix(&mut self.server_pid_file);
        fix(&mut self.water_factors);
        if let Some(SourceConfig::Replay { trace } | SourceConfig::Rapl { root: trace }) = self.energy_source.as_mut() {
            if trace.is_relative() {
                *trace = base.join(&*trace);
            }
        }
    }

    /// Fields set in `other` win.
    pub fn overlay(self, other: RunConfig) -> Self {
        Self {
            plan: other.plan.or(self.plan),
            connector: other.connector.or(self.connector),
            hardware_profile: other.hardware_profile.or(self.hardware_profile),
            grid: other.grid.or(self.grid),
            region: other.region.or(self.region),
            energy_source: other.energy_source.or(self.energy_source),
            output_dir: other.output_dir.or(self.output_dir),
            server_pid_file: other.server_pid_file.or(self.server_pid_file),
            water_factors: other.water_factors.or(self.water_factors),
            idle_baseline_s: other.idle_baseline_s.or(self.idle_baseline_s),
            energy_accounting: other.energy_accounting.or(self.energy_accounting),
            grid_at: other.grid_at.or(self.grid_at),
            probe_timeout_s: other.probe_timeout_s.or(self.probe_timeout_s),
        }
    }

    pub fn resolve(self) -> Result<ResolvedConfig> {
        fn need<T>(v: Option<T>, name: &str, flag: &str) -> Result<T> {
            v.with_context(|| format!("no {name} given: pass {flag} or set `{name}` in --config"))
        }
        let plan = need(self.plan, "plan", "--plan")?;
        let connector = need(self.connector, "connector", "--connector")?;
        let grid = need(self.grid, "grid", "--grid")?;
        let region = need(self.region, "region", "--region")?;
        let energy_source = apply_powercap_env(self.energy_source.unwrap_or(SourceConfig::Rapl {
            root: DEFAULT_POWERCAP_ROOT.into(),
        }));
        for (what, path) in [
            ("plan", Some(&plan)),
            ("grid dataset", Some(&grid)),
            ("hardware profile", self.hardware_profile.as_ref()),
            ("water factor table", self.water_factors.as_ref()),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    bail!("{what} {} does not exist", path.display());
                }
            }
        }
        if let Some(s) = self.idle_baseline_s {
            if !(s > 0.0 && s.is_finite()) {
                bail!("idle baseline must be a positive number of seconds, got {s}");
            }
        }
        Ok(ResolvedConfig {
            plan,
            connector,
            hardware_profile: self.hardware_profile,
            grid,
            region,
            energy_source,
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("atlas-out")),
            server_pid_file: self.server_pid_file,
            water_factors: self.water_factors,
            idle_baseline_s: self.idle_baseline_s,
            energy_accounting: self.energy_accounting.unwrap_or_default(),
            grid_at: self.grid_at,
            probe_timeout_s: self.probe_timeout_s,
        })
    }
}

/// The environment override applies only to the default sysfs root.
fn apply_powercap_env(source: SourceConfig) -> SourceConfig {
    match source {
        SourceConfig::Rapl { root } if root == Path::new(DEFAULT_POWERCAP_ROOT) => {
            match std::env::var_os(POWERCAP_ROOT_ENV) {
                Some(env_root) if !env_root.is_empty() => SourceConfig::Rapl { root: env_root.into() },
                _ => SourceConfig::Rapl { root },
            }
        }
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub plan: PathBuf,
    pub connector: ConnectorSpec,
    pub hardware_profile: Option<PathBuf>,
    pub grid: PathBuf,
    pub region: String,
    pub energy_source: SourceConfig,
    pub output_dir: PathBuf,
    pub server_pid_file: Option<PathBuf>,
    pub water_factors: Option<PathBuf>,
    pub idle_baseline_s: Option<f64>,
    pub energy_accounting: EnergyAccounting,
    pub grid_at: Option<DateTime<Utc>>,
    pub probe_timeout_s: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"plan":"plan.json","connector":"stub","grid":"/data/grid.csv","region":"IE","energy_source":"replay:trace.csv"}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.plan, Some(dir.path().join("plan.json")));
        assert_eq!(cfg.grid, Some(PathBuf::from("/data/grid.csv")));
        assert_eq!(
            cfg.energy_source,
            Some(SourceConfig::Replay {
                trace: dir.path().join("trace.csv")
            })
        );
    }

    #[test]
    fn flags_override_and_missing_fields_are_named() {
        let base = RunConfig {
            region: Some("IE".into()),
            ..RunConfig::default()
        };
        let merged = base.overlay(RunConfig {
            region: Some("DE".into()),
            ..RunConfig::default()
        });
        assert_eq!(merged.region.as_deref(), Some("DE"));
        let err = merged.resolve().unwrap_err().to_string();
        assert!(err.contains("plan"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"plan":"p.json","colour":"red"}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
