//! Environmental models: operational carbon and water from energy, embodied
//! carbon and manufacturing water from a hardware description.
//!
//! Carbon is in grams CO2e, water in liters. Energy enters the operational
//! models as kWh (carbon) or MWh (water); callers convert from joules with
//! [`crate::units`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{sum_within, GenerationMix, GenerationSource, MIX_TOLERANCE};

const REFERENCE_SERVER_JSON: &str = include_str!("../data/reference-server.json");
const WATER_FACTORS_JSON: &str = include_str!("../data/water-factors.json");
const FAB_GRID_LEIXLIP_JSON: &str = include_str!("../data/fab-grid-leixlip.json");

#[derive(Debug, Error)]
pub enum FootprintError {
    #[error("invalid quantity {name} = {value}")]
    InvalidQuantity { name: &'static str, value: f64 },
    #[error("no water factor for generation source `{0}`")]
    UnknownSource(GenerationSource),
    #[error("shares sum to {0}, expected 1")]
    MixSumError(f64),
    #[error("fab yield must be positive, got {0}")]
    DivisionByZero(f64),
    #[error("invalid hardware profile: {0}")]
    InvalidProfile(String),
    #[error("reading {path}: {message}")]
    Load { path: String, message: String },
}

type Result<T> = std::result::Result<T, FootprintError>;

fn non_negative(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(FootprintError::InvalidQuantity { name, value })
    }
}

/// Operational carbon: grid intensity times energy.
pub fn operational_carbon(energy_kwh: f64, intensity_g_per_kwh: f64) -> Result<f64> {
    Ok(non_negative("energy_kwh", energy_kwh)? * non_negative("intensity", intensity_g_per_kwh)?)
}

/// Consumptive water per generation source, liters per MWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WaterFactorTable(pub BTreeMap<GenerationSource, f64>);

impl Default for WaterFactorTable {
    /// Median blue-water factors of the bundled `water-factors.json`.
    fn default() -> Self {
        serde_json::from_str(WATER_FACTORS_JSON).expect("bundled water factor table")
    }
}

impl WaterFactorTable {
    pub fn load(path: &Path) -> Result<Self> {
        let table: Self = load_json(path)?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for v in self.0.values() {
            non_negative("water factor", *v)?;
        }
        Ok(())
    }

    pub fn get(&self, source: GenerationSource) -> Option<f64> {
        self.0.get(&source).copied()
    }
}

/// Total water and the addend contributed by each source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterBreakdown {
    pub total_l: f64,
    pub by_source: BTreeMap<GenerationSource, f64>,
}

/// Operational water: `Σ energy × share × factor` over the mix.
pub fn operational_water(energy_mwh: f64, mix: &GenerationMix, factors: &WaterFactorTable) -> Result<WaterBreakdown> {
    non_negative("energy_mwh", energy_mwh)?;
    let mut by_source = BTreeMap::new();
    let mut total_l = 0.0;
    for (&source, &share) in mix {
        if share == 0.0 {
            by_source.insert(source, 0.0);
            continue;
        }
        let factor = factors.get(source).ok_or(FootprintError::UnknownSource(source))?;
        let addend = energy_mwh * share * factor;
        total_l += addend;
        by_source.insert(source, addend);
    }
    Ok(WaterBreakdown { total_l, by_source })
}

/// An energy source feeding a fab: label, intensity (gCO2/kWh), share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FabGridShare {
    pub label: String,
    pub intensity: f64,
    pub share: f64,
}

/// The Leixlip 14 nm fab grid bundled as `fab-grid-leixlip.json`.
pub fn leixlip_fab_grid() -> Vec<FabGridShare> {
    serde_json::from_str(FAB_GRID_LEIXLIP_JSON).expect("bundled fab grid")
}

/// Share-weighted mean intensity of a fab's supply.
pub fn fab_carbon_intensity(mix: &[(f64, f64)]) -> Result<f64> {
    let shares: f64 = mix.iter().map(|(_, s)| s).sum();
    if !sum_within(shares, MIX_TOLERANCE) {
        return Err(FootprintError::MixSumError(shares));
    }
    let mut acc = 0.0;
    for &(intensity, share) in mix {
        acc += non_negative("intensity", intensity)? * non_negative("share", share)?;
    }
    Ok(acc)
}

/// Semiconductor fab inputs for the carbon-per-area model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FabParameters {
    /// Fraction of good dies, in (0, 1].
    pub yield_fraction: f64,
    /// kWh per cm².
    pub energy_per_area: f64,
    /// gCO2 per cm² from process gases.
    pub gas_emissions_per_area: f64,
    /// gCO2 per cm² from raw materials.
    pub materials_per_area: f64,
    /// gCO2 per kWh of the fab's electricity.
    pub fab_carbon_intensity: f64,
}

/// Carbon per die area (gCO2/cm²): `(CI_fab × EPA + GPA + MPA) / yield`.
pub fn cpa(fab: &FabParameters) -> Result<f64> {
    if !(fab.yield_fraction > 0.0 && fab.yield_fraction <= 1.0) {
        return Err(FootprintError::DivisionByZero(fab.yield_fraction));
    }
    let energy = non_negative("fab_carbon_intensity", fab.fab_carbon_intensity)?
        * non_negative("energy_per_area", fab.energy_per_area)?;
    let gas = non_negative("gas_emissions_per_area", fab.gas_emissions_per_area)?;
    let materials = non_negative("materials_per_area", fab.materials_per_area)?;
    Ok((energy + gas + materials) / fab.yield_fraction)
}

/// Embodied CPU carbon: die area × CPA × sockets.
pub fn cpu_embodied(die_area_cm2: f64, cpa_g_per_cm2: f64, sockets: u32) -> Result<f64> {
    Ok(non_negative("die_area_cm2", die_area_cm2)? * non_negative("cpa", cpa_g_per_cm2)? * sockets as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpuSpec {
    /// Per socket.
    pub die_area_cm2: f64,
    pub socket_count: u32,
    pub fab: FabParameters,
    /// Manufacturing water, liters per cm² of die.
    pub water_per_cm2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramSpec {
    pub capacity_gb: f64,
    pub carbon_per_gb: f64,
    pub water_per_gb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageKind {
    Hdd,
    Ssd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageDevice {
    pub kind: StorageKind,
    pub capacity_gb: f64,
    pub carbon_per_gb: f64,
    pub water_per_gb: f64,
    /// Rated terabytes-written endurance in bytes; SSDs only.
    #[serde(default)]
    pub tbw_bytes: Option<u64>,
}

impl StorageDevice {
    pub fn embodied_g(&self) -> f64 {
        self.capacity_gb * self.carbon_per_gb
    }

    pub fn water_l(&self) -> f64 {
        self.capacity_gb * self.water_per_gb
    }
}

/// Everything the manufacturing models need to know about a server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    #[serde(default)]
    pub name: String,
    pub cpu: CpuSpec,
    pub dram: DramSpec,
    #[serde(default)]
    pub storage: Vec<StorageDevice>,
}

impl HardwareProfile {
    /// Dual-socket Xeon E5-2637 v4 server with 512 GB DDR4, a 1 TB HDD and a
    /// 512 GB SSD (bundled `reference-server.json`).
    pub fn reference_server() -> Self {
        serde_json::from_str(REFERENCE_SERVER_JSON).expect("bundled hardware profile")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let profile: Self = load_json(path)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FootprintError::InvalidProfile(m));
        let quantities = [
            ("cpu.die_area_cm2", self.cpu.die_area_cm2),
            ("cpu.water_per_cm2", self.cpu.water_per_cm2),
            ("cpu.fab.energy_per_area", self.cpu.fab.energy_per_area),
            ("cpu.fab.gas_emissions_per_area", self.cpu.fab.gas_emissions_per_area),
            ("cpu.fab.materials_per_area", self.cpu.fab.materials_per_area),
            ("cpu.fab.fab_carbon_intensity", self.cpu.fab.fab_carbon_intensity),
            ("dram.capacity_gb", self.dram.capacity_gb),
            ("dram.carbon_per_gb", self.dram.carbon_per_gb),
            ("dram.water_per_gb", self.dram.water_per_gb),
        ];
        for (name, v) in quantities {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(self.cpu.fab.yield_fraction > 0.0 && self.cpu.fab.yield_fraction <= 1.0) {
            return bad(format!(
                "cpu.fab.yield_fraction = {} must be in (0, 1]",
                self.cpu.fab.yield_fraction
            ));
        }
        for (i, d) in self.storage.iter().enumerate() {
            for (name, v) in [
                ("capacity_gb", d.capacity_gb),
                ("carbon_per_gb", d.carbon_per_gb),
                ("water_per_gb", d.water_per_gb),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("storage[{i}].{name} = {v} must be finite and non-negative"));
                }
            }
            if d.kind == StorageKind::Ssd && !d.tbw_bytes.is_some_and(|t| t > 0) {
                return bad(format!("storage[{i}] is an ssd without a positive tbw_bytes"));
            }
        }
        Ok(())
    }

    /// First SSD in the storage list, which absorbs the workload's writes.
    pub fn primary_ssd(&self) -> Option<&StorageDevice> {
        self.storage.iter().find(|d| d.kind == StorageKind::Ssd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodiedBreakdown {
    pub cpu_g: f64,
    pub dram_g: f64,
    pub storage_g: f64,
    pub total_g: f64,
}

/// Embodied carbon of each component class and their sum.
pub fn component_embodied(profile: &HardwareProfile) -> Result<EmbodiedBreakdown> {
    let cpu_g = cpu_embodied(
        profile.cpu.die_area_cm2,
        cpa(&profile.cpu.fab)?,
        profile.cpu.socket_count,
    )?;
    let dram_g = profile.dram.capacity_gb * profile.dram.carbon_per_gb;
    let storage_g: f64 = profile.storage.iter().map(StorageDevice::embodied_g).sum();
    Ok(EmbodiedBreakdown {
        cpu_g,
        dram_g,
        storage_g,
        total_g: cpu_g + dram_g + storage_g,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManufacturingWater {
    pub cpu_l: f64,
    pub dram_l: f64,
    pub storage_l: f64,
    pub total_l: f64,
}

/// Manufacturing water: CPU by die area, DRAM and storage per GB.
pub fn manufacturing_water(profile: &HardwareProfile) -> ManufacturingWater {
    let cpu = &profile.cpu;
    let cpu_l = cpu.water_per_cm2 * cpu.die_area_cm2 * cpu.socket_count as f64;
    let dram_l = profile.dram.capacity_gb * profile.dram.water_per_gb;
    let storage_l: f64 = profile.storage.iter().map(StorageDevice::water_l).sum();
    ManufacturingWater {
        cpu_l,
        dram_l,
        storage_l,
        total_l: cpu_l + dram_l + storage_l,
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let load_err = |message: String| FootprintError::Load {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))
}
