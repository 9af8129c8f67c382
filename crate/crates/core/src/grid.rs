//! Regional grid carbon intensity and generation mix over time.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bit-exact header of the grid CSV format.
pub const GRID_CSV_HEADER: &str = "timestamp,region,carbon_intensity_gco2_kwh,mix_biomass,mix_hydropower,mix_nuclear,mix_oil,mix_coal,mix_geothermal,mix_natural_gas,mix_solar,mix_wind";

/// Tolerance on the mix sum accepted at import.
pub const IMPORT_MIX_TOLERANCE: f64 = 1e-3;
/// Tolerance on the mix sum for a valid snapshot.
pub const MIX_TOLERANCE: f64 = 1e-6;

/// `|sum - 1| <= tolerance`, inclusive of sums that sit on the boundary
/// but land a few ulps outside it after rounding.
pub fn sum_within(sum: f64, tolerance: f64) -> bool {
    (sum - 1.0).abs() <= tolerance * (1.0 + 1e-9)
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    FormatError { line: u64, message: String },
    #[error("line {line}: generation mix sums to {sum}, expected 1")]
    MixSumError { line: u64, sum: f64 },
    #[error("line {line}: timestamp for region {region} does not increase")]
    OrderError { line: u64, region: String },
    #[error("region `{0}` not found")]
    RegionNotFound(String),
    #[error("writing grid csv: {0}")]
    Write(String),
}

/// Electricity generation technology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationSource {
    Biomass,
    Hydropower,
    Nuclear,
    Oil,
    Coal,
    Geothermal,
    NaturalGas,
    Solar,
    Wind,
}

impl GenerationSource {
    /// All sources in CSV column order.
    pub const ALL: [GenerationSource; 9] = [
        Self::Biomass,
        Self::Hydropower,
        Self::Nuclear,
        Self::Oil,
        Self::Coal,
        Self::Geothermal,
        Self::NaturalGas,
        Self::Solar,
        Self::Wind,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Biomass => "biomass",
            Self::Hydropower => "hydropower",
            Self::Nuclear => "nuclear",
            Self::Oil => "oil",
            Self::Coal => "coal",
            Self::Geothermal => "geothermal",
            Self::NaturalGas => "natural_gas",
            Self::Solar => "solar",
            Self::Wind => "wind",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for GenerationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type GenerationMix = BTreeMap<GenerationSource, f64>;

/// A region's grid state at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSnapshot {
    pub region: String,
    pub timestamp: DateTime<Utc>,
    /// gCO2 per kWh.
    pub carbon_intensity: f64,
    /// Fraction of generation per source.
    pub mix: GenerationMix,
}

impl GridSnapshot {
    /// Snapshot with a single-source mix.
    pub fn single_source(
        region: impl Into<String>,
        timestamp: DateTime<Utc>,
        carbon_intensity: f64,
        source: GenerationSource,
    ) -> Self {
        Self {
            region: region.into(),
            timestamp,
            carbon_intensity,
            mix: BTreeMap::from([(source, 1.0)]),
        }
    }
}

/// Checks intensity and mix invariants; `Err` carries a description.
pub fn validate_mix(snapshot: &GridSnapshot) -> Result<(), String> {
    let mut problems = Vec::new();
    if snapshot.carbon_intensity.is_nan() || snapshot.carbon_intensity < 0.0 {
        problems.push(format!("carbon intensity {} is negative", snapshot.carbon_intensity));
    }
    for (source, &f) in &snapshot.mix {
        if !(0.0..=1.0).contains(&f) {
            problems.push(format!("{source} fraction {f} outside [0, 1]"));
        }
    }
    let sum: f64 = snapshot.mix.values().sum();
    if !sum_within(sum, MIX_TOLERANCE) {
        problems.push(format!("mix sums to {sum}, expected 1 ± {MIX_TOLERANCE}"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

/// Result of a [`GridDataset::lookup`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLookup<'a> {
    pub snapshot: &'a GridSnapshot,
    /// The requested instant precedes every snapshot of the region.
    pub extrapolated: bool,
}

/// Snapshots per region, each region sorted by strictly increasing time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridDataset {
    regions: BTreeMap<String, Vec<GridSnapshot>>,
}

fn parse_row(record: &csv::StringRecord, line: u64) -> Result<GridSnapshot, GridError> {
    let format_err = |message: String| GridError::FormatError { line, message };
    if record.len() != 3 + GenerationSource::ALL.len() {
        return Err(format_err(format!("expected 12 fields, found {}", record.len())));
    }
    let timestamp = DateTime::parse_from_rfc3339(&record[0])
        .map_err(|e| format_err(format!("bad timestamp `{}`: {e}", &record[0])))?
        .with_timezone(&Utc);
    let region = record[1].to_owned();
    if region.is_empty() {
        return Err(format_err("empty region".into()));
    }
    let number = |i: usize| -> Result<f64, GridError> {
        let v: f64 = record[i]
            .parse()
            .map_err(|_| format_err(format!("bad number `{}`", &record[i])))?;
        if !v.is_finite() || v < 0.0 {
            return Err(format_err(format!(
                "value `{}` must be finite and non-negative",
                &record[i]
            )));
        }
        Ok(v)
    };
    let carbon_intensity = number(2)?;
    let mut mix = GenerationMix::new();
    for (k, source) in GenerationSource::ALL.into_iter().enumerate() {
        let f = number(3 + k)?;
        if f > 1.0 {
            return Err(format_err(format!("{source} fraction {f} exceeds 1")));
        }
        mix.insert(source, f);
    }
    let sum: f64 = mix.values().sum();
    if !sum_within(sum, IMPORT_MIX_TOLERANCE) {
        return Err(GridError::MixSumError { line, sum });
    }
    Ok(GridSnapshot {
        region,
        timestamp,
        carbon_intensity,
        mix,
    })
}

pub fn import_grid_csv(path: &Path) -> Result<GridDataset, GridError> {
    let file = std::fs::File::open(path).map_err(|source| GridError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    GridDataset::from_reader(file)
}

/// Every row of a grid CSV checked, instead of stopping at the first problem.
#[derive(Debug, Default)]
pub struct GridScan {
    /// Rows that imported cleanly.
    pub dataset: GridDataset,
    /// Rows rejected at import, in file order.
    pub violations: Vec<GridError>,
    /// Imported rows failing [`validate_mix`]: `(line, problems)`.
    pub mix_problems: Vec<(u64, String)>,
}

impl GridScan {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.mix_problems.is_empty()
    }
}

impl GridDataset {
    pub fn from_reader<R: io::Read>(reader: R) -> Result<Self, GridError> {
        let scan = Self::scan_reader(reader)?;
        match scan.violations.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(scan.dataset),
        }
    }

    /// Imports what it can; only an unreadable header is an error.
    pub fn scan_reader<R: io::Read>(reader: R) -> Result<GridScan, GridError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| GridError::FormatError {
                line: 1,
                message: e.to_string(),
            })?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != GRID_CSV_HEADER {
            return Err(GridError::FormatError {
                line: 1,
                message: format!("unexpected header `{header}`"),
            });
        }

        let mut scan = GridScan::default();
        for (idx, record) in rdr.records().enumerate() {
            let line = idx as u64 + 2;
            let snapshot = match record {
                Ok(record) => parse_row(&record, line),
                Err(e) => Err(GridError::FormatError {
                    line,
                    message: e.to_string(),
                }),
            };
            let snapshot = match snapshot {
                Ok(s) => s,
                Err(e) => {
                    scan.violations.push(e);
                    continue;
                }
            };
            let series = scan.dataset.regions.entry(snapshot.region.clone()).or_default();
            if series.last().is_some_and(|s| s.timestamp >= snapshot.timestamp) {
                scan.violations.push(GridError::OrderError {
                    line,
                    region: snapshot.region,
                });
                continue;
            }
            if let Err(problems) = validate_mix(&snapshot) {
                scan.mix_problems.push((line, problems));
            }
            series.push(snapshot);
        }
        scan.dataset.regions.retain(|_, series| !series.is_empty());
        Ok(scan)
    }

    /// Builds a dataset from snapshots in any order.
    pub fn from_snapshots<I>(snapshots: I) -> Result<Self, GridError>
    where
        I: IntoIterator<Item = GridSnapshot>,
    {
        let mut dataset = Self::default();
        for s in snapshots {
            dataset.regions.entry(s.region.clone()).or_default().push(s);
        }
        for (region, series) in &mut dataset.regions {
            series.sort_by_key(|s| s.timestamp);
            if series.windows(2).any(|w| w[0].timestamp == w[1].timestamp) {
                return Err(GridError::OrderError {
                    line: 0,
                    region: region.clone(),
                });
            }
        }
        Ok(dataset)
    }

    pub fn len(&self) -> usize {
        self.regions.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn regions(&self) -> impl Iterator<Item = &str> {
        self.regions.keys().map(String::as_str)
    }

    /// All snapshots, region by region, in time order.
    pub fn snapshots(&self) -> impl Iterator<Item = &GridSnapshot> {
        self.regions.values().flatten()
    }

    pub fn series(&self, region: &str) -> Result<&[GridSnapshot], GridError> {
        self.regions
            .get(region)
            .map(Vec::as_slice)
            .ok_or_else(|| GridError::RegionNotFound(region.to_owned()))
    }

    /// Last snapshot at or before `at`; the earliest one (flagged) if `at`
    /// precedes the whole series.
    pub fn lookup(&self, region: &str, at: DateTime<Utc>) -> Result<GridLookup<'_>, GridError> {
        let series = self.series(region)?;
        let idx = series.partition_point(|s| s.timestamp <= at);
        Ok(match idx {
            0 => GridLookup {
                snapshot: &series[0],
                extrapolated: true,
            },
            _ => GridLookup {
                snapshot: &series[idx - 1],
                extrapolated: false,
            },
        })
    }

    /// Time-weighted mean of the step function over `[start, end)`.
    ///
    /// Returns the point lookup at `start` when the window is empty.
    pub fn average(&self, region: &str, start: DateTime<Utc>, end: DateTime<Utc>) -> Result<GridSnapshot, GridError> {
        let first = self.lookup(region, start)?.snapshot.clone();
        if end <= start {
            return Ok(first);
        }
        let series = self.series(region)?;
        let total = (end - start).num_nanoseconds().unwrap_or(i64::MAX) as f64;
        let mut intensity = 0.0;
        let mut mix = GenerationMix::new();
        let mut add = |snap: &GridSnapshot, from: DateTime<Utc>, to: DateTime<Utc>| {
            let w = (to - from).num_nanoseconds().unwrap_or(i64::MAX) as f64 / total;
            intensity += w * snap.carbon_intensity;
            for (src, f) in &snap.mix {
                *mix.entry(*src).or_insert(0.0) += w * f;
            }
        };
        let mut cursor = start;
        let mut current = &first;
        for next in series.iter().filter(|s| s.timestamp > start && s.timestamp < end) {
            add(current, cursor, next.timestamp);
            cursor = next.timestamp;
            current = next;
        }
        add(current, cursor, end);
        Ok(GridSnapshot {
            region: region.to_owned(),
            timestamp: start,
            carbon_intensity: intensity,
            mix,
        })
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), GridError> {
        let mut w = csv::Writer::from_writer(writer);
        let werr = |e: csv::Error| GridError::Write(e.to_string());
        w.write_record(GRID_CSV_HEADER.split(',')).map_err(werr)?;
        for s in self.snapshots() {
            let mut row = vec![
                s.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
                s.region.clone(),
                s.carbon_intensity.to_string(),
            ];
            row.extend(
                GenerationSource::ALL
                    .iter()
                    .map(|g| s.mix.get(g).copied().unwrap_or(0.0).to_string()),
            );
            w.write_record(&row).map_err(werr)?;
        }
        w.flush().map_err(|e| GridError::Write(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_659_312_000 + secs, 0).unwrap()
    }

    fn row(ts: &str, region: &str, ci: f64, mix: [f64; 9]) -> String {
        let m: Vec<String> = mix.iter().map(|f| f.to_string()).collect();
        format!("{ts},{region},{ci},{}\n", m.join(","))
    }

    fn wind() -> [f64; 9] {
        [0., 0., 0., 0., 0., 0., 0., 0., 1.]
    }

    #[test]
    fn single_wind_row() {
        let csv = format!("{GRID_CSV_HEADER}\n{}", row("2022-08-01T00:00:00Z", "IE", 13.0, wind()));
        let ds = GridDataset::from_reader(csv.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        let s = ds.lookup("IE", t(0)).unwrap().snapshot;
        assert_eq!(s.carbon_intensity, 13.0);
        assert_eq!(s.mix[&GenerationSource::Wind], 1.0);
        assert!(validate_mix(s).is_ok());
    }

    #[test]
    fn header_only_is_empty() {
        let ds = GridDataset::from_reader(format!("{GRID_CSV_HEADER}\n").as_bytes()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn scan_collects_every_violation() {
        let mut near = wind();
        near[8] = 0.9995;
        let csv = format!(
            "{GRID_CSV_HEADER}\n{}{}{}{}",
            row("2022-08-01T00:00:00Z", "IE", 13.0, wind()),
            row("2022-08-01T01:00:00Z", "IE", 13.0, [0.5; 9]),
            row("2022-08-01T00:00:00Z", "IE", 13.0, wind()),
            row("2022-08-01T02:00:00Z", "IE", 13.0, near),
        );
        let scan = GridDataset::scan_reader(csv.as_bytes()).unwrap();
        assert!(!scan.is_clean());
        assert_eq!(scan.dataset.len(), 2);
        assert!(matches!(scan.violations[0], GridError::MixSumError { line: 3, .. }));
        assert!(matches!(scan.violations[1], GridError::OrderError { line: 4, .. }));
        assert_eq!(scan.mix_problems.len(), 1);
        assert_eq!(scan.mix_problems[0].0, 5);
    }

    #[test]
    fn bad_header() {
        let err = GridDataset::from_reader("timestamp,region\n".as_bytes()).unwrap_err();
        assert!(matches!(err, GridError::FormatError { line: 1, .. }));
    }

    #[test]
    fn mix_sum_error_names_the_row() {
        let csv = format!(
            "{GRID_CSV_HEADER}\n{}{}",
            row("2022-08-01T00:00:00Z", "IE", 13.0, wind()),
            row(
                "2022-08-02T00:00:00Z",
                "IE",
                13.0,
                [0., 0., 0., 0., 0., 0., 0., 0., 0.8]
            )
        );
        match GridDataset::from_reader(csv.as_bytes()).unwrap_err() {
            GridError::MixSumError { line, sum } => {
                assert_eq!(line, 3);
                assert!((sum - 0.8).abs() < 1e-12);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_monotone_region_is_rejected() {
        let csv = format!(
            "{GRID_CSV_HEADER}\n{}{}{}",
            row("2022-08-02T00:00:00Z", "IE", 13.0, wind()),
            row("2022-08-01T00:00:00Z", "CY", 13.0, wind()),
            row("2022-08-02T00:00:00Z", "IE", 13.0, wind())
        );
        assert!(matches!(
            GridDataset::from_reader(csv.as_bytes()).unwrap_err(),
            GridError::OrderError { line: 4, .. }
        ));
    }

    #[test]
    fn negative_values_rejected() {
        let csv = format!("{GRID_CSV_HEADER}\n{}", row("2022-08-01T00:00:00Z", "IE", -1.0, wind()));
        assert!(GridDataset::from_reader(csv.as_bytes()).is_err());
    }

    #[test]
    fn step_function_lookup() {
        let ds = GridDataset::from_snapshots([
            GridSnapshot::single_source("X", t(0), 100.0, GenerationSource::Coal),
            GridSnapshot::single_source("X", t(10), 200.0, GenerationSource::Wind),
        ])
        .unwrap();
        // linear-scan oracle: greatest timestamp <= at
        for at in -3..15 {
            let expected = ds.series("X").unwrap().iter().rfind(|s| s.timestamp <= t(at));
            let got = ds.lookup("X", t(at)).unwrap();
            match expected {
                Some(e) => {
                    assert_eq!(got.snapshot, e);
                    assert!(!got.extrapolated);
                }
                None => {
                    assert_eq!(got.snapshot.timestamp, t(0));
                    assert!(got.extrapolated);
                }
            }
        }
        assert_eq!(ds.lookup("X", t(7)).unwrap().snapshot.carbon_intensity, 100.0);
        assert_eq!(ds.lookup("X", t(10)).unwrap().snapshot.carbon_intensity, 200.0);
        assert!(matches!(
            ds.lookup("Y", t(0)),
            Err(GridError::RegionNotFound(r)) if r == "Y"
        ));
    }

    #[test]
    fn windowed_average() {
        let ds = GridDataset::from_snapshots([
            GridSnapshot::single_source("X", t(0), 100.0, GenerationSource::Coal),
            GridSnapshot::single_source("X", t(10), 200.0, GenerationSource::Wind),
        ])
        .unwrap();
        // 5 s at 100 then 15 s at 200
        let avg = ds.average("X", t(5), t(25)).unwrap();
        assert!((avg.carbon_intensity - 175.0).abs() < 1e-9);
        assert!((avg.mix[&GenerationSource::Coal] - 0.25).abs() < 1e-12);
        assert!((avg.mix[&GenerationSource::Wind] - 0.75).abs() < 1e-12);
        assert!(validate_mix(&avg).is_ok());
        assert_eq!(ds.average("X", t(3), t(3)).unwrap().carbon_intensity, 100.0);
    }

    #[test]
    fn validate_mix_cases() {
        let mut s = GridSnapshot::single_source("X", t(0), 13.0, GenerationSource::Wind);
        assert!(validate_mix(&s).is_ok());
        s.mix.insert(GenerationSource::Wind, 0.999999);
        assert!(validate_mix(&s).is_ok(), "within tolerance");
        s.mix.insert(GenerationSource::Wind, 0.99999);
        assert!(validate_mix(&s).is_err());
        s.mix.insert(GenerationSource::Wind, 1.1);
        s.mix.insert(GenerationSource::Coal, -0.1);
        let msg = validate_mix(&s).unwrap_err();
        assert!(msg.contains("coal"), "{msg}");
    }

    #[test]
    fn csv_round_trip() {
        let mut on = GridSnapshot::single_source("CA-ON", t(0), 31.5, GenerationSource::Nuclear);
        on.mix = GenerationMix::from([
            (GenerationSource::Nuclear, 0.6),
            (GenerationSource::Hydropower, 0.25),
            (GenerationSource::NaturalGas, 0.1),
            (GenerationSource::Wind, 0.05),
        ]);
        let ds = GridDataset::from_snapshots([
            on,
            GridSnapshot::single_source("CY", t(3600), 611.0, GenerationSource::Oil),
        ])
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = GridDataset::from_reader(buf.as_slice()).unwrap();
        // re-import fills absent sources with explicit zeros
        let mut buf2 = Vec::new();
        back.write_csv(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        let again = GridDataset::from_reader(buf2.as_slice()).unwrap();
        assert_eq!(again, back);
    }
}
