//! Unit conversion constants shared by all models.

pub const JOULES_PER_KWH: f64 = 3.6e6;
pub const JOULES_PER_MWH: f64 = 3.6e9;
pub const MICROJOULES_PER_JOULE: f64 = 1e6;
pub const NANOS_PER_SECOND: f64 = 1e9;
pub const SECONDS_PER_DAY: f64 = 86_400.0;
/// Julian year, used for every year-based conversion.
pub const DAYS_PER_YEAR: f64 = 365.25;
pub const SECONDS_PER_YEAR: f64 = DAYS_PER_YEAR * SECONDS_PER_DAY;

pub fn joules_to_kwh(joules: f64) -> f64 {
    joules / JOULES_PER_KWH
}

pub fn joules_to_mwh(joules: f64) -> f64 {
    joules / JOULES_PER_MWH
}

pub fn nanos_to_seconds(nanos: u64) -> f64 {
    nanos as f64 / NANOS_PER_SECOND
}
