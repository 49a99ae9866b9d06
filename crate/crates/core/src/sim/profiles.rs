//! Time-series ingestion: CSV files whose first column is the sample start
//! in minutes and whose other columns are named series (home loads in kW, or
//! irradiance and temperature for weather).
//!
//! Sources may be sampled at any uniform step. They are resampled to the
//! scenario interval by averaging over each target interval, treating every
//! source sample as constant over its step, so energy is preserved exactly.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("row {row}: {reason}")]
    Malformed { row: u64, reason: String },
    #[error("row {row}: negative demand {value} kW in column {column}")]
    NegativeDemand {
        row: u64,
        column: String,
        value: f64,
    },
    #[error("profiles cover minutes [{start}, {end}) but the scenario needs [0, {needed})")]
    CoverageGap { start: i64, end: i64, needed: i64 },
    #[error("no column named {0}")]
    MissingColumn(String),
}

/// One series at the scenario interval, starting at minute 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub name: String,
    pub interval_minutes: u32,
    /// Average over each interval (kW for loads).
    pub samples: Vec<f64>,
}

impl LoadProfile {
    pub fn flat(
        name: impl Into<String>,
        value: f64,
        interval_minutes: u32,
        len: usize,
    ) -> LoadProfile {
        LoadProfile {
            name: name.into(),
            interval_minutes,
            samples: vec![value; len],
        }
    }

    /// `(start minute, value)` pairs.
    pub fn timestamps(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        let step = i64::from(self.interval_minutes);
        self.samples
            .iter()
            .enumerate()
            .map(move |(i, v)| (i as i64 * step, *v))
    }

    /// Integral over the profile in value-hours (kWh for loads).
    pub fn energy(&self) -> f64 {
        self.samples.iter().sum::<f64>() * f64::from(self.interval_minutes) / 60.0
    }
}

/// Raw table read from a CSV before resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTable {
    pub start: i64,
    pub step: i64,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl SourceTable {
    pub fn end(&self) -> i64 {
        let n = self.columns.first().map_or(0, |(_, v)| v.len());
        self.start + self.step * n as i64
    }
}

/// Reads a table. Values must be non-negative when `demand` is set.
pub fn read_table<R: Read>(reader: R, demand: bool) -> Result<SourceTable, ProfileError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    let names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut minutes: Vec<i64> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line());
            malformed(row, e.to_string())
        })?;
        let row = record.position().map_or(0, |p| p.line());
        if record.len() != names.len() + 1 {
            return Err(malformed(
                row,
                format!(
                    "expected {} fields, found {}",
                    names.len() + 1,
                    record.len()
                ),
            ));
        }
        let minute: i64 = record[0]
            .parse()
            .map_err(|_| malformed(row, format!("bad minute {:?}", &record[0])))?;
        if let Some(&prev) = minutes.last() {
            if minute <= prev {
                return Err(malformed(row, "minutes must increase".into()));
            }
        }
        minutes.push(minute);
        for (i, field) in record.iter().skip(1).enumerate() {
            let value: f64 = field
                .parse()
                .map_err(|_| malformed(row, format!("bad number {field:?}")))?;
            if !value.is_finite() {
                return Err(malformed(row, format!("bad number {field:?}")));
            }
            if demand && value < 0.0 {
                return Err(ProfileError::NegativeDemand {
                    row,
                    column: names[i].clone(),
                    value,
                });
            }
            columns[i].push(value);
        }
    }
    let (start, step) = match minutes.as_slice() {
        [] => (0, 0),
        [only] => (*only, 0),
        [first, second, ..] => (*first, second - first),
    };
    if minutes.len() == 1 {
        return Err(malformed(
            2,
            "cannot infer the sample step from one row".into(),
        ));
    }
    for (i, pair) in minutes.windows(2).enumerate() {
        if pair[1] - pair[0] != step {
            // Header is line 1, first data row line 2.
            return Err(malformed(
                i as u64 + 3,
                format!("non-uniform step {} (expected {step})", pair[1] - pair[0]),
            ));
        }
    }
    Ok(SourceTable {
        start,
        step,
        columns: names.into_iter().zip(columns).collect(),
    })
}

fn malformed(row: u64, reason: String) -> ProfileError {
    ProfileError::Malformed { row, reason }
}

/// Averages `table` over consecutive `interval_minutes` windows covering
/// `[0, horizon_minutes)`.
pub fn resample(
    table: &SourceTable,
    interval_minutes: u32,
    horizon_minutes: i64,
) -> Result<Vec<LoadProfile>, ProfileError> {
    let gap = ProfileError::CoverageGap {
        start: table.start,
        end: table.end(),
        needed: horizon_minutes,
    };
    if table.step <= 0
        || table.columns.is_empty()
        || table.start > 0
        || table.end() < horizon_minutes
    {
        return Err(gap);
    }
    let target = i64::from(interval_minutes);
    let n = usize::try_from(horizon_minutes / target).unwrap_or(0);
    let profiles = table
        .columns
        .iter()
        .map(|(name, values)| {
            let samples = (0..n)
                .map(|j| {
                    let lo = j as i64 * target;
                    let hi = lo + target;
                    let first = ((lo - table.start) / table.step) as usize;
                    let mut acc = 0.0;
                    let mut k = first;
                    while k < values.len() {
                        let s_lo = table.start + k as i64 * table.step;
                        let s_hi = s_lo + table.step;
                        if s_lo >= hi {
                            break;
                        }
                        let overlap = (s_hi.min(hi) - s_lo.max(lo)) as f64;
                        acc += values[k] * overlap;
                        k += 1;
                    }
                    acc / target as f64
                })
                .collect();
            LoadProfile {
                name: name.clone(),
                interval_minutes,
                samples,
            }
        })
        .collect();
    Ok(profiles)
}

/// Reads and resamples a load-profile file.
pub fn load_profiles(
    path: impl AsRef<Path>,
    interval_minutes: u32,
    horizon_minutes: i64,
) -> Result<Vec<LoadProfile>, ProfileError> {
    let table = read_table(open(path.as_ref())?, true)?;
    resample(&table, interval_minutes, horizon_minutes)
}

/// Weather at the scenario interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherProfile {
    /// kW/m²
    pub irradiance: Vec<f64>,
    /// °C
    pub temperature: Vec<f64>,
}

impl WeatherProfile {
    pub fn constant(irradiance: f64, temperature: f64, len: usize) -> WeatherProfile {
        WeatherProfile {
            irradiance: vec![irradiance; len],
            temperature: vec![temperature; len],
        }
    }

    pub fn len(&self) -> usize {
        self.irradiance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.irradiance.is_empty()
    }
}

/// Reads a weather file with `irradiance` and `temperature` columns.
pub fn load_weather(
    path: impl AsRef<Path>,
    interval_minutes: u32,
    horizon_minutes: i64,
) -> Result<WeatherProfile, ProfileError> {
    let table = read_table(open(path.as_ref())?, false)?;
    let mut series = resample(&table, interval_minutes, horizon_minutes)?;
    let mut take = |name: &str| {
        let i = series
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| ProfileError::MissingColumn(name.into()))?;
        Ok::<_, ProfileError>(series.swap_remove(i).samples)
    };
    let irradiance = take("irradiance")?;
    let temperature = take("temperature")?;
    if let Some(bad) = irradiance.iter().find(|v| **v < 0.0) {
        return Err(malformed(0, format!("negative irradiance {bad}")));
    }
    Ok(WeatherProfile {
        irradiance,
        temperature,
    })
}

fn open(path: &Path) -> Result<File, ProfileError> {
    File::open(path).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes series sampled every `step_minutes` as a CSV table.
pub fn write_table<W: std::io::Write>(
    writer: W,
    step_minutes: u32,
    columns: &[(&str, &[f64])],
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["minute".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    let len = columns.first().map_or(0, |(_, v)| v.len());
    for i in 0..len {
        let mut row = vec![(i as u64 * u64::from(step_minutes)).to_string()];
        row.extend(columns.iter().map(|(_, v)| format!("{:.4}", v[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(csv: &str) -> Result<SourceTable, ProfileError> {
        read_table(csv.as_bytes(), true)
    }

    #[test]
    fn empty_file_is_a_coverage_gap() {
        let t = table("").unwrap();
        assert!(matches!(
            resample(&t, 15, 60),
            Err(ProfileError::CoverageGap { .. })
        ));
        let t = table("minute,h1\n").unwrap();
        assert!(matches!(
            resample(&t, 15, 60),
            Err(ProfileError::CoverageGap { .. })
        ));
    }

    #[test]
    fn negative_demand_reports_row() {
        let err = table("minute,h1\n0,1.0\n1,-1\n2,0.5\n").unwrap_err();
        match err {
            ProfileError::NegativeDemand { row, column, value } => {
                assert_eq!(row, 3);
                assert_eq!(column, "h1");
                assert_eq!(value, -1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(matches!(
            table("minute,h1\n0,abc\n"),
            Err(ProfileError::Malformed { row: 2, .. })
        ));
        assert!(matches!(
            table("minute,h1\n0,1\n5,1\n7,1\n"),
            Err(ProfileError::Malformed { row: 4, .. })
        ));
        assert!(matches!(
            table("minute,h1\n0,1\n0,1\n"),
            Err(ProfileError::Malformed { .. })
        ));
    }

    #[test]
    fn short_file_is_a_gap() {
        let t = table("minute,h1\n0,1\n15,1\n").unwrap();
        assert!(matches!(
            resample(&t, 15, 60),
            Err(ProfileError::CoverageGap { end: 30, .. })
        ));
    }

    #[test]
    fn one_minute_to_five_minute() {
        let mut csv = String::from("minute,h1\n");
        for m in 0..60 {
            csv.push_str(&format!("{m},{}\n", (m % 7) as f64 * 0.3));
        }
        let t = table(&csv).unwrap();
        let p = &resample(&t, 5, 60).unwrap()[0];
        assert_eq!(p.samples.len(), 12);
        let source: f64 = t.columns[0].1.iter().sum::<f64>() / 60.0;
        assert!((p.energy() - source).abs() <= 1e-3 * source);
    }

    #[test]
    fn coarse_source_is_held() {
        let t = table("minute,h1\n0,2\n60,4\n").unwrap();
        let p = &resample(&t, 15, 120).unwrap()[0];
        assert_eq!(p.samples, vec![2.0, 2.0, 2.0, 2.0, 4.0, 4.0, 4.0, 4.0]);
    }

    proptest! {
        #[test]
        fn resampling_conserves_energy(
            values in proptest::collection::vec(0.0f64..10.0, 60..240),
            step in prop_oneof![Just(1i64), Just(3), Just(5)],
            target in prop_oneof![Just(5u32), Just(15), Just(60)],
        ) {
            let horizon = (values.len() as i64 * step) / i64::from(target) * i64::from(target);
            prop_assume!(horizon > 0);
            let t = SourceTable { start: 0, step, columns: vec![("x".into(), values.clone())] };
            let p = &resample(&t, target, horizon).unwrap()[0];
            let covered = (horizon / step) as usize;
            let partial = horizon % step;
            let mut source: f64 = values[..covered].iter().sum::<f64>() * step as f64;
            if partial > 0 {
                source += values[covered] * partial as f64;
            }
            let resampled: f64 = p.samples.iter().sum::<f64>() * f64::from(target);
            prop_assert!((source - resampled).abs() <= 1e-9 * source.max(1.0));
        }
    }
}
