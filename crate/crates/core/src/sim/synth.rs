//! Seeded synthetic profiles for the packaged scenarios: residential loads
//! with morning and evening peaks, clear-sky irradiance with day-to-day
//! cloudiness, and a diurnal temperature cycle.

use std::f64::consts::PI;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::profiles::write_table;

/// Source resolution of generated files, minutes.
pub const STEP_MINUTES: u32 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub homes: Vec<String>,
    pub days: u32,
    pub seed: u64,
    /// Scale of each home's evening peak, kW.
    pub evening_peak: f64,
    /// Overnight base load, kW.
    pub base_load: f64,
    /// Clear-sky irradiance at solar noon, kW/m².
    pub peak_irradiance: f64,
    /// Mean and half-swing of outdoor temperature, °C.
    pub mean_temperature: f64,
    pub temperature_swing: f64,
}

impl SynthParams {
    pub fn community(homes: usize, days: u32, seed: u64) -> SynthParams {
        SynthParams {
            homes: (1..=homes).map(|i| format!("h{i}")).collect(),
            days,
            seed,
            evening_peak: 2.0,
            base_load: 0.45,
            peak_irradiance: 0.95,
            mean_temperature: 23.0,
            temperature_swing: 5.0,
        }
    }
}

fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    let d = (hour - centre) / width;
    (-0.5 * d * d).exp()
}

/// Load columns (kW) at [`STEP_MINUTES`].
pub fn loads(p: &SynthParams) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let per_day = (24 * 60 / STEP_MINUTES) as usize;
    p.homes
        .iter()
        .map(|name| {
            let shift: f64 = rng.gen_range(-0.5..0.5);
            let scale: f64 = rng.gen_range(0.85..1.15);
            let mut samples = Vec::with_capacity(per_day * p.days as usize);
            for _ in 0..p.days {
                let day_scale: f64 = rng.gen_range(0.9..1.1);
                for s in 0..per_day {
                    let hour = s as f64 * f64::from(STEP_MINUTES) / 60.0;
                    let morning = 0.9 * bump(hour, 7.5 + shift, 1.0);
                    let midday = 0.35 * bump(hour, 13.0, 3.0);
                    let evening = p.evening_peak * bump(hour, 18.75 + shift, 1.5);
                    let noise: f64 = rng.gen_range(-0.08..0.08);
                    let kw =
                        (p.base_load + scale * day_scale * (morning + midday + evening) + noise)
                            .max(0.05);
                    samples.push(kw);
                }
            }
            (name.clone(), samples)
        })
        .collect()
}

/// Irradiance (kW/m²) and temperature (°C) at [`STEP_MINUTES`].
pub fn weather(p: &SynthParams) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed);
    let per_day = (24 * 60 / STEP_MINUTES) as usize;
    let mut irradiance = Vec::with_capacity(per_day * p.days as usize);
    let mut temperature = Vec::with_capacity(per_day * p.days as usize);
    for _ in 0..p.days {
        let clearness: f64 = rng.gen_range(0.75..1.0);
        let offset: f64 = rng.gen_range(-1.5..1.5);
        for s in 0..per_day {
            let hour = s as f64 * f64::from(STEP_MINUTES) / 60.0;
            let sun = (PI * (hour - 6.0) / 12.0).sin().max(0.0);
            irradiance.push(p.peak_irradiance * clearness * sun);
            let t = p.mean_temperature
                + offset
                + p.temperature_swing * (2.0 * PI * (hour - 9.0) / 24.0).sin();
            temperature.push(t);
        }
    }
    (irradiance, temperature)
}

/// Writes `<prefix>_loads.csv` and `<prefix>_weather.csv` to `dir`.
pub fn write_files(p: &SynthParams, dir: &Path, prefix: &str) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let loads = loads(p);
    let cols: Vec<(&str, &[f64])> = loads
        .iter()
        .map(|(n, v)| (n.as_str(), v.as_slice()))
        .collect();
    let f = std::fs::File::create(dir.join(format!("{prefix}_loads.csv")))?;
    write_table(f, STEP_MINUTES, &cols).map_err(io::Error::other)?;
    let (irr, temp) = weather(p);
    let f = std::fs::File::create(dir.join(format!("{prefix}_weather.csv")))?;
    write_table(
        f,
        STEP_MINUTES,
        &[("irradiance", &irr), ("temperature", &temp)],
    )
    .map_err(io::Error::other)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_sized() {
        let p = SynthParams::community(3, 2, 9);
        let a = loads(&p);
        assert_eq!(a, loads(&p));
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].1.len(), 2 * 288);
        assert!(a.iter().all(|(_, v)| v.iter().all(|x| *x > 0.0)));
        let (irr, temp) = weather(&p);
        assert_eq!(irr.len(), 576);
        assert_eq!(irr[0], 0.0);
        assert!(irr[144] > 0.5);
        assert!(temp.iter().all(|t| (10.0..35.0).contains(t)));
    }
}
