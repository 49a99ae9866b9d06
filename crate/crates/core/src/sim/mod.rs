//! Community simulator: runs scenarios over the ledger and auction and
//! reports peak demand, cost and EV outcomes.

pub mod config;
pub mod metrics;
pub mod profiles;
pub mod run;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use config::{
    BessMode, ConfigError, DeviceConfig, EvSchedule, HomeConfig, Scenario, ScenarioConfig,
};
pub use metrics::{EvDeparture, IntervalSample, ScenarioMetrics};
pub use profiles::{load_profiles, LoadProfile, ProfileError, WeatherProfile};
pub use run::{channel_config, run_scenario, SimError, Simulation};

/// Peer id of the market operator in simulated channels.
pub const OPERATOR: &str = "operator";
/// Device id of each home's inflexible load.
pub const LOAD_DEVICE: &str = "load";
/// Device id of the operator's meter at the point of common coupling.
pub const PCC_DEVICE: &str = "pcc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub helpful: usize,
    pub peak_kw: f64,
    pub weekly_cost: f64,
    pub ev_violations: usize,
}

fn bess_homes(scenario: &Scenario) -> usize {
    scenario
        .config
        .homes
        .iter()
        .filter(|h| {
            h.devices
                .iter()
                .any(|d| matches!(d, DeviceConfig::Bess { .. }))
        })
        .count()
}

/// Runs the scenario with `k` helpful batteries (the first `k` battery homes
/// by id) and the rest selfish.
pub fn sweep_point(
    scenario: &Scenario,
    k: usize,
) -> Result<(SweepPoint, ScenarioMetrics), SimError> {
    let n = bess_homes(scenario);
    if k > n {
        return Err(ConfigError::Invalid(format!(
            "{k} helpful batteries requested but only {n} homes have one"
        ))
        .into());
    }
    let m = run_scenario(&scenario.with_helpful_bess(k))?;
    Ok((
        SweepPoint {
            helpful: k,
            peak_kw: m.peak_kw,
            weekly_cost: m.weekly_cost(),
            ev_violations: m.ev_violations(),
        },
        m,
    ))
}

/// Peak and cost for k = 0..=N helpful batteries. Points run in parallel.
pub fn sweep_helpful_bess(scenario: &Scenario) -> Result<Vec<SweepPoint>, SimError> {
    let n = bess_homes(scenario);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..=n)
            .map(|k| s.spawn(move || sweep_point(scenario, k).map(|(p, _)| p)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rebound {
    pub primary_peak_kw: f64,
    pub secondary_peak_kw: f64,
}

/// Primary and night-window peaks with `helpful` helpful and `selfish`
/// selfish EVs. The counts must cover every EV in the scenario.
pub fn rebound_analysis(
    scenario: &Scenario,
    helpful: usize,
    selfish: usize,
) -> Result<Rebound, SimError> {
    let evs = scenario.count_devices(|d| matches!(d, DeviceConfig::Ev { .. }));
    if helpful + selfish != evs {
        return Err(ConfigError::Invalid(format!(
            "EV mix {helpful}+{selfish} does not match {evs} EVs"
        ))
        .into());
    }
    let m = run_scenario(&scenario.with_helpful_evs(helpful))?;
    Ok(Rebound {
        primary_peak_kw: m.peak_kw,
        secondary_peak_kw: m.secondary_peak_kw,
    })
}

/// Runs a field-test style scenario; the PCC series is in the metrics.
pub fn emulate_field_test(scenario: &Scenario) -> Result<ScenarioMetrics, SimError> {
    run_scenario(scenario)
}

/// Differences between consecutive PCC samples, kW.
pub fn pcc_steps(metrics: &ScenarioMetrics) -> Vec<f64> {
    metrics
        .series
        .windows(2)
        .map(|w| w[1].pcc_kw - w[0].pcc_kw)
        .collect()
}
