use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ids::{DeviceId, HomeId};
use crate::ledger::Digest;
use crate::units::Money;

/// Community totals for one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSample {
    pub interval: u64,
    pub start_minute: i64,
    /// Grid import of the community, kW.
    pub net_demand_kw: f64,
    /// Power at the point of common coupling as metered, kW.
    pub pcc_kw: f64,
    /// Clearing price, $/kWh; `None` when nothing traded.
    pub mcp: Option<f64>,
    pub cleared_kwh: f64,
    pub curtailed_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvDeparture {
    pub home: HomeId,
    pub device: DeviceId,
    /// Hours since scenario start.
    pub time: f64,
    pub soc: f64,
    pub required: f64,
    pub met: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario: String,
    pub interval_minutes: u32,
    pub peak_kw: f64,
    /// Largest net demand inside the night window.
    pub secondary_peak_kw: f64,
    pub community_cost: Money,
    pub home_costs: BTreeMap<HomeId, Money>,
    pub series: Vec<IntervalSample>,
    /// SoC (kWh) or indoor temperature (°C) per device at the end of each
    /// interval, keyed `home/device`.
    pub device_series: BTreeMap<String, Vec<f64>>,
    pub ev_departures: Vec<EvDeparture>,
    /// Steps at which a thermostat ended above its comfort limit.
    pub temperature_excursions: usize,
    pub clearings: usize,
    pub ledger_height: u64,
    pub ledger_tip: Digest,
    pub state_digest: Digest,
}

impl ScenarioMetrics {
    pub fn empty(scenario: &str, interval_minutes: u32) -> ScenarioMetrics {
        ScenarioMetrics {
            scenario: scenario.to_owned(),
            interval_minutes,
            peak_kw: 0.0,
            secondary_peak_kw: 0.0,
            community_cost: Money(0),
            home_costs: BTreeMap::new(),
            series: Vec::new(),
            device_series: BTreeMap::new(),
            ev_departures: Vec::new(),
            temperature_excursions: 0,
            clearings: 0,
            ledger_height: 0,
            ledger_tip: Digest::ZERO,
            state_digest: Digest::ZERO,
        }
    }

    pub fn weekly_cost(&self) -> f64 {
        self.community_cost.dollars()
    }

    pub fn ev_violations(&self) -> usize {
        self.ev_departures.iter().filter(|d| !d.met).count()
    }

    /// Summary without the time series.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "scenario": self.scenario,
            "peak_kw": self.peak_kw,
            "secondary_peak_kw": self.secondary_peak_kw,
            "weekly_cost": self.weekly_cost(),
            "home_costs": self.home_costs.iter().map(|(h, m)| (h.to_string(), m.dollars())).collect::<BTreeMap<_, _>>(),
            "ev_departures": self.ev_departures.len(),
            "ev_violations": self.ev_violations(),
            "temperature_excursions": self.temperature_excursions,
            "clearings": self.clearings,
            "ledger_height": self.ledger_height,
            "ledger_tip": self.ledger_tip.to_hex(),
            "state_digest": self.state_digest.to_hex(),
        })
    }

    /// Writes `summary.json`, `community.csv` and `devices.csv` to `dir`.
    pub fn export(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let summary = serde_json::to_vec_pretty(&self.summary()).map_err(io::Error::other)?;
        fs::write(dir.join("summary.json"), summary)?;

        let mut w = csv::Writer::from_path(dir.join("community.csv"))?;
        w.write_record([
            "interval",
            "start_minute",
            "net_demand_kw",
            "pcc_kw",
            "mcp",
            "cleared_kwh",
            "curtailed_kwh",
        ])?;
        for s in &self.series {
            w.write_record([
                s.interval.to_string(),
                s.start_minute.to_string(),
                format!("{:.3}", s.net_demand_kw),
                format!("{:.3}", s.pcc_kw),
                s.mcp.map(|p| format!("{p:.3}")).unwrap_or_default(),
                format!("{:.3}", s.cleared_kwh),
                format!("{:.3}", s.curtailed_kwh),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("devices.csv"))?;
        let names: Vec<&String> = self.device_series.keys().collect();
        let mut header = vec!["interval".to_string()];
        header.extend(names.iter().map(|n| n.to_string()));
        w.write_record(&header)?;
        for (i, s) in self.series.iter().enumerate() {
            let mut row = vec![s.interval.to_string()];
            row.extend(
                names
                    .iter()
                    .map(|n| format!("{:.4}", self.device_series[*n][i])),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
