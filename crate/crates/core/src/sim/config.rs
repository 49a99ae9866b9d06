//! Scenario files (TOML). Paths inside a scenario resolve relative to the
//! scenario file.
//!
//! ```toml
//! name = "example"
//! interval_minutes = 15
//! horizon_hours = 168
//! seed = 7
//! load_profiles = "loads.csv"   # columns: minute,<profile>...
//! weather = "weather.csv"       # columns: minute,irradiance,temperature
//!
//! [[homes]]
//! id = "h1"
//! profile = "h1"
//!
//! [[homes.devices]]
//! id = "bess"
//! kind = "bess"
//! strategy = "helpful"          # selfish | helpful | alternate
//! initial_soc = 6.0
//! params = { p_min = -5.0, p_max = 5.0, soc_min = 1.0, soc_max = 13.5, eta = 0.95 }
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::profiles::{load_profiles, load_weather, LoadProfile, ProfileError, WeatherProfile};
use crate::bidding::{Strategy, TouError, TouSchedule};
use crate::der::{BessParams, DerError, EvParams, PvParams, StParams};
use crate::ids::{DeviceId, HomeId};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("device {home}/{device}: {source}")]
    Device {
        home: HomeId,
        device: DeviceId,
        source: DerError,
    },
    #[error(transparent)]
    Tou(#[from] TouError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Control policy of a home battery. `Alternate` charges at full power on
/// even intervals and idles on odd ones, as in a scripted field test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BessMode {
    Selfish,
    Helpful,
    Alternate,
}

impl From<Strategy> for BessMode {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Selfish => BessMode::Selfish,
            Strategy::Helpful => BessMode::Helpful,
        }
    }
}

/// Daily plug-in window of an EV. Hours of day; the EV is home from
/// `arrive` until `depart` the next morning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvSchedule {
    pub arrive: f64,
    pub depart: f64,
    /// SoC on every arrival, kWh.
    pub soc_arrival: f64,
    /// SoC of an EV already plugged in when the run starts; defaults to
    /// `soc_arrival`.
    #[serde(default)]
    pub soc_initial: Option<f64>,
}

impl EvSchedule {
    /// Arrival and departure (hours since start) of the session covering
    /// `now`, or `None` when the EV is away.
    pub fn session_at(&self, now: f64) -> Option<(f64, f64)> {
        let day = (now / 24.0).floor();
        let hour = now - day * 24.0;
        if hour < self.arrive - 1e-9 && hour >= self.depart - 1e-9 {
            return None;
        }
        let t_arr = if hour < self.depart {
            (day - 1.0) * 24.0 + self.arrive
        } else {
            day * 24.0 + self.arrive
        };
        Some((t_arr, t_arr - self.arrive + 24.0 + self.depart))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviceConfig {
    Bess {
        id: DeviceId,
        strategy: BessMode,
        params: BessParams,
        initial_soc: f64,
    },
    Ev {
        id: DeviceId,
        strategy: Strategy,
        battery: BessParams,
        /// Required SoC at each departure, kWh.
        soc_req: f64,
        schedule: EvSchedule,
    },
    Pv {
        id: DeviceId,
        params: PvParams,
    },
    Thermostat {
        id: DeviceId,
        strategy: Strategy,
        params: StParams,
        initial_temperature: f64,
    },
}

impl DeviceConfig {
    pub fn id(&self) -> &DeviceId {
        match self {
            DeviceConfig::Bess { id, .. }
            | DeviceConfig::Ev { id, .. }
            | DeviceConfig::Pv { id, .. }
            | DeviceConfig::Thermostat { id, .. } => id,
        }
    }

    /// The EV's model parameters for a session starting at `t_arr`.
    pub fn ev_session(battery: &BessParams, soc_req: f64, t_arr: f64, t_dep: f64) -> EvParams {
        EvParams {
            battery: *battery,
            soc_req,
            t_arr,
            t_dep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomeConfig {
    pub id: HomeId,
    /// Column of the load-profile file.
    pub profile: String,
    #[serde(default)]
    pub devices: Vec<DeviceConfig>,
}

fn default_floor() -> f64 {
    0.0
}

fn default_cap() -> f64 {
    1.0
}

fn default_night() -> (f64, f64) {
    (22.0, 6.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub interval_minutes: u32,
    pub horizon_hours: f64,
    #[serde(default)]
    pub seed: u64,
    pub load_profiles: PathBuf,
    pub weather: PathBuf,
    #[serde(default)]
    pub tou: TouSchedule,
    /// Price at which PV surplus is offered, $/kWh.
    #[serde(default = "default_floor")]
    pub floor_price: f64,
    /// Highest admissible bid price, $/kWh.
    #[serde(default = "default_cap")]
    pub price_cap: f64,
    /// Night window (hours of day) for the secondary peak.
    #[serde(default = "default_night")]
    pub night_window: (f64, f64),
    pub homes: Vec<HomeConfig>,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<ScenarioConfig, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn interval_hours(&self) -> f64 {
        f64::from(self.interval_minutes) / 60.0
    }

    pub fn horizon_minutes(&self) -> i64 {
        (self.horizon_hours * 60.0).round() as i64
    }

    pub fn intervals(&self) -> usize {
        (self.horizon_minutes() / i64::from(self.interval_minutes.max(1))) as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.interval_minutes == 0 {
            return invalid("interval must be positive".into());
        }
        let horizon = self.horizon_hours * 60.0;
        if !(horizon >= 0.0) || (horizon - horizon.round()).abs() > 1e-9 {
            return invalid(format!(
                "horizon {} h is not a whole number of minutes",
                self.horizon_hours
            ));
        }
        if self.horizon_minutes() % i64::from(self.interval_minutes) != 0 {
            return invalid(format!(
                "interval of {} min does not divide the {} h horizon",
                self.interval_minutes, self.horizon_hours
            ));
        }
        if !(self.floor_price >= 0.0) || !(self.price_cap > self.floor_price) {
            return invalid("need 0 <= floor_price < price_cap".into());
        }
        self.tou.validate()?;
        if let Some(w) = self.tou.windows.iter().find(|w| w.price > self.price_cap) {
            return invalid(format!("TOU price {} exceeds the price cap", w.price));
        }
        let mut homes = BTreeSet::new();
        for home in &self.homes {
            if !homes.insert(&home.id) {
                return invalid(format!("duplicate home {}", home.id));
            }
            if home.id.as_str() == super::OPERATOR {
                return invalid(format!("home id {} is reserved", home.id));
            }
            let mut ids = BTreeSet::new();
            for d in &home.devices {
                if !ids.insert(d.id()) || d.id().as_str() == super::LOAD_DEVICE {
                    return invalid(format!("duplicate device {}/{}", home.id, d.id()));
                }
                let err = |source| ConfigError::Device {
                    home: home.id.clone(),
                    device: d.id().clone(),
                    source,
                };
                match d {
                    DeviceConfig::Bess {
                        params,
                        initial_soc,
                        ..
                    } => {
                        params.validate().map_err(err)?;
                        if !params.contains_soc(*initial_soc) {
                            return Err(err(DerError::InvalidParams("initial SoC outside bounds")));
                        }
                    }
                    DeviceConfig::Ev {
                        battery,
                        soc_req,
                        schedule,
                        ..
                    } => {
                        let p = DeviceConfig::ev_session(
                            battery,
                            *soc_req,
                            schedule.arrive,
                            schedule.depart + 24.0,
                        );
                        p.validate().map_err(err)?;
                        if battery.p_min != 0.0 {
                            return Err(err(DerError::InvalidParams("EV cannot discharge")));
                        }
                        if !battery.contains_soc(schedule.soc_arrival)
                            || !schedule.soc_initial.is_none_or(|s| battery.contains_soc(s))
                        {
                            return Err(err(DerError::InvalidParams("arrival SoC outside bounds")));
                        }
                        let day = |h: f64| (0.0..24.0).contains(&h);
                        if !day(schedule.arrive)
                            || !day(schedule.depart)
                            || schedule.depart >= schedule.arrive
                        {
                            return Err(err(DerError::InvalidParams(
                                "EV must arrive in the evening and leave next morning",
                            )));
                        }
                        let aligned = |h: f64| {
                            let m = h * 60.0;
                            (m - m.round()).abs() < 1e-9
                                && (m.round() as i64) % i64::from(self.interval_minutes) == 0
                        };
                        if !aligned(schedule.arrive) || !aligned(schedule.depart) {
                            return Err(err(DerError::InvalidParams(
                                "EV times must fall on interval boundaries",
                            )));
                        }
                    }
                    DeviceConfig::Pv { params, .. } => params.validate().map_err(err)?,
                    DeviceConfig::Thermostat { params, .. } => params.validate().map_err(err)?,
                }
            }
        }
        Ok(())
    }

    /// Reads a scenario file together with its profiles.
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config = ScenarioConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Scenario::from_files(config, base)
    }
}

/// A validated scenario with its profiles resampled to the interval.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// One profile per home, in `config.homes` order.
    pub loads: Vec<LoadProfile>,
    pub weather: WeatherProfile,
}

impl Scenario {
    pub fn from_files(config: ScenarioConfig, base: &Path) -> Result<Scenario, ConfigError> {
        config.validate()?;
        let horizon = config.horizon_minutes();
        let interval = config.interval_minutes;
        let weather = load_weather(base.join(&config.weather), interval, horizon)?;
        let needs_loads = !config.homes.is_empty();
        let all = if needs_loads {
            load_profiles(base.join(&config.load_profiles), interval, horizon)?
        } else {
            Vec::new()
        };
        let mut loads = Vec::with_capacity(config.homes.len());
        for home in &config.homes {
            let p = all
                .iter()
                .find(|p| p.name == home.profile)
                .ok_or_else(|| ProfileError::MissingColumn(home.profile.clone()))?;
            loads.push(p.clone());
        }
        Scenario::new(config, loads, weather)
    }

    /// Builds a scenario from in-memory profiles.
    pub fn new(
        config: ScenarioConfig,
        loads: Vec<LoadProfile>,
        weather: WeatherProfile,
    ) -> Result<Scenario, ConfigError> {
        config.validate()?;
        let n = config.intervals();
        if loads.len() != config.homes.len() {
            return Err(ConfigError::Invalid(
                "one load profile per home required".into(),
            ));
        }
        let short = |have: usize| {
            ConfigError::Profile(ProfileError::CoverageGap {
                start: 0,
                end: have as i64 * i64::from(config.interval_minutes),
                needed: config.horizon_minutes(),
            })
        };
        for p in &loads {
            if p.interval_minutes != config.interval_minutes {
                return Err(ConfigError::Invalid(format!(
                    "profile {} is not at the scenario interval",
                    p.name
                )));
            }
            if p.samples.len() < n {
                return Err(short(p.samples.len()));
            }
            if p.samples.iter().any(|v| !(*v >= 0.0)) {
                return Err(ConfigError::Invalid(format!(
                    "profile {} has negative demand",
                    p.name
                )));
            }
        }
        if weather.irradiance.len() < n || weather.temperature.len() < n {
            return Err(short(weather.len()));
        }
        Ok(Scenario {
            config,
            loads,
            weather,
        })
    }

    /// Same scenario with the first `k` battery homes (by home id) helpful
    /// and the rest selfish.
    pub fn with_helpful_bess(&self, k: usize) -> Scenario {
        let mut ordered: Vec<&HomeId> = self
            .config
            .homes
            .iter()
            .filter(|h| {
                h.devices
                    .iter()
                    .any(|d| matches!(d, DeviceConfig::Bess { .. }))
            })
            .map(|h| &h.id)
            .collect();
        ordered.sort();
        let helpful: BTreeSet<HomeId> = ordered.into_iter().take(k).cloned().collect();
        let mut s = self.clone();
        for home in &mut s.config.homes {
            let h = helpful.contains(&home.id);
            for d in &mut home.devices {
                if let DeviceConfig::Bess { strategy, .. } = d {
                    *strategy = if h {
                        BessMode::Helpful
                    } else {
                        BessMode::Selfish
                    };
                }
            }
        }
        s
    }

    /// Same scenario with `helpful` EVs (first by home id) helpful and the
    /// rest selfish.
    pub fn with_helpful_evs(&self, helpful: usize) -> Scenario {
        let mut ordered: Vec<HomeId> = self
            .config
            .homes
            .iter()
            .filter(|h| {
                h.devices
                    .iter()
                    .any(|d| matches!(d, DeviceConfig::Ev { .. }))
            })
            .map(|h| h.id.clone())
            .collect();
        ordered.sort();
        let chosen: BTreeSet<HomeId> = ordered.into_iter().take(helpful).collect();
        let mut s = self.clone();
        for home in &mut s.config.homes {
            let h = chosen.contains(&home.id);
            for d in &mut home.devices {
                if let DeviceConfig::Ev { strategy, .. } = d {
                    *strategy = if h {
                        Strategy::Helpful
                    } else {
                        Strategy::Selfish
                    };
                }
            }
        }
        s
    }

    pub fn count_devices(&self, pred: impl Fn(&DeviceConfig) -> bool) -> usize {
        self.config
            .homes
            .iter()
            .flat_map(|h| &h.devices)
            .filter(|d| pred(d))
            .count()
    }
}
