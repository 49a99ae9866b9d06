//! The scenario loop. Each interval commits three blocks: the opening with
//! device measurements, the bids, and the close that clears the market.
//! Awards are then applied to the device models.
//!
//! Energy not bought in the local market is served by the grid at the retail
//! price, but only for bids whose limit is at least that price; PV surplus
//! nobody buys is curtailed, and a battery sells only what it was awarded.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use super::config::{BessMode, ConfigError, DeviceConfig, EvSchedule, Scenario};
use super::metrics::{EvDeparture, IntervalSample, ScenarioMetrics};
use super::{LOAD_DEVICE, OPERATOR, PCC_DEVICE};
use crate::auction::ClearingResult;
use crate::bidding::{
    bess_bids, ev_bid_curve, load_bid, pv_offer, st_bid_curve, BidCurve, BidTarget, LocalContext,
    Side, Strategy, TouError,
};
use crate::der::{
    bess_feasible_range, bess_step, pv_power, st_step_duty, BessParams, DerError, EvParams,
    PvParams, StParams, WeatherSample,
};
use crate::ids::{DeviceId, HomeId, PeerId};
use crate::ledger::{
    Channel, ChannelConfig, ChannelError, DeviceKind, Measurement, OpenInterval, Payload, Reading,
};
use crate::units::{Energy, Money, Power, Price};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("ledger: {0}")]
    Ledger(#[from] ChannelError),
    #[error("device {home}/{device}: {source}")]
    Device {
        home: HomeId,
        device: DeviceId,
        source: DerError,
    },
    #[error(transparent)]
    Tou(#[from] TouError),
    #[error("interval {0} has no clearing result on the ledger")]
    MissingResult(u64),
    #[error("energy balance off by {0} Wh in interval {1}")]
    Conservation(i64, u64),
    #[error("stored chain at height {0} is not a prefix of this scenario's run")]
    Resume(u64),
}

enum DeviceState {
    Bess {
        id: DeviceId,
        mode: BessMode,
        params: BessParams,
        soc: f64,
    },
    Ev {
        id: DeviceId,
        strategy: Strategy,
        battery: BessParams,
        soc_req: f64,
        schedule: EvSchedule,
        soc: f64,
        session: Option<EvParams>,
    },
    Pv {
        id: DeviceId,
        params: PvParams,
    },
    Thermostat {
        id: DeviceId,
        strategy: Strategy,
        params: StParams,
        temperature: f64,
    },
}

impl DeviceState {
    fn from_config(d: &DeviceConfig) -> DeviceState {
        match d {
            DeviceConfig::Bess {
                id,
                strategy,
                params,
                initial_soc,
            } => DeviceState::Bess {
                id: id.clone(),
                mode: *strategy,
                params: *params,
                soc: *initial_soc,
            },
            DeviceConfig::Ev {
                id,
                strategy,
                battery,
                soc_req,
                schedule,
            } => DeviceState::Ev {
                id: id.clone(),
                strategy: *strategy,
                battery: *battery,
                soc_req: *soc_req,
                schedule: *schedule,
                soc: schedule.soc_arrival,
                session: None,
            },
            DeviceConfig::Pv { id, params } => DeviceState::Pv {
                id: id.clone(),
                params: *params,
            },
            DeviceConfig::Thermostat {
                id,
                strategy,
                params,
                initial_temperature,
            } => DeviceState::Thermostat {
                id: id.clone(),
                strategy: *strategy,
                params: *params,
                temperature: *initial_temperature,
            },
        }
    }

    fn id(&self) -> &DeviceId {
        match self {
            DeviceState::Bess { id, .. }
            | DeviceState::Ev { id, .. }
            | DeviceState::Pv { id, .. }
            | DeviceState::Thermostat { id, .. } => id,
        }
    }

    /// Value recorded in the device series.
    fn level(&self) -> Option<f64> {
        match self {
            DeviceState::Bess { soc, .. } | DeviceState::Ev { soc, .. } => Some(*soc),
            DeviceState::Thermostat { temperature, .. } => Some(*temperature),
            DeviceState::Pv { .. } => None,
        }
    }
}

struct Home {
    id: HomeId,
    devices: Vec<DeviceState>,
}

/// Registers every home, device and the operator's PCC meter.
pub fn channel_config(scenario: &Scenario) -> ChannelConfig {
    let cfg = &scenario.config;
    let homes: Vec<HomeId> = cfg.homes.iter().map(|h| h.id.clone()).collect();
    let mut channel = ChannelConfig::new(cfg.name.as_str(), OPERATOR, &homes);
    channel.price_cap = Price::from_dollars(cfg.price_cap);
    channel.register(OPERATOR, PCC_DEVICE, DeviceKind::Meter);
    for home in &cfg.homes {
        channel.register(home.id.clone(), LOAD_DEVICE, DeviceKind::Load);
        for d in &home.devices {
            let kind = match d {
                DeviceConfig::Bess { params, .. } => DeviceKind::Bess { params: *params },
                DeviceConfig::Ev { battery, .. } => DeviceKind::Ev { battery: *battery },
                DeviceConfig::Pv { params, .. } => DeviceKind::Pv { params: *params },
                DeviceConfig::Thermostat { params, .. } => {
                    DeviceKind::Thermostat { params: *params }
                }
            };
            channel.register(home.id.clone(), d.id().clone(), kind);
        }
    }
    channel
}

/// Runs a scenario on a fresh in-memory ledger.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioMetrics, SimError> {
    let channel = Channel::new(channel_config(scenario))?;
    Simulation::new(Arc::new(scenario.clone()), channel)?.run()
}

/// Step-by-step driver over a caller-provided channel.
pub struct Simulation {
    scenario: Arc<Scenario>,
    channel: Channel,
    homes: Vec<Home>,
    step: usize,
    metrics: ScenarioMetrics,
    last_pcc: Option<(u64, Power)>,
    /// Called after every committed block with the channel.
    on_block: Option<BlockHook>,
}

type BlockHook = Box<dyn FnMut(&Channel) + Send>;

/// A bid submitted this interval, with what the device needs to settle it.
struct Placed {
    home: usize,
    device: Option<usize>,
    curve: BidCurve,
}

impl Simulation {
    pub fn new(scenario: Arc<Scenario>, channel: Channel) -> Result<Simulation, SimError> {
        let cfg = &scenario.config;
        let homes = cfg
            .homes
            .iter()
            .map(|h| Home {
                id: h.id.clone(),
                devices: h.devices.iter().map(DeviceState::from_config).collect(),
            })
            .collect();
        let mut metrics = ScenarioMetrics::empty(&cfg.name, cfg.interval_minutes);
        for h in &cfg.homes {
            metrics.home_costs.insert(h.id.clone(), Money(0));
        }
        Ok(Simulation {
            scenario,
            channel,
            homes,
            step: 0,
            metrics,
            last_pcc: None,
            on_block: None,
        })
    }

    /// Continues a run whose chain is already in `channel`. The scenario is
    /// replayed on a scratch ledger up to the stored height, which must end on
    /// an interval boundary with the same tip, and the stored channel then
    /// takes over.
    pub fn resume(scenario: Arc<Scenario>, channel: Channel) -> Result<Simulation, SimError> {
        let scratch = Channel::new(channel.config().clone())?;
        let mut sim = Simulation::new(scenario, scratch)?;
        while sim.channel.height() < channel.height() && !sim.done() {
            sim.step()?;
        }
        if sim.channel.height() != channel.height() || sim.channel.tip_hash() != channel.tip_hash()
        {
            return Err(SimError::Resume(channel.height()));
        }
        sim.channel = channel;
        Ok(sim)
    }

    pub fn on_block(mut self, f: impl FnMut(&Channel) + Send + 'static) -> Self {
        self.on_block = Some(Box::new(f));
        self
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    /// Metrics accumulated so far.
    pub fn metrics(&self) -> &ScenarioMetrics {
        &self.metrics
    }

    /// Intervals completed so far.
    pub fn completed(&self) -> usize {
        self.step
    }

    pub fn into_channel(self) -> Channel {
        self.channel
    }

    /// An empty community has no market to run.
    pub fn done(&self) -> bool {
        self.homes.is_empty() || self.step >= self.scenario.config.intervals()
    }

    pub fn run(mut self) -> Result<ScenarioMetrics, SimError> {
        while !self.done() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(mut self) -> ScenarioMetrics {
        self.metrics.ledger_height = self.channel.height();
        self.metrics.ledger_tip = self.channel.tip_hash();
        self.metrics.state_digest = self.channel.state().digest();
        self.metrics
    }

    fn commit(&mut self) -> Result<(), SimError> {
        if self.channel.commit_block()?.is_some() {
            if let Some(f) = &mut self.on_block {
                f(&self.channel);
            }
        }
        Ok(())
    }

    fn submit(&mut self, submitter: &HomeId, payload: Payload) -> Result<(), SimError> {
        self.channel.submit(PeerId::from(submitter), payload)?;
        Ok(())
    }

    /// Advances one market interval.
    pub fn step(&mut self) -> Result<(), SimError> {
        let scenario = Arc::clone(&self.scenario);
        let cfg = &scenario.config;
        let i = self.step;
        let interval = i as u64 + 1;
        let minutes = cfg.interval_minutes;
        let dt = cfg.interval_hours();
        let start = i as i64 * i64::from(minutes);
        let now = start as f64 / 60.0;
        let tou_price = cfg.tou.price_at(start);
        let tou_period = cfg.tou.period_at(start);
        let floor = Price::from_dollars(cfg.floor_price);
        let cap = Price::from_dollars(cfg.price_cap);
        let weather = WeatherSample {
            irradiance: self.scenario.weather.irradiance[i],
            temperature: self.scenario.weather.temperature[i],
        };
        let operator = HomeId::from(OPERATOR);

        self.plug_evs(now);

        // Opening and measurements.
        self.submit(
            &operator,
            Payload::OpenInterval(OpenInterval {
                interval,
                start_minute: start,
                length_minutes: minutes,
                grid_price: tou_price,
            }),
        )?;
        if let Some((prev, power)) = self.last_pcc.take() {
            self.submit(
                &operator,
                measurement(
                    &operator,
                    &DeviceId::from(PCC_DEVICE),
                    prev,
                    Reading::Power { power },
                ),
            )?;
        }
        let mut readings = Vec::new();
        for home in &self.homes {
            for d in &home.devices {
                let reading = match d {
                    DeviceState::Bess { soc, .. } => Reading::StateOfCharge {
                        soc: Energy::from_kwh_round(*soc),
                        plugged: true,
                    },
                    DeviceState::Ev { soc, session, .. } => Reading::StateOfCharge {
                        soc: Energy::from_kwh_round(*soc),
                        plugged: session.is_some(),
                    },
                    DeviceState::Thermostat { temperature, .. } => Reading::Temperature {
                        centi_celsius: (temperature * 100.0).round() as i64,
                    },
                    DeviceState::Pv { .. } => continue,
                };
                readings.push((
                    home.id.clone(),
                    measurement(&home.id, d.id(), interval, reading),
                ));
            }
        }
        for (home, m) in readings {
            self.submit(&home, m)?;
        }
        self.commit()?;

        // Bids.
        let mut placed: Vec<Placed> = Vec::new();
        let mut load = Vec::with_capacity(self.homes.len());
        let mut pv = Vec::with_capacity(self.homes.len());
        for (h, home) in self.homes.iter().enumerate() {
            let load_wh = Energy::from_kwh_round(self.scenario.loads[h].samples[i] * dt);
            let mut pv_wh = Energy::ZERO;
            let mut pv_device = None;
            for (d, dev) in home.devices.iter().enumerate() {
                if let DeviceState::Pv { params, .. } = dev {
                    pv_wh += Energy::from_kwh_round(pv_power(params, &weather) * dt);
                    pv_device.get_or_insert(d);
                }
            }
            load.push(load_wh);
            pv.push(pv_wh);
            let ctx =
                LocalContext::from_forecast(pv_wh, load_wh, tou_period, tou_price, floor, cap);
            let target =
                |device: &DeviceId| BidTarget::new(home.id.clone(), device.clone(), interval);
            let mut place = |device: Option<usize>, curve: BidCurve| {
                if !curve.is_empty() {
                    placed.push(Placed {
                        home: h,
                        device,
                        curve,
                    });
                }
            };
            if let Some(d) = pv_device {
                if ctx.excess_pv > Energy::ZERO {
                    place(
                        Some(d),
                        pv_offer(ctx.excess_pv, floor, &target(home.devices[d].id())),
                    );
                }
            }
            if ctx.net_load > Energy::ZERO {
                place(
                    None,
                    load_bid(
                        ctx.net_load,
                        tou_price,
                        &target(&DeviceId::from(LOAD_DEVICE)),
                    ),
                );
            }
            for (d, dev) in home.devices.iter().enumerate() {
                let device_err = |source| SimError::Device {
                    home: home.id.clone(),
                    device: dev.id().clone(),
                    source,
                };
                match dev {
                    DeviceState::Bess {
                        id,
                        mode,
                        params,
                        soc,
                    } => {
                        let curves = match mode {
                            BessMode::Selfish | BessMode::Helpful => {
                                let strategy = if *mode == BessMode::Helpful {
                                    Strategy::Helpful
                                } else {
                                    Strategy::Selfish
                                };
                                bess_bids(strategy, params, *soc, &ctx, &cfg.tou, dt, &target(id))?
                            }
                            BessMode::Alternate if i.is_multiple_of(2) => {
                                let hi = bess_feasible_range(params, *soc, dt).hi;
                                vec![BidCurve::single(
                                    Side::Buy,
                                    Energy::from_kwh_floor(hi * dt),
                                    cap,
                                    &target(id),
                                )]
                            }
                            BessMode::Alternate => Vec::new(),
                        };
                        for c in curves {
                            place(Some(d), c);
                        }
                    }
                    DeviceState::Ev {
                        id,
                        strategy,
                        soc,
                        session: Some(session),
                        ..
                    } => {
                        let curve =
                            ev_bid_curve(*strategy, session, *soc, now, dt, &ctx, &target(id))
                                .map_err(device_err)?;
                        place(Some(d), curve);
                    }
                    DeviceState::Ev { session: None, .. } | DeviceState::Pv { .. } => {}
                    DeviceState::Thermostat {
                        id,
                        strategy,
                        params,
                        temperature,
                    } => {
                        place(
                            Some(d),
                            st_bid_curve(*strategy, params, *temperature, dt, &ctx, &target(id)),
                        );
                    }
                }
            }
        }
        for p in &placed {
            let owner = self.homes[p.home].id.clone();
            self.submit(&owner, Payload::SubmitBid(p.curve.clone()))?;
        }
        self.commit()?;

        // Close and clear.
        self.submit(&operator, Payload::CloseInterval { interval })?;
        self.commit()?;
        let result = self
            .channel
            .state()
            .interval(interval)
            .and_then(|r| r.result.clone())
            .ok_or(SimError::MissingResult(interval))?;

        self.dispatch(
            i,
            interval,
            &placed,
            &result,
            &load,
            &pv,
            tou_price,
            weather.temperature,
        )?;
        self.step += 1;
        Ok(())
    }

    /// Starts and ends EV sessions at interval boundaries.
    fn plug_evs(&mut self, now: f64) {
        for home in &mut self.homes {
            for dev in &mut home.devices {
                let DeviceState::Ev {
                    id,
                    battery,
                    soc_req,
                    schedule,
                    soc,
                    session,
                    ..
                } = dev
                else {
                    continue;
                };
                match (schedule.session_at(now), session.is_some()) {
                    (Some((t_arr, t_dep)), false) => {
                        let arriving = (now - t_arr).abs() < 1e-9;
                        *soc = match schedule.soc_initial {
                            Some(initial) if !arriving && now < 1e-9 => initial,
                            _ => schedule.soc_arrival,
                        };
                        *session = Some(DeviceConfig::ev_session(battery, *soc_req, t_arr, t_dep));
                    }
                    (None, true) => {
                        let s = session.take().expect("plugged");
                        self.metrics.ev_departures.push(EvDeparture {
                            home: home.id.clone(),
                            device: id.clone(),
                            time: s.t_dep,
                            soc: *soc,
                            required: s.soc_req,
                            met: crate::der::ev_departure_ok(&s, *soc),
                        });
                    }
                    _ => {}
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn dispatch(
        &mut self,
        i: usize,
        interval: u64,
        placed: &[Placed],
        result: &ClearingResult,
        load: &[Energy],
        pv: &[Energy],
        tou_price: Price,
        outdoor: f64,
    ) -> Result<(), SimError> {
        let dt = self.scenario.config.interval_hours();
        let n = self.homes.len();
        let mut grid = vec![Energy::ZERO; n];
        let mut consumed = vec![Energy::ZERO; n];
        let mut generated = vec![Energy::ZERO; n];
        // Net device energy this interval; positive charges or consumes.
        let mut device_energy: BTreeMap<(usize, usize), Energy> = BTreeMap::new();
        let mut curtailed = Energy::ZERO;

        for h in 0..n {
            consumed[h] += load[h];
            generated[h] += pv[h].min(load[h]);
        }
        for p in placed {
            let key = p.curve.key();
            let awarded = result.awarded(&key);
            match p.curve.side {
                Side::Buy => {
                    let fallback = grid_fallback(&p.curve, awarded, tou_price);
                    grid[p.home] += fallback;
                    if let Some(d) = p.device {
                        *device_energy.entry((p.home, d)).or_default() += awarded + fallback;
                        consumed[p.home] += awarded + fallback;
                    }
                }
                Side::Sell => {
                    generated[p.home] += awarded;
                    match p.device.map(|d| &self.homes[p.home].devices[d]) {
                        Some(DeviceState::Pv { .. }) => {
                            curtailed += p.curve.total_quantity() - awarded
                        }
                        _ => {
                            let d = p.device.expect("sell bids come from devices");
                            *device_energy.entry((p.home, d)).or_default() -= awarded;
                        }
                    }
                }
            }
        }
        let total_grid: Energy = grid.iter().copied().sum();
        let balance: Energy =
            consumed.iter().copied().sum::<Energy>() - generated.iter().copied().sum::<Energy>();
        if balance != total_grid {
            return Err(SimError::Conservation(
                (balance - total_grid).wh(),
                interval,
            ));
        }

        for (h, home) in self.homes.iter_mut().enumerate() {
            for (d, dev) in home.devices.iter_mut().enumerate() {
                let e = device_energy.get(&(h, d)).copied().unwrap_or_default();
                let device = dev.id().clone();
                let err = |source| SimError::Device {
                    home: home.id.clone(),
                    device,
                    source,
                };
                match dev {
                    DeviceState::Bess { params, soc, .. } => {
                        *soc = bess_step(params, *soc, e.kwh() / dt, dt).map_err(err)?;
                    }
                    DeviceState::Ev {
                        battery,
                        soc,
                        session: Some(_),
                        ..
                    } => {
                        *soc = bess_step(battery, *soc, e.kwh() / dt, dt).map_err(err)?;
                    }
                    DeviceState::Thermostat {
                        params,
                        temperature,
                        ..
                    } => {
                        let duty = e.kwh() / (params.hvac_power * dt);
                        *temperature = st_step_duty(params, *temperature, outdoor, duty, dt);
                        if *temperature
                            > params.setpoint
                                + params.deadband
                                + crate::bidding::SELFISH_ST_CAP_DEVIATION
                                + 1e-9
                        {
                            self.metrics.temperature_excursions += 1;
                        }
                    }
                    DeviceState::Ev { session: None, .. } | DeviceState::Pv { .. } => {}
                }
            }
        }

        let settlements: BTreeMap<&HomeId, Money> = result
            .settlements
            .iter()
            .map(|s| (&s.home, s.amount))
            .collect();
        for (h, home) in self.homes.iter().enumerate() {
            let paid = settlements.get(&home.id).copied().unwrap_or_default();
            let cost = tou_price.times(grid[h]) - paid;
            *self
                .metrics
                .home_costs
                .get_mut(&home.id)
                .expect("home registered") += cost;
            self.metrics.community_cost += cost;
        }

        let kw = total_grid.kwh() / dt;
        let start = i as i64 * i64::from(self.scenario.config.interval_minutes);
        let pcc = total_grid.over_minutes(self.scenario.config.interval_minutes);
        self.last_pcc = Some((interval, pcc));
        self.metrics.peak_kw = self.metrics.peak_kw.max(kw);
        if in_window(start, self.scenario.config.night_window) {
            self.metrics.secondary_peak_kw = self.metrics.secondary_peak_kw.max(kw);
        }
        if result.mcp.is_some() {
            self.metrics.clearings += 1;
        }
        self.metrics.series.push(IntervalSample {
            interval,
            start_minute: start,
            net_demand_kw: kw,
            pcc_kw: pcc.kw(),
            mcp: result.mcp.map(Price::dollars),
            cleared_kwh: result.cleared_quantity.kwh(),
            curtailed_kwh: curtailed.kwh(),
        });
        for home in &self.homes {
            for dev in &home.devices {
                if let Some(v) = dev.level() {
                    self.metrics
                        .device_series
                        .entry(format!("{}/{}", home.id, dev.id()))
                        .or_default()
                        .push(v);
                }
            }
        }
        Ok(())
    }
}

fn measurement(home: &HomeId, device: &DeviceId, interval: u64, reading: Reading) -> Payload {
    Payload::SubmitMeasurement(Measurement {
        home: home.clone(),
        device: device.clone(),
        interval,
        reading,
    })
}

/// Unawarded energy of the steps priced at or above the retail price; the
/// grid serves it. Awards fill the highest-priced steps first.
pub fn grid_fallback(curve: &BidCurve, awarded: Energy, tou_price: Price) -> Energy {
    let willing: Energy = curve
        .steps()
        .filter(|(_, p)| *p >= tou_price)
        .map(|(q, _)| q)
        .sum();
    (willing - awarded).max(Energy::ZERO)
}

/// True when `minute` falls in the daily window `(start, end)` given in
/// hours, which may wrap past midnight.
pub fn in_window(minute: i64, (start, end): (f64, f64)) -> bool {
    let h = minute.rem_euclid(24 * 60) as f64 / 60.0;
    if start <= end {
        h >= start && h < end
    } else {
        h >= start || h < end
    }
}
