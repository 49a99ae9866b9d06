//! Live channels behind the API. Every mutation is one transaction committed
//! in its own block; every read is derived from the ledger, so a restarted
//! service answers exactly as before.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use enertrade_core::auction::ClearingResult;
use enertrade_core::bidding::{
    bess_bids, ev_bid_curve, load_bid, pv_offer, st_bid_curve, BidCurve, BidPoint, BidTarget,
    LocalContext, Side, Strategy,
};
use enertrade_core::der::{pv_power, WeatherSample};
use enertrade_core::ids::{ChannelId, DeviceId, HomeId, IntervalId, PeerId};
use enertrade_core::ledger::{
    Block, Channel, ChannelError, Digest, IntervalRecord, Measurement, OpenInterval, Payload,
    Phase, Reading,
};
use enertrade_core::sim::{
    channel_config, BessMode, ConfigError as ScenarioError, DeviceConfig, Scenario, ScenarioConfig,
    SimError, Simulation, LOAD_DEVICE, PCC_DEVICE,
};
use enertrade_core::units::{Energy, Price};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::auth::{ApiSession, Role};
use crate::config::{Cadence, ChannelSpec};
use crate::feed::{block_events, FeedEvent};

/// Largest chain page served at once.
pub const MAX_PAGE: usize = 1000;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("from-height {from} is beyond the tip at {tip}")]
    BeyondTip { from: u64, tip: u64 },
    #[error(transparent)]
    Ledger(#[from] ChannelError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("chain failed verification: {0}")]
    Tampered(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct OpenRequest {
    /// Defaults to the end of the previous interval.
    #[serde(default)]
    pub start_minute: Option<i64>,
    /// Defaults to the scenario's interval length.
    #[serde(default)]
    pub length_minutes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenResponse {
    pub interval: IntervalId,
    pub tx: Digest,
    pub spec: OpenInterval,
    /// Unix milliseconds at which the timer closes the interval.
    pub closes_at_ms: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct BidRequest {
    pub device: DeviceId,
    pub side: Side,
    pub points: Vec<BidPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accepted {
    pub tx: Digest,
    pub height: u64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct MeasurementRequest {
    pub device: DeviceId,
    pub interval: IntervalId,
    pub reading: Reading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseResponse {
    pub interval: IntervalId,
    pub tx: Digest,
    pub result: ClearingResult,
    /// Hash of the canonical encoding of `result`.
    pub result_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalView {
    pub spec: OpenInterval,
    pub phase: Phase,
    /// Every bid for the operator; only the caller's own for homeowners.
    pub bids: Vec<BidCurve>,
    pub result: Option<ClearingResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub interval: IntervalId,
    pub phase: Phase,
    pub start_minute: i64,
    pub mcp: Option<Price>,
    pub cleared_quantity: Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainPage {
    pub height: u64,
    pub tip: Digest,
    pub from: u64,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeseries {
    pub interval_minutes: u32,
    pub intervals: Vec<IntervalId>,
    pub start_minute: Vec<i64>,
    pub series: BTreeMap<String, Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PreviewRequest {
    pub device: DeviceId,
    /// Defaults to the device's configured strategy.
    #[serde(default)]
    pub strategy: Option<Strategy>,
    /// Defaults to the open interval.
    #[serde(default)]
    pub interval: Option<IntervalId>,
    /// Local forecasts for the interval; default to the scenario profiles.
    #[serde(default)]
    pub pv_kwh: Option<f64>,
    #[serde(default)]
    pub load_kwh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewResponse {
    pub context: LocalContext,
    pub curves: Vec<BidCurve>,
}

/// Series always available from the ledger.
pub const BASE_SERIES: [&str; 4] = ["mcp", "cleared_kwh", "grid_price", "pcc_kw"];

#[allow(clippy::large_enum_variant)]
enum Engine {
    Ledger(Channel),
    Simulation(Box<Simulation>),
}

pub struct LiveChannel {
    spec: ChannelSpec,
    scenario: Arc<Scenario>,
    engine: Engine,
    events: Vec<FeedEvent>,
    synced: usize,
    feed: broadcast::Sender<FeedEvent>,
    replies: HashMap<String, (u16, serde_json::Value)>,
    next_tick: Option<SystemTime>,
}

impl LiveChannel {
    /// Opens (or creates) the channel's chain under `data_dir` and replays it.
    pub fn open(spec: ChannelSpec, data_dir: &Path) -> Result<LiveChannel, MarketError> {
        let scenario = Arc::new(ScenarioConfig::load(&spec.scenario)?);
        let config = channel_config(&scenario);
        let dir = data_dir.join(config.id.as_str());
        std::fs::create_dir_all(&dir).map_err(ChannelError::Io)?;
        let channel = Channel::open(config, &dir)?;
        let engine = match spec.cadence {
            Cadence::Simulate => {
                Engine::Simulation(Box::new(Simulation::resume(scenario.clone(), channel)?))
            }
            Cadence::Manual | Cadence::Timer => Engine::Ledger(channel),
        };
        let (feed, _) = broadcast::channel(1024);
        let mut live = LiveChannel {
            spec,
            scenario,
            engine,
            events: Vec::new(),
            synced: 0,
            feed,
            replies: HashMap::new(),
            next_tick: None,
        };
        live.sync();
        Ok(live)
    }

    pub fn id(&self) -> &ChannelId {
        self.channel().id()
    }

    pub fn cadence(&self) -> Cadence {
        self.spec.cadence
    }

    pub fn tick_interval(&self) -> Duration {
        Duration::from_millis(self.spec.tick_ms)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn channel(&self) -> &Channel {
        match &self.engine {
            Engine::Ledger(c) => c,
            Engine::Simulation(s) => s.channel(),
        }
    }

    fn ledger_mut(&mut self) -> Result<&mut Channel, MarketError> {
        match &mut self.engine {
            Engine::Ledger(c) => Ok(c),
            Engine::Simulation(_) => Err(MarketError::Conflict(
                "channel is driven by its scenario".into(),
            )),
        }
    }

    /// Turns newly committed blocks into feed events.
    fn sync(&mut self) {
        let channel = self.channel();
        let mut seq = self.events.len() as u64;
        let mut fresh = Vec::new();
        for block in &channel.blocks()[self.synced..] {
            let events = block_events(block, channel.state(), seq);
            seq += events.len() as u64;
            fresh.extend(events);
        }
        self.synced = channel.blocks().len();
        for e in fresh {
            // No receivers is fine.
            let _ = self.feed.send(e.clone());
            self.events.push(e);
        }
    }

    fn commit(&mut self, submitter: PeerId, payload: Payload) -> Result<Accepted, MarketError> {
        let channel = self.ledger_mut()?;
        let tx = channel.submit(submitter, payload)?;
        channel.commit_block()?;
        let height = channel.height() - 1;
        self.sync();
        Ok(Accepted { tx, height })
    }

    /// Rejects callers that are not members of this channel.
    pub fn authorize(&self, session: &ApiSession) -> Result<(), MarketError> {
        if !self.channel().config().is_member(&session.peer) {
            return Err(MarketError::Forbidden(format!(
                "{} is not a member of {}",
                session.peer,
                self.id()
            )));
        }
        Ok(())
    }

    fn require_operator(session: &ApiSession) -> Result<(), MarketError> {
        if session.role != Role::Operator {
            return Err(MarketError::Forbidden("operator role required".into()));
        }
        Ok(())
    }

    pub fn open_interval(
        &mut self,
        session: &ApiSession,
        req: &OpenRequest,
    ) -> Result<OpenResponse, MarketError> {
        Self::require_operator(session)?;
        let state = self.channel().state();
        if let Some(open) = state.open {
            return Err(MarketError::Conflict(format!(
                "interval {open} is still open"
            )));
        }
        let start = req.start_minute.unwrap_or_else(|| {
            state
                .intervals
                .values()
                .next_back()
                .map_or(0, |r| r.spec.end_minute())
        });
        let spec = OpenInterval {
            interval: state.next_interval_id(),
            start_minute: start,
            length_minutes: req
                .length_minutes
                .unwrap_or(self.scenario.config.interval_minutes),
            grid_price: self.scenario.config.tou.price_at(start),
        };
        let accepted = self.commit(session.peer.clone(), Payload::OpenInterval(spec.clone()))?;
        let closes_at_ms = match self.spec.cadence {
            Cadence::Timer => self.next_tick.map(unix_ms),
            _ => None,
        };
        Ok(OpenResponse {
            interval: spec.interval,
            tx: accepted.tx,
            spec,
            closes_at_ms,
        })
    }

    pub fn submit_bid(
        &mut self,
        session: &ApiSession,
        interval: IntervalId,
        req: BidRequest,
    ) -> Result<Accepted, MarketError> {
        let curve = BidCurve {
            side: req.side,
            points: req.points,
            owner: HomeId::from(session.peer.as_str()),
            device: req.device,
            interval,
        };
        self.commit(session.peer.clone(), Payload::SubmitBid(curve))
    }

    pub fn submit_measurement(
        &mut self,
        session: &ApiSession,
        req: MeasurementRequest,
    ) -> Result<Accepted, MarketError> {
        let m = Measurement {
            home: HomeId::from(session.peer.as_str()),
            device: req.device,
            interval: req.interval,
            reading: req.reading,
        };
        self.commit(session.peer.clone(), Payload::SubmitMeasurement(m))
    }

    pub fn close_interval(
        &mut self,
        session: &ApiSession,
        interval: IntervalId,
    ) -> Result<CloseResponse, MarketError> {
        Self::require_operator(session)?;
        let accepted = self.commit(session.peer.clone(), Payload::CloseInterval { interval })?;
        let result = self
            .channel()
            .state()
            .interval(interval)
            .and_then(|r| r.result.clone())
            .ok_or_else(|| MarketError::NotFound(format!("no result for interval {interval}")))?;
        Ok(CloseResponse {
            interval,
            tx: accepted.tx,
            result_digest: Digest::of(&result),
            result,
        })
    }

    fn record(&self, interval: IntervalId) -> Result<&IntervalRecord, MarketError> {
        self.channel()
            .state()
            .interval(interval)
            .ok_or_else(|| MarketError::NotFound(format!("unknown interval {interval}")))
    }

    pub fn interval_view(
        &self,
        session: &ApiSession,
        interval: IntervalId,
    ) -> Result<IntervalView, MarketError> {
        let r = self.record(interval)?;
        let bids = r
            .bids
            .values()
            .filter(|b| session.role == Role::Operator || b.owner.as_str() == session.peer.as_str())
            .cloned()
            .collect();
        Ok(IntervalView {
            spec: r.spec.clone(),
            phase: r.phase,
            bids,
            result: r.result.clone(),
        })
    }

    pub fn intervals(&self) -> Vec<IntervalSummary> {
        self.channel()
            .state()
            .intervals
            .values()
            .map(|r| IntervalSummary {
                interval: r.spec.interval,
                phase: r.phase,
                start_minute: r.spec.start_minute,
                mcp: r.result.as_ref().and_then(|c| c.mcp),
                cleared_quantity: r
                    .result
                    .as_ref()
                    .map(|c| c.cleared_quantity)
                    .unwrap_or_default(),
            })
            .collect()
    }

    /// Verified blocks from `from`, at most `limit` of them.
    pub fn chain_page(&self, from: u64, limit: Option<usize>) -> Result<ChainPage, MarketError> {
        let channel = self.channel();
        channel
            .verify_chain()
            .map_err(|f| MarketError::Tampered(f.to_string()))?;
        let tip = channel.height() - 1;
        if from > tip {
            return Err(MarketError::BeyondTip { from, tip });
        }
        let blocks = channel.blocks_from(from).unwrap_or_default();
        let n = limit.unwrap_or(MAX_PAGE).min(MAX_PAGE);
        Ok(ChainPage {
            height: channel.height(),
            tip: channel.tip_hash(),
            from,
            blocks: blocks[..blocks.len().min(n)].to_vec(),
        })
    }

    /// Per-interval series from the ledger. `names` may list the base series
    /// and `home/device` readings; defaults to the base series.
    pub fn timeseries(&self, names: Option<&str>) -> Result<Timeseries, MarketError> {
        let channel = self.channel();
        let names: Vec<String> = match names {
            Some(s) => s
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
            None => BASE_SERIES.iter().map(|s| s.to_string()).collect(),
        };
        let operator = HomeId::from(channel.config().operator.as_str());
        let mut keys = Vec::with_capacity(names.len());
        for name in &names {
            let key = match name.as_str() {
                "pcc_kw" => Some((operator.clone(), DeviceId::from(PCC_DEVICE))),
                n if BASE_SERIES.contains(&n) => None,
                n => {
                    let (home, device) = n
                        .split_once('/')
                        .ok_or_else(|| MarketError::Unprocessable(format!("unknown series {n}")))?;
                    let key = (HomeId::from(home), DeviceId::from(device));
                    if channel.registry().get(&key.0, &key.1).is_none() {
                        return Err(MarketError::Unprocessable(format!("unknown series {n}")));
                    }
                    Some(key)
                }
            };
            keys.push(key);
        }
        let state = channel.state();
        let mut out = Timeseries {
            interval_minutes: self.scenario.config.interval_minutes,
            intervals: Vec::new(),
            start_minute: Vec::new(),
            series: names.iter().map(|n| (n.clone(), Vec::new())).collect(),
        };
        for (id, r) in &state.intervals {
            out.intervals.push(*id);
            out.start_minute.push(r.spec.start_minute);
            let readings = state.measurements.get(id);
            for (name, key) in names.iter().zip(&keys) {
                let value = match (name.as_str(), key) {
                    ("mcp", _) => r.result.as_ref().and_then(|c| c.mcp).map(Price::dollars),
                    ("cleared_kwh", _) => r.result.as_ref().map(|c| c.cleared_quantity.kwh()),
                    ("grid_price", _) => Some(r.spec.grid_price.dollars()),
                    (_, Some(key)) => readings.and_then(|m| m.get(key)).map(reading_value),
                    _ => None,
                };
                out.series.get_mut(name).expect("series listed").push(value);
            }
        }
        Ok(out)
    }

    /// The bids the bidding agent would place for one of the caller's devices.
    pub fn preview(
        &self,
        session: &ApiSession,
        req: &PreviewRequest,
    ) -> Result<PreviewResponse, MarketError> {
        let cfg = &self.scenario.config;
        let state = self.channel().state();
        let home_id = HomeId::from(session.peer.as_str());
        let h = cfg
            .homes
            .iter()
            .position(|h| h.id == home_id)
            .ok_or_else(|| MarketError::Forbidden(format!("{} has no devices", session.peer)))?;
        let home = &cfg.homes[h];
        let interval = req
            .interval
            .or(state.open)
            .ok_or_else(|| MarketError::Conflict("no interval is open".into()))?;
        let spec = &self.record(interval)?.spec;
        let dt = spec.hours();
        let i = usize::try_from(spec.start_minute / i64::from(cfg.interval_minutes))
            .unwrap_or(usize::MAX);
        let weather = (i < self.scenario.weather.len()).then(|| WeatherSample {
            irradiance: self.scenario.weather.irradiance[i],
            temperature: self.scenario.weather.temperature[i],
        });
        let load_kwh = req.load_kwh.unwrap_or_else(|| {
            self.scenario.loads[h]
                .samples
                .get(i)
                .map_or(0.0, |kw| kw * dt)
        });
        let pv_kwh = req.pv_kwh.unwrap_or_else(|| {
            let Some(w) = weather else { return 0.0 };
            home.devices
                .iter()
                .map(|d| match d {
                    DeviceConfig::Pv { params, .. } => pv_power(params, &w) * dt,
                    _ => 0.0,
                })
                .sum()
        });
        if !(load_kwh.is_finite() && load_kwh >= 0.0 && pv_kwh.is_finite() && pv_kwh >= 0.0) {
            return Err(MarketError::Unprocessable(
                "forecasts must be non-negative".into(),
            ));
        }
        let floor = Price::from_dollars(cfg.floor_price);
        let cap = Price::from_dollars(cfg.price_cap);
        let ctx = LocalContext::from_forecast(
            Energy::from_kwh_round(pv_kwh),
            Energy::from_kwh_round(load_kwh),
            cfg.tou.period_at(spec.start_minute),
            spec.grid_price,
            floor,
            cap,
        );
        let target = BidTarget::new(home_id.clone(), req.device.clone(), interval);
        let soc = || match state.latest_reading(&home_id, &req.device) {
            Some(Reading::StateOfCharge { soc, plugged }) => Ok((soc.kwh(), *plugged)),
            _ => Err(MarketError::Conflict(format!(
                "no state-of-charge measurement for {}",
                req.device
            ))),
        };
        let bad = |e: &dyn std::fmt::Display| MarketError::Unprocessable(e.to_string());

        let curves = if req.device.as_str() == LOAD_DEVICE {
            vec![load_bid(ctx.net_load, spec.grid_price, &target)]
        } else {
            let device = home
                .devices
                .iter()
                .find(|d| d.id() == &req.device)
                .ok_or_else(|| MarketError::NotFound(format!("unknown device {}", req.device)))?;
            match device {
                DeviceConfig::Bess {
                    strategy, params, ..
                } => {
                    let strategy = match (req.strategy, strategy) {
                        (Some(s), _) => s,
                        (None, BessMode::Selfish) => Strategy::Selfish,
                        (None, BessMode::Helpful) => Strategy::Helpful,
                        (None, BessMode::Alternate) => {
                            return Err(MarketError::Unprocessable(
                                "scripted battery: name a strategy".into(),
                            ))
                        }
                    };
                    let (soc, _) = soc()?;
                    bess_bids(strategy, params, soc, &ctx, &cfg.tou, dt, &target)
                        .map_err(|e| bad(&e))?
                }
                DeviceConfig::Ev {
                    strategy,
                    battery,
                    soc_req,
                    schedule,
                    ..
                } => {
                    let (soc, plugged) = soc()?;
                    let now = spec.start_minute as f64 / 60.0;
                    let session = schedule.session_at(now).filter(|_| plugged);
                    let (t_arr, t_dep) = session.ok_or_else(|| {
                        MarketError::Conflict(format!("{} is not plugged in", req.device))
                    })?;
                    let params = DeviceConfig::ev_session(battery, *soc_req, t_arr, t_dep);
                    vec![ev_bid_curve(
                        req.strategy.unwrap_or(*strategy),
                        &params,
                        soc,
                        now,
                        dt,
                        &ctx,
                        &target,
                    )
                    .map_err(|e| bad(&e))?]
                }
                DeviceConfig::Pv { .. } => vec![pv_offer(ctx.excess_pv, floor, &target)],
                DeviceConfig::Thermostat {
                    strategy, params, ..
                } => {
                    let indoor = match state.latest_reading(&home_id, &req.device) {
                        Some(Reading::Temperature { centi_celsius }) => {
                            *centi_celsius as f64 / 100.0
                        }
                        _ => {
                            return Err(MarketError::Conflict(format!(
                                "no temperature measurement for {}",
                                req.device
                            )))
                        }
                    };
                    vec![st_bid_curve(
                        req.strategy.unwrap_or(*strategy),
                        params,
                        indoor,
                        dt,
                        &ctx,
                        &target,
                    )]
                }
            }
        };
        Ok(PreviewResponse {
            context: ctx,
            curves: curves.into_iter().filter(|c| !c.is_empty()).collect(),
        })
    }

    /// One step of the channel's own cadence.
    pub fn tick(&mut self) -> Result<(), MarketError> {
        self.next_tick = Some(SystemTime::now() + self.tick_interval());
        match &mut self.engine {
            Engine::Simulation(sim) => {
                if !sim.done() {
                    sim.step()?;
                }
                self.sync();
            }
            Engine::Ledger(channel) => {
                let operator = channel.config().operator.clone();
                if let Some(open) = channel.state().open {
                    self.commit(operator.clone(), Payload::CloseInterval { interval: open })?;
                }
                let session = ApiSession {
                    token: String::new(),
                    peer: operator,
                    channel: self.id().clone(),
                    role: Role::Operator,
                };
                self.open_interval(&session, &OpenRequest::default())?;
            }
        }
        Ok(())
    }

    /// Events from `from` on (or only new ones when `None`) and a receiver for
    /// the rest. Taken under the channel lock, so nothing falls in between.
    pub fn subscribe(&self, from: Option<u64>) -> (Vec<FeedEvent>, broadcast::Receiver<FeedEvent>) {
        let start = from.map_or(self.events.len(), |f| (f as usize).min(self.events.len()));
        (self.events[start..].to_vec(), self.feed.subscribe())
    }

    pub fn next_seq(&self) -> u64 {
        self.events.len() as u64
    }

    /// A stored reply for an idempotency key.
    pub fn reply_for(&self, key: &str) -> Option<(u16, serde_json::Value)> {
        self.replies.get(key).cloned()
    }

    pub fn remember_reply(&mut self, key: String, status: u16, body: serde_json::Value) {
        self.replies.insert(key, (status, body));
    }
}

fn reading_value(r: &Reading) -> f64 {
    match r {
        Reading::StateOfCharge { soc, .. } => soc.kwh(),
        Reading::Temperature { centi_celsius } => *centi_celsius as f64 / 100.0,
        Reading::Power { power } => power.kw(),
    }
}

fn unix_ms(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Every live channel, by id.
#[derive(Clone, Default)]
pub struct Market {
    channels: Arc<BTreeMap<ChannelId, Arc<Mutex<LiveChannel>>>>,
}

impl Market {
    pub fn open(specs: &[ChannelSpec], data_dir: &Path) -> Result<Market, MarketError> {
        let mut channels = BTreeMap::new();
        for spec in specs {
            let live = LiveChannel::open(spec.clone(), data_dir)?;
            let id = live.id().clone();
            if channels
                .insert(id.clone(), Arc::new(Mutex::new(live)))
                .is_some()
            {
                return Err(MarketError::Conflict(format!(
                    "channel {id} configured twice"
                )));
            }
        }
        Ok(Market {
            channels: Arc::new(channels),
        })
    }

    pub fn get(&self, id: &ChannelId) -> Option<Arc<Mutex<LiveChannel>>> {
        self.channels.get(id).cloned()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ChannelId> {
        self.channels.keys()
    }

    pub fn channels(&self) -> impl Iterator<Item = &Arc<Mutex<LiveChannel>>> {
        self.channels.values()
    }
}
