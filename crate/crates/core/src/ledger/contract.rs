//! The market smart contract: the interval state machine every peer runs
//! against its copy of the world state.
//!
//! Rules:
//! - only the operator opens and closes intervals; ids are consecutive and at
//!   most one interval is open at a time;
//! - bids are accepted only while their interval is open, from the home that
//!   owns the device, one per device and side, and within the device's
//!   feasible envelope as of its last committed measurement;
//! - measurements come from the device owner, one per device and interval;
//! - closing moves the interval Open → Closed → Cleared in one step, runs the
//!   auction over every committed bid and records the control signals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ChannelConfig, DeviceKind, Registry};
use super::digest::Digest;
use super::tx::{Measurement, OpenInterval, Payload, Reading, Transaction};
use crate::auction::{self, AuctionError, ClearingResult};
use crate::bidding::{BidCurve, BidKey, CurveError, Side};
use crate::der::bess_feasible_range;
use crate::ids::{DeviceId, HomeId, IntervalId, PeerId};
use crate::units::{Energy, Power};

/// Watt-hours of slack when checking a bid against an envelope derived from a
/// measurement rounded to whole watt-hours.
pub const ENVELOPE_SLACK_WH: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Open,
    Closed,
    Cleared,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error("only the operator may {0}")]
    NotOperator(&'static str),
    #[error("next interval id is {expected}, got {got}")]
    IntervalId {
        expected: IntervalId,
        got: IntervalId,
    },
    #[error("interval {0} is still open")]
    AlreadyOpen(IntervalId),
    #[error("unknown interval {0}")]
    UnknownInterval(IntervalId),
    #[error("interval {interval} is {phase:?}, not open")]
    PhaseViolation { interval: IntervalId, phase: Phase },
    #[error("interval length must be positive")]
    EmptyInterval,
    #[error("peer {peer} does not own {home}/{device}")]
    NotOwner {
        peer: PeerId,
        home: HomeId,
        device: DeviceId,
    },
    #[error("unknown device {0}/{1}")]
    UnknownDevice(HomeId, DeviceId),
    #[error("device {0}/{1} cannot bid on this side")]
    SideNotAllowed(HomeId, DeviceId),
    #[error("bid {0} already submitted for this interval")]
    DuplicateBid(BidKey),
    #[error("malformed bid curve: {0}")]
    Curve(#[from] CurveError),
    #[error("no committed state-of-charge measurement for {0}/{1}")]
    MissingMeasurement(HomeId, DeviceId),
    #[error("EV {0}/{1} is not plugged in")]
    NotPlugged(HomeId, DeviceId),
    #[error("bid of {requested} Wh exceeds the feasible {allowed} Wh")]
    ExceedsEnvelope { requested: i64, allowed: i64 },
    #[error("measurement for {0}/{1} already recorded in this interval")]
    DuplicateMeasurement(HomeId, DeviceId),
    #[error("reading does not match the device kind")]
    ReadingKind,
    #[error("clearing failed: {0}")]
    Auction(#[from] AuctionError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub spec: OpenInterval,
    pub phase: Phase,
    pub bids: BTreeMap<BidKey, BidCurve>,
    pub result: Option<ClearingResult>,
}

/// World state of one channel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractState {
    pub intervals: BTreeMap<IntervalId, IntervalRecord>,
    /// Measurements by interval, then device.
    pub measurements: BTreeMap<IntervalId, BTreeMap<(HomeId, DeviceId), Reading>>,
    /// Most recent committed reading per device.
    pub latest: BTreeMap<(HomeId, DeviceId), Reading>,
    pub open: Option<IntervalId>,
}

/// Read-only context a peer validates against.
pub struct Rules<'a> {
    pub config: &'a ChannelConfig,
    pub registry: &'a Registry,
}

impl ContractState {
    pub fn digest(&self) -> Digest {
        Digest::of(self)
    }

    pub fn next_interval_id(&self) -> IntervalId {
        self.intervals.keys().next_back().map_or(1, |id| id + 1)
    }

    pub fn interval(&self, id: IntervalId) -> Option<&IntervalRecord> {
        self.intervals.get(&id)
    }

    pub fn phase(&self, id: IntervalId) -> Option<Phase> {
        self.intervals.get(&id).map(|r| r.phase)
    }

    pub fn latest_reading(&self, home: &HomeId, device: &DeviceId) -> Option<&Reading> {
        self.latest.get(&(home.clone(), device.clone()))
    }

    /// Checks `tx` against the contract rules without changing state.
    pub fn validate(&self, rules: &Rules<'_>, tx: &Transaction) -> Result<(), ContractError> {
        let operator = &rules.config.operator;
        match &tx.payload {
            Payload::OpenInterval(spec) => {
                if &tx.submitter != operator {
                    return Err(ContractError::NotOperator("open intervals"));
                }
                if let Some(open) = self.open {
                    return Err(ContractError::AlreadyOpen(open));
                }
                let expected = self.next_interval_id();
                if spec.interval != expected {
                    return Err(ContractError::IntervalId {
                        expected,
                        got: spec.interval,
                    });
                }
                if spec.length_minutes == 0 {
                    return Err(ContractError::EmptyInterval);
                }
                Ok(())
            }
            Payload::CloseInterval { interval } => {
                if &tx.submitter != operator {
                    return Err(ContractError::NotOperator("close intervals"));
                }
                self.require_open(*interval).map(|_| ())
            }
            Payload::SubmitBid(bid) => self.validate_bid(rules, &tx.submitter, bid),
            Payload::SubmitMeasurement(m) => self.validate_measurement(rules, &tx.submitter, m),
        }
    }

    fn require_open(&self, interval: IntervalId) -> Result<&IntervalRecord, ContractError> {
        let record = self
            .intervals
            .get(&interval)
            .ok_or(ContractError::UnknownInterval(interval))?;
        if record.phase != Phase::Open {
            return Err(ContractError::PhaseViolation {
                interval,
                phase: record.phase,
            });
        }
        Ok(record)
    }

    fn device<'r>(
        &self,
        rules: &'r Rules<'_>,
        submitter: &PeerId,
        home: &HomeId,
        device: &DeviceId,
    ) -> Result<&'r DeviceKind, ContractError> {
        let kind = rules
            .registry
            .get(home, device)
            .ok_or_else(|| ContractError::UnknownDevice(home.clone(), device.clone()))?;
        if submitter.as_str() != home.as_str() {
            return Err(ContractError::NotOwner {
                peer: submitter.clone(),
                home: home.clone(),
                device: device.clone(),
            });
        }
        Ok(kind)
    }

    fn validate_bid(
        &self,
        rules: &Rules<'_>,
        submitter: &PeerId,
        bid: &BidCurve,
    ) -> Result<(), ContractError> {
        let kind = self.device(rules, submitter, &bid.owner, &bid.device)?;
        let record = self.require_open(bid.interval)?;
        bid.validate(rules.config.price_cap)?;
        if !kind.allows(bid.side) {
            return Err(ContractError::SideNotAllowed(
                bid.owner.clone(),
                bid.device.clone(),
            ));
        }
        let key = bid.key();
        if record.bids.contains_key(&key) {
            return Err(ContractError::DuplicateBid(key));
        }
        if let Some(allowed) =
            self.feasible_energy(kind, &bid.owner, &bid.device, bid.side, record.spec.hours())?
        {
            let requested = bid.total_quantity();
            if requested.wh() > allowed.wh() + ENVELOPE_SLACK_WH {
                return Err(ContractError::ExceedsEnvelope {
                    requested: requested.wh(),
                    allowed: allowed.wh(),
                });
            }
        }
        Ok(())
    }

    /// Energy a storage device can absorb (buy) or deliver (sell) over
    /// `hours`, per its last measurement. `None` for devices without a
    /// state-of-charge envelope.
    fn feasible_energy(
        &self,
        kind: &DeviceKind,
        home: &HomeId,
        device: &DeviceId,
        side: Side,
        hours: f64,
    ) -> Result<Option<Energy>, ContractError> {
        let battery = match kind {
            DeviceKind::Bess { params } => params,
            DeviceKind::Ev { battery } => battery,
            _ => return Ok(None),
        };
        let (soc, plugged) = match self.latest_reading(home, device) {
            Some(Reading::StateOfCharge { soc, plugged }) => (*soc, *plugged),
            _ => {
                return Err(ContractError::MissingMeasurement(
                    home.clone(),
                    device.clone(),
                ))
            }
        };
        if !plugged {
            return Err(ContractError::NotPlugged(home.clone(), device.clone()));
        }
        let range = bess_feasible_range(battery, soc.kwh(), hours);
        let kwh = match side {
            Side::Buy => range.hi * hours,
            Side::Sell => -range.lo * hours,
        };
        Ok(Some(Energy::from_kwh_floor(kwh)))
    }

    fn validate_measurement(
        &self,
        rules: &Rules<'_>,
        submitter: &PeerId,
        m: &Measurement,
    ) -> Result<(), ContractError> {
        let kind = self.device(rules, submitter, &m.home, &m.device)?;
        let matches = matches!(
            (kind, &m.reading),
            (
                DeviceKind::Bess { .. } | DeviceKind::Ev { .. },
                Reading::StateOfCharge { .. }
            ) | (DeviceKind::Thermostat { .. }, Reading::Temperature { .. })
                | (
                    DeviceKind::Pv { .. } | DeviceKind::Load | DeviceKind::Meter,
                    Reading::Power { .. }
                )
        );
        if !matches {
            return Err(ContractError::ReadingKind);
        }
        let duplicate = self
            .measurements
            .get(&m.interval)
            .is_some_and(|by_device| by_device.contains_key(&(m.home.clone(), m.device.clone())));
        if duplicate {
            return Err(ContractError::DuplicateMeasurement(
                m.home.clone(),
                m.device.clone(),
            ));
        }
        Ok(())
    }

    /// Validates and applies one transaction.
    pub fn apply(&mut self, rules: &Rules<'_>, tx: &Transaction) -> Result<(), ContractError> {
        self.validate(rules, tx)?;
        match &tx.payload {
            Payload::OpenInterval(spec) => {
                self.intervals.insert(
                    spec.interval,
                    IntervalRecord {
                        spec: spec.clone(),
                        phase: Phase::Open,
                        bids: BTreeMap::new(),
                        result: None,
                    },
                );
                self.open = Some(spec.interval);
            }
            Payload::SubmitBid(bid) => {
                let record = self.intervals.get_mut(&bid.interval).expect("validated");
                record.bids.insert(bid.key(), bid.clone());
            }
            Payload::SubmitMeasurement(m) => {
                let key = (m.home.clone(), m.device.clone());
                self.measurements
                    .entry(m.interval)
                    .or_default()
                    .insert(key.clone(), m.reading);
                self.latest.insert(key, m.reading);
            }
            Payload::CloseInterval { interval } => {
                self.close_interval(rules, *interval)?;
            }
        }
        Ok(())
    }

    /// Clears an open interval over its committed bids and records the
    /// result and control signals.
    pub fn close_interval(
        &mut self,
        rules: &Rules<'_>,
        interval: IntervalId,
    ) -> Result<(), ContractError> {
        self.require_open(interval)?;
        let record = self.intervals.get(&interval).expect("checked open");
        let bids: Vec<BidCurve> = record.bids.values().cloned().collect();
        let minutes = record.spec.length_minutes;
        let hours = record.spec.hours();
        let mut result = auction::clear_book(&bids)?;
        result.interval = Some(interval);
        let envelope =
            |home: &HomeId, device: &DeviceId| self.power_envelope(rules, home, device, hours);
        result.signals = auction::emit_signals(&result, minutes, &envelope)?;

        let record = self.intervals.get_mut(&interval).expect("checked open");
        record.phase = Phase::Closed;
        record.result = Some(result);
        record.phase = Phase::Cleared;
        self.open = None;
        Ok(())
    }

    fn power_envelope(
        &self,
        rules: &Rules<'_>,
        home: &HomeId,
        device: &DeviceId,
        hours: f64,
    ) -> Option<(Power, Power)> {
        let watts = |kw: f64, up: bool| {
            let w = kw * 1000.0;
            Power(if up { w.ceil() } else { w.floor() } as i64)
        };
        match rules.registry.get(home, device)? {
            DeviceKind::Bess { params: battery } | DeviceKind::Ev { battery } => {
                match self.latest_reading(home, device)? {
                    Reading::StateOfCharge { soc, plugged: true } => {
                        let r = bess_feasible_range(battery, soc.kwh(), hours);
                        // Bids may exceed the envelope by the measurement slack.
                        let slack = ENVELOPE_SLACK_WH as f64 / 1000.0 / hours;
                        Some((watts(r.lo - slack, false), watts(r.hi + slack, true)))
                    }
                    Reading::StateOfCharge { plugged: false, .. } => Some((Power(0), Power(0))),
                    _ => None,
                }
            }
            DeviceKind::Pv { params } => Some((watts(-params.p_rated, false), Power(0))),
            DeviceKind::Thermostat { params } => Some((Power(0), watts(params.hvac_power, true))),
            DeviceKind::Load | DeviceKind::Meter => None,
        }
    }
}
