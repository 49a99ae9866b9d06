use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::digest::Digest;
use crate::bidding::BidCurve;
use crate::ids::{ChannelId, DeviceId, HomeId, IntervalId, PeerId};
use crate::units::{Energy, Power, Price};

/// Parameters of a new market interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenInterval {
    pub interval: IntervalId,
    /// Minutes since the start of the market calendar.
    pub start_minute: i64,
    pub length_minutes: u32,
    /// Grid retail price in force during the interval.
    pub grid_price: Price,
}

impl OpenInterval {
    pub fn end_minute(&self) -> i64 {
        self.start_minute + i64::from(self.length_minutes)
    }

    pub fn hours(&self) -> f64 {
        f64::from(self.length_minutes) / 60.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reading {
    /// Battery or EV state of charge; `plugged` is false for an absent EV.
    StateOfCharge { soc: Energy, plugged: bool },
    /// Indoor temperature in hundredths of a degree Celsius.
    Temperature { centi_celsius: i64 },
    /// Average power over the interval; positive is consumption.
    Power { power: Power },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    pub home: HomeId,
    pub device: DeviceId,
    pub interval: IntervalId,
    pub reading: Reading,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    OpenInterval(OpenInterval),
    SubmitBid(BidCurve),
    SubmitMeasurement(Measurement),
    CloseInterval { interval: IntervalId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TxKind {
    OpenInterval,
    SubmitBid,
    SubmitMeasurement,
    CloseInterval,
}

impl Payload {
    pub fn kind(&self) -> TxKind {
        match self {
            Payload::OpenInterval(_) => TxKind::OpenInterval,
            Payload::SubmitBid(_) => TxKind::SubmitBid,
            Payload::SubmitMeasurement(_) => TxKind::SubmitMeasurement,
            Payload::CloseInterval { .. } => TxKind::CloseInterval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    /// Hash of the canonical encoding of `(channel, submitter, payload)`.
    pub id: Digest,
    pub channel: ChannelId,
    pub submitter: PeerId,
    pub payload: Payload,
    pub endorsements: BTreeSet<PeerId>,
}

impl Transaction {
    pub fn new(channel: ChannelId, submitter: PeerId, payload: Payload) -> Transaction {
        let id = Self::content_id(&channel, &submitter, &payload);
        Transaction {
            id,
            channel,
            submitter,
            payload,
            endorsements: BTreeSet::new(),
        }
    }

    pub fn content_id(channel: &ChannelId, submitter: &PeerId, payload: &Payload) -> Digest {
        Digest::of(&(channel, submitter, payload))
    }

    pub fn id_matches_content(&self) -> bool {
        self.id == Self::content_id(&self.channel, &self.submitter, &self.payload)
    }

    pub fn kind(&self) -> TxKind {
        self.payload.kind()
    }
}
