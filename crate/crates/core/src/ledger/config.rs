use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bidding::Side;
use crate::der::{BessParams, PvParams, StParams};
use crate::ids::{ChannelId, DeviceId, HomeId, PeerId};
use crate::units::Price;

pub const DEFAULT_BLOCK_TX_LIMIT: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviceKind {
    Bess {
        params: BessParams,
    },
    /// EV battery; `p_min` is zero.
    Ev {
        battery: BessParams,
    },
    Pv {
        params: PvParams,
    },
    Thermostat {
        params: StParams,
    },
    /// Inflexible household load.
    Load,
    /// Metering point such as the point of common coupling; never bids.
    Meter,
}

impl DeviceKind {
    pub fn allows(&self, side: Side) -> bool {
        match self {
            DeviceKind::Bess { .. } => true,
            DeviceKind::Ev { .. } | DeviceKind::Thermostat { .. } | DeviceKind::Load => {
                side == Side::Buy
            }
            DeviceKind::Pv { .. } => side == Side::Sell,
            DeviceKind::Meter => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRegistration {
    pub home: HomeId,
    pub device: DeviceId,
    #[serde(flatten)]
    pub kind: DeviceKind,
}

/// Membership and market rules of one channel (one community).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub id: ChannelId,
    /// Peer allowed to open and close intervals. Also a member.
    pub operator: PeerId,
    /// All members, one per home plus the operator.
    pub members: Vec<PeerId>,
    /// Endorsements required per transaction; simple majority when absent.
    #[serde(default)]
    pub quorum: Option<usize>,
    pub price_cap: Price,
    #[serde(default = "default_block_limit")]
    pub block_tx_limit: usize,
    #[serde(default)]
    pub devices: Vec<DeviceRegistration>,
}

fn default_block_limit() -> usize {
    DEFAULT_BLOCK_TX_LIMIT
}

impl ChannelConfig {
    pub fn new(id: impl Into<ChannelId>, operator: impl Into<PeerId>, homes: &[HomeId]) -> Self {
        let operator = operator.into();
        let mut members: Vec<PeerId> = homes.iter().map(PeerId::from).collect();
        members.push(operator.clone());
        ChannelConfig {
            id: id.into(),
            operator,
            members,
            quorum: None,
            price_cap: Price(1000),
            block_tx_limit: DEFAULT_BLOCK_TX_LIMIT,
            devices: Vec::new(),
        }
    }

    pub fn majority(&self) -> usize {
        self.members.len() / 2 + 1
    }

    /// Effective quorum; never below a simple majority.
    pub fn quorum(&self) -> usize {
        self.quorum.unwrap_or(0).max(self.majority())
    }

    pub fn is_member(&self, peer: &PeerId) -> bool {
        self.members.contains(peer)
    }

    pub fn register(
        &mut self,
        home: impl Into<HomeId>,
        device: impl Into<DeviceId>,
        kind: DeviceKind,
    ) {
        self.devices.push(DeviceRegistration {
            home: home.into(),
            device: device.into(),
            kind,
        });
    }

    pub fn registry(&self) -> Registry {
        Registry {
            devices: self
                .devices
                .iter()
                .map(|d| ((d.home.clone(), d.device.clone()), d.kind.clone()))
                .collect(),
        }
    }
}

/// Device lookup by `(home, device)`.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    devices: BTreeMap<(HomeId, DeviceId), DeviceKind>,
}

impl Registry {
    pub fn get(&self, home: &HomeId, device: &DeviceId) -> Option<&DeviceKind> {
        self.devices.get(&(home.clone(), device.clone()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(HomeId, DeviceId), &DeviceKind)> {
        self.devices.iter()
    }
}
