//! Live events derived from committed blocks.
//!
//! Events are numbered over the whole chain, starting at the genesis block,
//! so a restarted service regenerates the same sequence and a client can
//! resume from any number it has seen.

use enertrade_core::bidding::Side;
use enertrade_core::ids::{DeviceId, HomeId, IntervalId};
use enertrade_core::ledger::{Block, ContractState, Digest, OpenInterval, Payload, Reading};
use enertrade_core::units::{Energy, Price};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedPayload {
    /// A committed bid. The curve itself is not broadcast.
    BidAccepted {
        interval: IntervalId,
        owner: HomeId,
        device: DeviceId,
        side: Side,
        tx: Digest,
    },
    IntervalOpened {
        spec: OpenInterval,
        tx: Digest,
    },
    IntervalCleared {
        interval: IntervalId,
        mcp: Option<Price>,
        cleared_quantity: Energy,
        tx: Digest,
    },
    MeasurementCommitted {
        interval: IntervalId,
        home: HomeId,
        device: DeviceId,
        reading: Reading,
        tx: Digest,
    },
    BlockCommitted {
        height: u64,
        block_hash: Digest,
        txs: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub payload: FeedPayload,
}

impl FeedEvent {
    pub fn kind(&self) -> &'static str {
        match self.payload {
            FeedPayload::BidAccepted { .. } => "bid_accepted",
            FeedPayload::IntervalOpened { .. } => "interval_opened",
            FeedPayload::IntervalCleared { .. } => "interval_cleared",
            FeedPayload::MeasurementCommitted { .. } => "measurement_committed",
            FeedPayload::BlockCommitted { .. } => "block_committed",
        }
    }
}

/// Events for one committed block, numbered from `next_seq`. `state` must
/// include the block.
pub fn block_events(block: &Block, state: &ContractState, next_seq: u64) -> Vec<FeedEvent> {
    let mut out: Vec<FeedPayload> = block
        .txs
        .iter()
        .map(|tx| match &tx.payload {
            Payload::OpenInterval(spec) => FeedPayload::IntervalOpened {
                spec: spec.clone(),
                tx: tx.id,
            },
            Payload::SubmitBid(bid) => FeedPayload::BidAccepted {
                interval: bid.interval,
                owner: bid.owner.clone(),
                device: bid.device.clone(),
                side: bid.side,
                tx: tx.id,
            },
            Payload::SubmitMeasurement(m) => FeedPayload::MeasurementCommitted {
                interval: m.interval,
                home: m.home.clone(),
                device: m.device.clone(),
                reading: m.reading,
                tx: tx.id,
            },
            Payload::CloseInterval { interval } => {
                let result = state.interval(*interval).and_then(|r| r.result.as_ref());
                FeedPayload::IntervalCleared {
                    interval: *interval,
                    mcp: result.and_then(|r| r.mcp),
                    cleared_quantity: result.map(|r| r.cleared_quantity).unwrap_or_default(),
                    tx: tx.id,
                }
            }
        })
        .collect();
    out.push(FeedPayload::BlockCommitted {
        height: block.height,
        block_hash: block.block_hash,
        txs: block.txs.len(),
    });
    out.into_iter()
        .enumerate()
        .map(|(i, payload)| FeedEvent {
            seq: next_seq + i as u64,
            payload,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn genesis_yields_one_block_event() {
        let events = block_events(&Block::genesis(), &ContractState::default(), 0);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].seq, 0);
        assert_eq!(events[0].kind(), "block_committed");
        let json = serde_json::to_value(&events[0]).unwrap();
        assert_eq!(json["kind"], "block_committed");
        assert_eq!(json["height"], 0);
    }
}
