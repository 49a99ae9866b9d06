//! Uniform-price double auction.
//!
//! Sell steps are stacked by ascending price and buy steps by descending
//! price; the cleared quantity is the largest quantity at which demand still
//! pays at least the supply price. Everything that trades settles at one
//! market clearing price (MCP): the midpoint of the highest awarded sell price
//! and the lowest awarded buy price. Steps sharing the marginal price on
//! either side split the remainder pro rata, with leftover watt-hours handed
//! out by largest remainder and then by bid key. All arithmetic is integer,
//! so clearing is exact and replayable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bidding::{BidCurve, BidKey, Side};
use crate::ids::{DeviceId, HomeId, IntervalId};
use crate::units::{Energy, Money, Power, Price};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuctionError {
    #[error("bid {0} is on the wrong side of the book")]
    MixedSide(BidKey),
    #[error("bid {key} belongs to interval {found}, expected {expected}")]
    MixedInterval {
        key: BidKey,
        expected: IntervalId,
        found: IntervalId,
    },
    #[error("supply and demand curves belong to different intervals")]
    IntervalMismatch,
    #[error("nothing to settle: the interval cleared without trade")]
    NoTrade,
    #[error("setpoint {setpoint} W for {home}/{device} outside [{lo}, {hi}] W")]
    InfeasibleSetpoint {
        home: HomeId,
        device: DeviceId,
        setpoint: i64,
        lo: i64,
        hi: i64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveSide {
    Supply,
    Demand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurveStep {
    pub price: Price,
    pub quantity: Energy,
    /// Cumulative quantity up to and including this step.
    pub cumulative: Energy,
    pub bid: BidKey,
    /// Position of the step within its bid curve.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub side: CurveSide,
    pub interval: Option<IntervalId>,
    pub steps: Vec<CurveStep>,
}

impl AggregateCurve {
    pub fn total(&self) -> Energy {
        self.steps.last().map(|s| s.cumulative).unwrap_or_default()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Stacks bid curves of one side into an aggregate curve. Supply is sorted by
/// ascending price, demand by descending price, ties by bid key.
pub fn build_curve(bids: &[BidCurve], side: Side) -> Result<AggregateCurve, AuctionError> {
    let interval = bids.first().map(|b| b.interval);
    let mut steps = Vec::new();
    for bid in bids {
        if bid.side != side {
            return Err(AuctionError::MixedSide(bid.key()));
        }
        if Some(bid.interval) != interval {
            return Err(AuctionError::MixedInterval {
                key: bid.key(),
                expected: interval.unwrap_or_default(),
                found: bid.interval,
            });
        }
        let key = bid.key();
        for (index, (quantity, price)) in bid.steps().enumerate() {
            if quantity > Energy::ZERO {
                steps.push(CurveStep {
                    price,
                    quantity,
                    cumulative: Energy::ZERO,
                    bid: key.clone(),
                    index,
                });
            }
        }
    }
    let curve_side = match side {
        Side::Sell => CurveSide::Supply,
        Side::Buy => CurveSide::Demand,
    };
    steps.sort_by(|a, b| {
        let by_price = match curve_side {
            CurveSide::Supply => a.price.cmp(&b.price),
            CurveSide::Demand => b.price.cmp(&a.price),
        };
        by_price
            .then_with(|| a.bid.cmp(&b.bid))
            .then_with(|| a.index.cmp(&b.index))
    });
    let mut total = Energy::ZERO;
    for step in &mut steps {
        total += step.quantity;
        step.cumulative = total;
    }
    Ok(AggregateCurve {
        side: curve_side,
        interval,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Award {
    pub bid: BidKey,
    /// Total quantity the bid asked for.
    pub requested: Energy,
    pub awarded: Energy,
    /// Price of the least favourable awarded step; best step price if nothing
    /// was awarded.
    pub limit: Price,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub home: HomeId,
    /// Positive when the home is paid.
    pub amount: Money,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub home: HomeId,
    pub device: DeviceId,
    pub command: Command,
    /// Positive for consumption or charging, negative for generation or
    /// discharging.
    pub setpoint: Power,
    pub interval: IntervalId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearingResult {
    pub interval: Option<IntervalId>,
    pub mcp: Option<Price>,
    pub cleared_quantity: Energy,
    /// One entry per bid in the book, including bids awarded nothing.
    pub awards: Vec<Award>,
    pub settlements: Vec<Settlement>,
    pub signals: Vec<ControlSignal>,
}

impl ClearingResult {
    pub fn award(&self, key: &BidKey) -> Option<&Award> {
        self.awards.iter().find(|a| &a.bid == key)
    }

    pub fn awarded(&self, key: &BidKey) -> Energy {
        self.award(key).map(|a| a.awarded).unwrap_or_default()
    }

    pub fn total_awarded(&self, side: Side) -> Energy {
        self.awards
            .iter()
            .filter(|a| a.bid.side == side)
            .map(|a| a.awarded)
            .sum()
    }

    pub fn is_no_trade(&self) -> bool {
        self.mcp.is_none()
    }
}

/// Clears one interval.
pub fn clear(
    supply: &AggregateCurve,
    demand: &AggregateCurve,
) -> Result<ClearingResult, AuctionError> {
    if supply.side != CurveSide::Supply || demand.side != CurveSide::Demand {
        return Err(AuctionError::IntervalMismatch);
    }
    let interval = match (supply.interval, demand.interval) {
        (Some(a), Some(b)) if a != b => return Err(AuctionError::IntervalMismatch),
        (a, b) => a.or(b),
    };

    let (cleared, marginal) = walk(&supply.steps, &demand.steps);
    let (sell_alloc, buy_alloc) = match marginal {
        Some((sell_price, buy_price)) => (
            allocate(&supply.steps, cleared, sell_price),
            allocate(&demand.steps, cleared, buy_price),
        ),
        None => (
            vec![Energy::ZERO; supply.steps.len()],
            vec![Energy::ZERO; demand.steps.len()],
        ),
    };

    let mut awards: BTreeMap<BidKey, Award> = BTreeMap::new();
    for (curve, alloc) in [(supply, &sell_alloc), (demand, &buy_alloc)] {
        // Steps arrive in stack order, best price first, so the first step
        // seen sets the unawarded limit and the last awarded step the final.
        for (step, got) in curve.steps.iter().zip(alloc.iter()) {
            let entry = awards.entry(step.bid.clone()).or_insert_with(|| Award {
                bid: step.bid.clone(),
                requested: Energy::ZERO,
                awarded: Energy::ZERO,
                limit: step.price,
            });
            entry.requested += step.quantity;
            if *got > Energy::ZERO {
                entry.awarded += *got;
                entry.limit = step.price;
            }
        }
    }

    let mut result = ClearingResult {
        interval,
        mcp: marginal.map(|(s, b)| s.midpoint(b)),
        cleared_quantity: cleared,
        awards: awards.into_values().collect(),
        settlements: Vec::new(),
        signals: Vec::new(),
    };
    if result.mcp.is_some() {
        result.settlements = settle(&result)?;
    }
    Ok(result)
}

/// Merges the two sorted stacks. Returns the cleared quantity and the
/// (sell, buy) prices of the last unit traded.
fn walk(supply: &[CurveStep], demand: &[CurveStep]) -> (Energy, Option<(Price, Price)>) {
    let (mut i, mut j) = (0, 0);
    let mut rem_s = supply.first().map(|s| s.quantity).unwrap_or_default();
    let mut rem_d = demand.first().map(|s| s.quantity).unwrap_or_default();
    let mut cleared = Energy::ZERO;
    let mut marginal = None;
    while i < supply.len() && j < demand.len() && supply[i].price <= demand[j].price {
        let t = rem_s.min(rem_d);
        cleared += t;
        marginal = Some((supply[i].price, demand[j].price));
        rem_s -= t;
        rem_d -= t;
        if rem_s.is_zero() {
            i += 1;
            rem_s = supply.get(i).map(|s| s.quantity).unwrap_or_default();
        }
        if rem_d.is_zero() {
            j += 1;
            rem_d = demand.get(j).map(|s| s.quantity).unwrap_or_default();
        }
    }
    (cleared, marginal)
}

/// Fills steps priced strictly better than `marginal` completely, then splits
/// what is left of `cleared` pro rata over the steps at `marginal`.
fn allocate(steps: &[CurveStep], cleared: Energy, marginal: Price) -> Vec<Energy> {
    let at_margin = |s: &CurveStep| s.price == marginal;
    let mut alloc = vec![Energy::ZERO; steps.len()];
    let mut filled = Energy::ZERO;
    let mut level_total: i128 = 0;
    for (k, step) in steps.iter().enumerate() {
        if at_margin(step) {
            level_total += i128::from(step.quantity.wh());
        } else if level_total == 0 {
            // Before the marginal level in stack order: strictly better price.
            alloc[k] = step.quantity;
            filled += step.quantity;
        }
    }
    let remainder = i128::from((cleared - filled).wh());
    debug_assert!(remainder >= 0 && remainder <= level_total);
    if remainder == 0 || level_total == 0 {
        return alloc;
    }
    let mut handed = 0i128;
    let mut fractions = Vec::new();
    for (k, step) in steps.iter().enumerate().filter(|(_, s)| at_margin(s)) {
        let num = remainder * i128::from(step.quantity.wh());
        let share = num / level_total;
        alloc[k] = Energy(share as i64);
        handed += share;
        fractions.push((num % level_total, k));
    }
    // Largest fractional remainder first; stack order breaks ties.
    fractions.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, k) in fractions.into_iter().take((remainder - handed) as usize) {
        alloc[k] += Energy(1);
    }
    alloc
}

/// Uniform-price payments: buyers pay and sellers receive MCP times their
/// award, netted per home. Sums to zero.
pub fn settle(result: &ClearingResult) -> Result<Vec<Settlement>, AuctionError> {
    let mcp = match result.mcp {
        Some(p) if result.cleared_quantity > Energy::ZERO => p,
        _ => return Err(AuctionError::NoTrade),
    };
    let mut by_home: BTreeMap<HomeId, Money> = BTreeMap::new();
    for award in result.awards.iter().filter(|a| a.awarded > Energy::ZERO) {
        let value = mcp.times(award.awarded);
        let entry = by_home.entry(award.bid.owner.clone()).or_default();
        match award.bid.side {
            Side::Buy => *entry -= value,
            Side::Sell => *entry += value,
        }
    }
    Ok(by_home
        .into_iter()
        .map(|(home, amount)| Settlement { home, amount })
        .collect())
}

/// Allowed setpoint range of a device in watts; `None` when unconstrained.
pub trait Envelope {
    fn power_range(&self, home: &HomeId, device: &DeviceId) -> Option<(Power, Power)>;
}

impl<F> Envelope for F
where
    F: Fn(&HomeId, &DeviceId) -> Option<(Power, Power)>,
{
    fn power_range(&self, home: &HomeId, device: &DeviceId) -> Option<(Power, Power)> {
        self(home, device)
    }
}

/// Watts of slack when checking setpoints against an envelope; setpoints are
/// truncated from watt-hour awards.
const SETPOINT_SLACK_W: i64 = 1;

/// Turns awards into device commands: awarded buys run at `+q/dt`, awarded
/// sells at `-q/dt`, and every device without an award is switched off.
pub fn emit_signals(
    result: &ClearingResult,
    interval_minutes: u32,
    envelope: &dyn Envelope,
) -> Result<Vec<ControlSignal>, AuctionError> {
    let interval = result.interval.unwrap_or_default();
    let mut net: BTreeMap<(HomeId, DeviceId), Energy> = BTreeMap::new();
    for award in &result.awards {
        let e = net
            .entry((award.bid.owner.clone(), award.bid.device.clone()))
            .or_default();
        match award.bid.side {
            Side::Buy => *e += award.awarded,
            Side::Sell => *e -= award.awarded,
        }
    }
    let mut signals = Vec::with_capacity(net.len());
    for ((home, device), energy) in net {
        let setpoint = energy.over_minutes(interval_minutes);
        if let Some((lo, hi)) = envelope.power_range(&home, &device) {
            if setpoint.watts() < lo.watts() - SETPOINT_SLACK_W
                || setpoint.watts() > hi.watts() + SETPOINT_SLACK_W
            {
                return Err(AuctionError::InfeasibleSetpoint {
                    home,
                    device,
                    setpoint: setpoint.watts(),
                    lo: lo.watts(),
                    hi: hi.watts(),
                });
            }
        }
        let command = if energy.is_zero() {
            Command::Off
        } else {
            Command::On
        };
        signals.push(ControlSignal {
            home,
            device,
            command,
            setpoint,
            interval,
        });
    }
    Ok(signals)
}

/// Builds both curves from a mixed book and clears it.
pub fn clear_book(bids: &[BidCurve]) -> Result<ClearingResult, AuctionError> {
    let (sells, buys): (Vec<BidCurve>, Vec<BidCurve>) =
        bids.iter().cloned().partition(|b| b.side == Side::Sell);
    let supply = build_curve(&sells, Side::Sell)?;
    let demand = build_curve(&buys, Side::Buy)?;
    clear(&supply, &demand)
}
