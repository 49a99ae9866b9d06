//! Per-interval bid construction for each device under the selfish or helpful
//! strategy.
//!
//! Selfish agents bid inflexibly (high prices, immediate consumption); helpful
//! agents trade comfort or timing for price. Every constructor returns
//! quantities that are feasible for the device in its current state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::der::{
    bess_feasible_range, ev_latest_flexible_time, BessParams, DerError, EvParams, StParams,
};
use crate::ids::{DeviceId, HomeId, IntervalId};
use crate::units::{Energy, Price};

/// Deviation at which a selfish thermostat will pay the price cap, °C.
pub const SELFISH_ST_CAP_DEVIATION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Selfish,
    Helpful,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    Buy,
    Sell,
}

/// One breakpoint of a step curve: up to `quantity` (cumulative) at `price`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BidPoint {
    pub quantity: Energy,
    pub price: Price,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BidCurve {
    pub side: Side,
    pub points: Vec<BidPoint>,
    pub owner: HomeId,
    pub device: DeviceId,
    pub interval: IntervalId,
}

/// Identifies a bid within an interval. A device may hold one bid per side.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BidKey {
    pub owner: HomeId,
    pub device: DeviceId,
    pub side: Side,
}

impl std::fmt::Display for BidKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let side = match self.side {
            Side::Buy => "buy",
            Side::Sell => "sell",
        };
        write!(f, "{}/{}/{}", self.owner, self.device, side)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CurveError {
    #[error("curve has no points")]
    Empty,
    #[error("cumulative quantities must be positive and strictly increasing (point {0})")]
    Quantity(usize),
    #[error("buy prices must not increase and sell prices must not decrease (point {0})")]
    PriceOrder(usize),
    #[error("price at point {index} outside [0, {cap}] m$/kWh")]
    PriceRange { index: usize, cap: i64 },
}

impl BidCurve {
    pub fn empty(side: Side, target: &BidTarget) -> BidCurve {
        BidCurve {
            side,
            points: Vec::new(),
            owner: target.owner.clone(),
            device: target.device.clone(),
            interval: target.interval,
        }
    }

    pub fn single(side: Side, quantity: Energy, price: Price, target: &BidTarget) -> BidCurve {
        let mut curve = BidCurve::empty(side, target);
        if quantity > Energy::ZERO {
            curve.points.push(BidPoint { quantity, price });
        }
        curve
    }

    pub fn key(&self) -> BidKey {
        BidKey {
            owner: self.owner.clone(),
            device: self.device.clone(),
            side: self.side,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_quantity(&self) -> Energy {
        self.points.last().map(|p| p.quantity).unwrap_or_default()
    }

    /// Increments of the step curve as `(quantity, price)` pairs.
    pub fn steps(&self) -> impl Iterator<Item = (Energy, Price)> + '_ {
        let mut prev = Energy::ZERO;
        self.points.iter().map(move |p| {
            let step = p.quantity - prev;
            prev = p.quantity;
            (step, p.price)
        })
    }

    /// Limit price of the first unit; the best price this bid offers.
    pub fn best_price(&self) -> Option<Price> {
        self.points.first().map(|p| p.price)
    }

    pub fn validate(&self, price_cap: Price) -> Result<(), CurveError> {
        if self.points.is_empty() {
            return Err(CurveError::Empty);
        }
        let mut prev_q = Energy::ZERO;
        for (i, p) in self.points.iter().enumerate() {
            if p.quantity <= prev_q {
                return Err(CurveError::Quantity(i));
            }
            prev_q = p.quantity;
            if p.price < Price::ZERO || p.price > price_cap {
                return Err(CurveError::PriceRange {
                    index: i,
                    cap: price_cap.millis(),
                });
            }
            if i > 0 {
                let before = self.points[i - 1].price;
                let ordered = match self.side {
                    Side::Buy => p.price <= before,
                    Side::Sell => p.price >= before,
                };
                if !ordered {
                    return Err(CurveError::PriceOrder(i));
                }
            }
        }
        Ok(())
    }
}

/// Who a bid is for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BidTarget {
    pub owner: HomeId,
    pub device: DeviceId,
    pub interval: IntervalId,
}

impl BidTarget {
    pub fn new(
        owner: impl Into<HomeId>,
        device: impl Into<DeviceId>,
        interval: IntervalId,
    ) -> Self {
        BidTarget {
            owner: owner.into(),
            device: device.into(),
            interval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TouPeriod {
    OffPeak,
    MidPeak,
    OnPeak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouWindow {
    /// Start of the window, hours after midnight.
    pub start: f64,
    /// End of the window; may be smaller than `start` to wrap past midnight.
    pub end: f64,
    pub period: TouPeriod,
    /// $/kWh
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TouError {
    #[error("time-of-use windows must cover each minute of the day exactly once (minute {0})")]
    Partition(u32),
    #[error("time-of-use prices must be positive")]
    NonPositivePrice,
    #[error("time-of-use prices must satisfy on-peak >= mid-peak >= off-peak")]
    PriceOrder,
    #[error("no time-of-use window for {0:?}")]
    MissingPeriod(TouPeriod),
}

/// A repeating daily retail price schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouSchedule {
    pub windows: Vec<TouWindow>,
}

impl Default for TouSchedule {
    /// Ontario-style winter weekday schedule; editable configuration.
    fn default() -> Self {
        let w = |start, end, period, price| TouWindow {
            start,
            end,
            period,
            price,
        };
        TouSchedule {
            windows: vec![
                w(19.0, 7.0, TouPeriod::OffPeak, 0.082),
                w(7.0, 11.0, TouPeriod::OnPeak, 0.170),
                w(11.0, 17.0, TouPeriod::MidPeak, 0.113),
                w(17.0, 19.0, TouPeriod::OnPeak, 0.170),
            ],
        }
    }
}

impl TouWindow {
    fn contains_minute(&self, minute_of_day: u32) -> bool {
        let m = f64::from(minute_of_day);
        let (s, e) = (self.start * 60.0, self.end * 60.0);
        if s <= e {
            m >= s && m < e
        } else {
            m >= s || m < e
        }
    }
}

impl TouSchedule {
    pub fn validate(&self) -> Result<(), TouError> {
        for minute in 0..24 * 60 {
            let n = self
                .windows
                .iter()
                .filter(|w| w.contains_minute(minute))
                .count();
            if n != 1 {
                return Err(TouError::Partition(minute));
            }
        }
        if self.windows.iter().any(|w| !(w.price > 0.0)) {
            return Err(TouError::NonPositivePrice);
        }
        let range = |p: TouPeriod| {
            let prices = self
                .windows
                .iter()
                .filter(|w| w.period == p)
                .map(|w| w.price);
            prices.fold(None, |acc: Option<(f64, f64)>, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
        };
        let off = range(TouPeriod::OffPeak);
        let mid = range(TouPeriod::MidPeak);
        let on = range(TouPeriod::OnPeak);
        if let (Some((_, off_hi)), Some((mid_lo, _))) = (off, mid) {
            if mid_lo < off_hi {
                return Err(TouError::PriceOrder);
            }
        }
        if let (Some((_, mid_hi)), Some((on_lo, _))) = (mid, on) {
            if on_lo < mid_hi {
                return Err(TouError::PriceOrder);
            }
        }
        if let (Some((_, off_hi)), Some((on_lo, _))) = (off, on) {
            if on_lo < off_hi {
                return Err(TouError::PriceOrder);
            }
        }
        Ok(())
    }

    fn window_at(&self, minute: i64) -> &TouWindow {
        let minute_of_day = minute.rem_euclid(24 * 60) as u32;
        self.windows
            .iter()
            .find(|w| w.contains_minute(minute_of_day))
            .expect("validated schedule covers the day")
    }

    /// Period in force at `minute` minutes after a midnight.
    pub fn period_at(&self, minute: i64) -> TouPeriod {
        self.window_at(minute).period
    }

    pub fn price_at(&self, minute: i64) -> Price {
        Price::from_dollars(self.window_at(minute).price)
    }

    /// Lowest price charged in `period` over the day.
    pub fn period_price(&self, period: TouPeriod) -> Result<Price, TouError> {
        self.windows
            .iter()
            .filter(|w| w.period == period)
            .map(|w| Price::from_dollars(w.price))
            .min()
            .ok_or(TouError::MissingPeriod(period))
    }
}

/// What a home knows about itself when it bids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalContext {
    /// Local PV forecast minus local load, floored at zero.
    pub excess_pv: Energy,
    /// Local load minus local generation, floored at zero.
    pub net_load: Energy,
    pub tou_period: TouPeriod,
    /// Grid retail price for the interval.
    pub tou_price: Price,
    /// Price at which local PV is offered.
    pub floor_price: Price,
    pub price_cap: Price,
}

impl LocalContext {
    /// Builds a context from energy forecasts for one interval.
    pub fn from_forecast(
        pv: Energy,
        load: Energy,
        tou_period: TouPeriod,
        tou_price: Price,
        floor_price: Price,
        price_cap: Price,
    ) -> LocalContext {
        LocalContext {
            excess_pv: (pv - load).max(Energy::ZERO),
            net_load: (load - pv).max(Energy::ZERO),
            tou_period,
            tou_price,
            floor_price,
            price_cap,
        }
    }
}

/// Limit price a thermostat offers at a temperature deviation `deviation`
/// above its setpoint.
pub fn st_price(
    strategy: Strategy,
    params: &StParams,
    deviation: f64,
    ctx: &LocalContext,
) -> Price {
    let cap_at = match strategy {
        Strategy::Selfish => SELFISH_ST_CAP_DEVIATION,
        Strategy::Helpful => params.deadband.max(SELFISH_ST_CAP_DEVIATION),
    };
    let base = ctx.floor_price.min(ctx.price_cap);
    let span = (ctx.price_cap - base).millis() as f64;
    let frac = (deviation.max(0.0) / cap_at).powi(2).min(1.0);
    let price = base + Price((span * frac).round() as i64);
    price.min(ctx.price_cap)
}

/// Cooling demand bid of a smart thermostat.
pub fn st_bid_curve(
    strategy: Strategy,
    params: &StParams,
    indoor: f64,
    interval: f64,
    ctx: &LocalContext,
    target: &BidTarget,
) -> BidCurve {
    let deviation = indoor - params.setpoint;
    if deviation <= 0.0 {
        return BidCurve::empty(Side::Buy, target);
    }
    let quantity = Energy::from_kwh_floor(params.hvac_power * interval);
    let price = st_price(strategy, params, deviation, ctx);
    BidCurve::single(Side::Buy, quantity, price, target)
}

/// Grid-side energy a selfish EV asks for this interval. The top-up to the
/// required SoC rounds up so that rounding never costs the departure target.
fn ev_selfish_quantity(params: &EvParams, soc: f64, interval: f64) -> Energy {
    let b = &params.battery;
    let to_req = Energy::from_kwh_ceil((params.soc_req - soc).max(0.0) / b.eta);
    let headroom = Energy::from_kwh_floor(bess_feasible_range(b, soc, interval).hi * interval);
    let full = Energy::from_kwh_floor(b.p_max * interval);
    full.min(to_req).min(headroom)
}

/// Charging bid of a plugged-in EV at time `now` (hours).
///
/// Selfish EVs ask for full power at the price cap from arrival. Helpful EVs
/// ramp their quantity from zero at arrival up to the selfish quantity at the
/// latest flexible time, priced at the grid rate, and bid exactly like a
/// selfish EV from then on.
pub fn ev_bid_curve(
    strategy: Strategy,
    params: &EvParams,
    soc: f64,
    now: f64,
    interval: f64,
    ctx: &LocalContext,
    target: &BidTarget,
) -> Result<BidCurve, DerError> {
    let full = ev_selfish_quantity(params, soc, interval);
    let selfish = BidCurve::single(Side::Buy, full, ctx.price_cap, target);
    if strategy == Strategy::Selfish {
        return Ok(selfish);
    }
    let latest = ev_latest_flexible_time(params, soc, interval, now)?;
    if now >= latest - crate::der::TOLERANCE || latest <= params.t_arr {
        return Ok(selfish);
    }
    let frac = ((now - params.t_arr) / (latest - params.t_arr)).clamp(0.0, 1.0);
    Ok(BidCurve::single(
        Side::Buy,
        Energy((full.wh() as f64 * frac).floor() as i64),
        ctx.tou_price,
        target,
    ))
}

/// Charge and discharge bids of a home battery.
///
/// Selfish: sell everything it can during on-peak hours just under the grid
/// rate; otherwise buy at the off-peak rate, at full power off-peak and up to
/// the local PV surplus at other times. Helpful: buy only local PV surplus,
/// just above the PV floor price, and sell up to the local net load at the
/// grid rate.
pub fn bess_bids(
    strategy: Strategy,
    params: &BessParams,
    soc: f64,
    ctx: &LocalContext,
    tou: &TouSchedule,
    interval: f64,
    target: &BidTarget,
) -> Result<Vec<BidCurve>, TouError> {
    let range = bess_feasible_range(params, soc, interval);
    let can_charge = Energy::from_kwh_floor(range.hi * interval);
    let can_discharge = Energy::from_kwh_floor(-range.lo * interval);
    let bid = |side, quantity: Energy, price: Price| {
        let curve = BidCurve::single(side, quantity, price, target);
        (!curve.is_empty()).then_some(curve)
    };
    let curve = match strategy {
        Strategy::Selfish => {
            let off_peak = tou.period_price(TouPeriod::OffPeak)?;
            match ctx.tou_period {
                TouPeriod::OnPeak => {
                    let price = (tou.period_price(TouPeriod::OnPeak)? - Price(1)).max(Price::ZERO);
                    bid(Side::Sell, can_discharge, price)
                }
                TouPeriod::OffPeak => bid(Side::Buy, can_charge, off_peak),
                TouPeriod::MidPeak if ctx.excess_pv > Energy::ZERO => {
                    bid(Side::Buy, can_charge.min(ctx.excess_pv), off_peak)
                }
                TouPeriod::MidPeak => None,
            }
        }
        Strategy::Helpful => {
            if ctx.excess_pv > Energy::ZERO {
                let price = (ctx.floor_price + Price(1)).min(ctx.price_cap);
                bid(Side::Buy, can_charge.min(ctx.excess_pv), price)
            } else if ctx.net_load > Energy::ZERO {
                bid(Side::Sell, can_discharge.min(ctx.net_load), ctx.tou_price)
            } else {
                None
            }
        }
    };
    Ok(curve.into_iter().collect())
}

/// Static PV offer: the whole forecast at the floor price.
pub fn pv_offer(forecast: Energy, floor_price: Price, target: &BidTarget) -> BidCurve {
    BidCurve::single(Side::Sell, forecast, floor_price, target)
}

/// Inflexible household load: the local net load at the grid rate, the most
/// the home would pay anyone for it.
pub fn load_bid(net_load: Energy, tou_price: Price, target: &BidTarget) -> BidCurve {
    BidCurve::single(Side::Buy, net_load, tou_price, target)
}
