//! Fixed-point quantities shared by the market and the ledger.
//!
//! Energy is counted in whole watt-hours, prices in milli-dollars per kWh and
//! money in micro-dollars, so that `price * energy` is exact:
//! `(1e-3 $/kWh) * (1 Wh) = 1e-6 $`.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

/// Energy in watt-hours.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Energy(pub i64);

/// Price in milli-dollars per kWh.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Price(pub i64);

/// Money in micro-dollars.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Money(pub i64);

/// Power in watts.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Power(pub i64);

impl Energy {
    pub const ZERO: Energy = Energy(0);

    pub fn wh(self) -> i64 {
        self.0
    }

    /// Rounds down to whole watt-hours, so a feasible kWh bound stays feasible.
    pub fn from_kwh_floor(kwh: f64) -> Energy {
        if !kwh.is_finite() || kwh <= 0.0 {
            return Energy::ZERO;
        }
        // Absorb representation noise such as 2.9999999999 kWh.
        Energy(((kwh * 1000.0) + 1e-6).floor() as i64)
    }

    /// Rounds up to whole watt-hours, so a requirement is never undershot.
    pub fn from_kwh_ceil(kwh: f64) -> Energy {
        if !kwh.is_finite() || kwh <= 0.0 {
            return Energy::ZERO;
        }
        Energy(((kwh * 1000.0) - 1e-6).ceil() as i64)
    }

    pub fn from_kwh_round(kwh: f64) -> Energy {
        Energy((kwh * 1000.0).round() as i64)
    }

    pub fn kwh(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn min(self, other: Energy) -> Energy {
        Energy(self.0.min(other.0))
    }

    pub fn max(self, other: Energy) -> Energy {
        Energy(self.0.max(other.0))
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Average power over an interval of `minutes`, truncated toward zero.
    pub fn over_minutes(self, minutes: u32) -> Power {
        Power(self.0 * 60 / i64::from(minutes.max(1)))
    }
}

impl Price {
    pub const ZERO: Price = Price(0);

    pub fn millis(self) -> i64 {
        self.0
    }

    /// Converts $/kWh to the nearest milli-dollar.
    pub fn from_dollars(dollars_per_kwh: f64) -> Price {
        Price((dollars_per_kwh * 1000.0).round() as i64)
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Floor of the midpoint; exact whenever the two prices share parity.
    pub fn midpoint(self, other: Price) -> Price {
        Price((self.0 + other.0).div_euclid(2))
    }

    /// Cost of `energy` at this price.
    pub fn times(self, energy: Energy) -> Money {
        Money(self.0 * energy.0)
    }
}

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn micros(self) -> i64 {
        self.0
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }
}

impl Power {
    pub fn watts(self) -> i64 {
        self.0
    }

    pub fn kw(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

macro_rules! additive {
    ($t:ident) => {
        impl Add for $t {
            type Output = $t;
            fn add(self, rhs: $t) -> $t {
                $t(self.0 + rhs.0)
            }
        }
        impl Sub for $t {
            type Output = $t;
            fn sub(self, rhs: $t) -> $t {
                $t(self.0 - rhs.0)
            }
        }
        impl AddAssign for $t {
            fn add_assign(&mut self, rhs: $t) {
                self.0 += rhs.0;
            }
        }
        impl SubAssign for $t {
            fn sub_assign(&mut self, rhs: $t) {
                self.0 -= rhs.0;
            }
        }
        impl Neg for $t {
            type Output = $t;
            fn neg(self) -> $t {
                $t(-self.0)
            }
        }
        impl Sum for $t {
            fn sum<I: Iterator<Item = $t>>(iter: I) -> $t {
                $t(iter.map(|v| v.0).sum())
            }
        }
        impl<'a> Sum<&'a $t> for $t {
            fn sum<I: Iterator<Item = &'a $t>>(iter: I) -> $t {
                $t(iter.map(|v| v.0).sum())
            }
        }
    };
}

additive!(Energy);
additive!(Price);
additive!(Money);
additive!(Power);

impl fmt::Display for Energy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} kWh", self.kwh())
    }
}

impl fmt::Display for Price {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${:.3}/kWh", self.dollars())
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${:.6}", self.dollars())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_conversion_never_rounds_up() {
        assert_eq!(Energy::from_kwh_floor(4.4444), Energy(4444));
        assert_eq!(Energy::from_kwh_floor(3.0), Energy(3000));
        assert_eq!(Energy::from_kwh_floor(0.1 + 0.2), Energy(300));
        assert_eq!(Energy::from_kwh_floor(-1.0), Energy::ZERO);
    }

    #[test]
    fn price_times_energy_is_micro_dollars() {
        // 1 kWh at $0.08 is 80_000 micro-dollars.
        assert_eq!(Price::from_dollars(0.08).times(Energy(1000)), Money(80_000));
    }

    #[test]
    fn midpoint_floors_odd_sums() {
        assert_eq!(Price(50).midpoint(Price(110)), Price(80));
        assert_eq!(Price(50).midpoint(Price(55)), Price(52));
    }

    #[test]
    fn energy_over_interval_is_average_power() {
        assert_eq!(Energy(3000).over_minutes(30), Power(6000));
        assert_eq!(Energy(-3000).over_minutes(60), Power(-3000));
    }
}
