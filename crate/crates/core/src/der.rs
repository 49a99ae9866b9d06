//! Discrete-time models and feasibility envelopes for home energy devices:
//! battery storage (BESS), electric vehicles, rooftop PV and smart thermostats.
//!
//! Units: power in kW, energy and state of charge in kWh, durations and
//! timestamps in hours. Positive battery power means charging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed when comparing floating-point SoC and power against limits.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DerError {
    #[error("invalid device parameters: {0}")]
    InvalidParams(&'static str),
    #[error("power {power} kW outside inverter limits [{min}, {max}]")]
    PowerLimit { power: f64, min: f64, max: f64 },
    #[error("state of charge {soc} kWh would leave [{min}, {max}]")]
    SocBound { soc: f64, min: f64, max: f64 },
    #[error("step length must be positive, got {0} h")]
    NonPositiveStep(f64),
    #[error(
        "EV cannot reach {required} kWh by departure: must start by {latest_start} h, now {now} h"
    )]
    InfeasibleDeadline {
        required: f64,
        latest_start: f64,
        now: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BessParams {
    /// Discharge limit, kW (≤ 0).
    pub p_min: f64,
    /// Charge limit, kW (≥ 0).
    pub p_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    /// Charge and discharge efficiency in (0, 1].
    pub eta: f64,
}

impl BessParams {
    pub fn validate(&self) -> Result<(), DerError> {
        if !(self.p_min <= 0.0 && self.p_max >= 0.0) {
            return Err(DerError::InvalidParams("require p_min <= 0 <= p_max"));
        }
        if !(self.soc_min >= 0.0 && self.soc_min < self.soc_max) {
            return Err(DerError::InvalidParams("require 0 <= soc_min < soc_max"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(DerError::InvalidParams("require 0 < eta <= 1"));
        }
        Ok(())
    }

    pub fn contains_soc(&self, soc: f64) -> bool {
        soc >= self.soc_min - TOLERANCE && soc <= self.soc_max + TOLERANCE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChargeMode {
    Charging,
    Discharging,
}

impl ChargeMode {
    /// Zero power counts as charging; the efficiency factor is then irrelevant.
    pub fn of_power(power: f64) -> ChargeMode {
        if power >= 0.0 {
            ChargeMode::Charging
        } else {
            ChargeMode::Discharging
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BessState {
    pub soc: f64,
    pub mode: ChargeMode,
}

/// EV battery plus its parking session. The EV only charges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvParams {
    pub battery: BessParams,
    /// SoC that must be reached by departure, kWh.
    pub soc_req: f64,
    pub t_arr: f64,
    pub t_dep: f64,
}

impl EvParams {
    pub fn validate(&self) -> Result<(), DerError> {
        self.battery.validate()?;
        if self.battery.p_min != 0.0 {
            return Err(DerError::InvalidParams("EV p_min must be 0 (charge only)"));
        }
        if !(self.battery.soc_min <= self.soc_req && self.soc_req <= self.battery.soc_max) {
            return Err(DerError::InvalidParams(
                "require soc_min <= soc_req <= soc_max",
            ));
        }
        if !(self.t_arr < self.t_dep) {
            return Err(DerError::InvalidParams("require t_arr < t_dep"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvParams {
    /// Nameplate rating, kW.
    pub p_rated: f64,
    /// Temperature derating slope, 1/°C.
    #[serde(default = "default_derate")]
    pub derate_coeff: f64,
    #[serde(default = "default_t_ref")]
    pub t_ref: f64,
    /// Inverter efficiency in (0, 1].
    pub psi: f64,
}

fn default_derate() -> f64 {
    0.005
}

fn default_t_ref() -> f64 {
    25.0
}

impl PvParams {
    pub fn validate(&self) -> Result<(), DerError> {
        if !(self.p_rated > 0.0) {
            return Err(DerError::InvalidParams("require p_rated > 0"));
        }
        if !(self.psi > 0.0 && self.psi <= 1.0) {
            return Err(DerError::InvalidParams("require 0 < psi <= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherSample {
    /// Normalized irradiance, kW/m².
    pub irradiance: f64,
    /// Ambient temperature, °C.
    pub temperature: f64,
}

/// First-order RC thermal model of a cooled home.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StParams {
    pub setpoint: f64,
    /// Tolerated deviation above the setpoint, °C.
    pub deadband: f64,
    /// °C/kW
    pub thermal_resistance: f64,
    /// kWh/°C
    pub thermal_capacitance: f64,
    /// Electrical draw of the HVAC when on, kW.
    pub hvac_power: f64,
    /// Heat removed per unit of electrical energy.
    #[serde(default = "default_cop")]
    pub cop: f64,
}

fn default_cop() -> f64 {
    3.0
}

impl StParams {
    pub fn validate(&self) -> Result<(), DerError> {
        let positive = [
            self.deadband,
            self.thermal_resistance,
            self.thermal_capacitance,
            self.hvac_power,
            self.cop,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(DerError::InvalidParams(
                "thermostat parameters must be positive",
            ));
        }
        Ok(())
    }

    /// Indoor temperature drop per hour of HVAC operation, °C/h.
    pub fn cooling_rate(&self) -> f64 {
        self.hvac_power * self.cop / self.thermal_capacitance
    }
}

/// Closed power interval `[lo, hi]` in kW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerRange {
    pub lo: f64,
    pub hi: f64,
}

impl PowerRange {
    pub fn contains(&self, power: f64) -> bool {
        power >= self.lo - TOLERANCE && power <= self.hi + TOLERANCE
    }
}

/// Advances a battery by one step at constant `power` for `dt` hours.
///
/// Charging stores `eta * power * dt`; discharging draws `power / eta * dt`
/// from storage. Results outside the SoC window are rejected, not clamped;
/// callers are expected to stay inside [`bess_feasible_range`].
pub fn bess_step(params: &BessParams, soc: f64, power: f64, dt: f64) -> Result<f64, DerError> {
    if !(dt > 0.0) {
        return Err(DerError::NonPositiveStep(dt));
    }
    if power < params.p_min - TOLERANCE || power > params.p_max + TOLERANCE {
        return Err(DerError::PowerLimit {
            power,
            min: params.p_min,
            max: params.p_max,
        });
    }
    let factor = match ChargeMode::of_power(power) {
        ChargeMode::Charging => params.eta,
        ChargeMode::Discharging => 1.0 / params.eta,
    };
    let next = soc + factor * power * dt;
    if !params.contains_soc(next) {
        return Err(DerError::SocBound {
            soc: next,
            min: params.soc_min,
            max: params.soc_max,
        });
    }
    Ok(next.clamp(params.soc_min, params.soc_max))
}

/// Power interval that keeps the next SoC inside its bounds.
pub fn bess_feasible_range(params: &BessParams, soc: f64, dt: f64) -> PowerRange {
    let headroom = (params.soc_max - soc).max(0.0);
    let available = (soc - params.soc_min).max(0.0);
    let hi = params.p_max.min(headroom / (params.eta * dt)).max(0.0);
    let lo = params.p_min.max(-available * params.eta / dt).min(0.0);
    PowerRange { lo, hi }
}

/// True when the EV leaves with at least its required SoC, up to
/// [`TOLERANCE`].
pub fn ev_departure_ok(params: &EvParams, soc_at_dep: f64) -> bool {
    soc_at_dep >= params.soc_req - TOLERANCE
}

/// Full-power charging time needed to reach `soc_req`, rounded up to whole
/// market intervals.
pub fn ev_charge_duration(params: &EvParams, soc: f64, interval: f64) -> f64 {
    let deficit = (params.soc_req - soc).max(0.0);
    if deficit == 0.0 {
        return 0.0;
    }
    let hours = deficit / (params.battery.eta * params.battery.p_max);
    // Guard against 2.0000000001 intervals from representation error.
    (hours / interval - 1e-9).ceil() * interval
}

/// Latest instant at which the EV may still defer charging (t_C,max). After
/// this point it must charge at full power to make its departure.
pub fn ev_latest_flexible_time(
    params: &EvParams,
    soc: f64,
    interval: f64,
    now: f64,
) -> Result<f64, DerError> {
    if !(interval > 0.0) {
        return Err(DerError::NonPositiveStep(interval));
    }
    let latest = params.t_dep - ev_charge_duration(params, soc, interval);
    if latest < now - TOLERANCE {
        return Err(DerError::InfeasibleDeadline {
            required: params.soc_req,
            latest_start: latest,
            now,
        });
    }
    Ok(latest)
}

/// Temperature derating factor, linear in ambient temperature and floored at 0.
pub fn pv_temperature_factor(params: &PvParams, temperature: f64) -> f64 {
    (1.0 - params.derate_coeff * (temperature - params.t_ref)).max(0.0)
}

/// AC output of a PV system in kW.
pub fn pv_power(params: &PvParams, w: &WeatherSample) -> f64 {
    let irradiance = w.irradiance.max(0.0);
    let dc = params.p_rated * irradiance * pv_temperature_factor(params, w.temperature);
    dc * params.psi
}

/// One step of the thermal model with HVAC fully on or off.
pub fn st_step(params: &StParams, indoor: f64, outdoor: f64, hvac_on: bool, dt: f64) -> f64 {
    st_step_duty(params, indoor, outdoor, if hvac_on { 1.0 } else { 0.0 }, dt)
}

/// One step with the HVAC running for a `duty` fraction of the step.
pub fn st_step_duty(params: &StParams, indoor: f64, outdoor: f64, duty: f64, dt: f64) -> f64 {
    let tau = params.thermal_resistance * params.thermal_capacitance;
    let drift = dt / tau * (outdoor - indoor);
    let cooling = duty.clamp(0.0, 1.0) * dt * params.cooling_rate();
    indoor + drift - cooling
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bess(eta: f64) -> BessParams {
        BessParams {
            p_min: -6.0,
            p_max: 6.0,
            soc_min: 5.0,
            soc_max: 50.0,
            eta,
        }
    }

    fn ev(soc_req: f64, eta: f64, p_max: f64) -> EvParams {
        EvParams {
            battery: BessParams {
                p_min: 0.0,
                p_max,
                soc_min: 0.0,
                soc_max: 60.0,
                eta,
            },
            soc_req,
            t_arr: 0.0,
            t_dep: 24.0,
        }
    }

    #[test]
    fn bess_step_examples() {
        assert!((bess_step(&bess(0.9), 10.0, 5.0, 1.0).unwrap() - 14.5).abs() < 1e-9);
        assert_eq!(bess_step(&bess(0.37), 10.0, 0.0, 1.0).unwrap(), 10.0);
        assert!((bess_step(&bess(0.8), 20.0, -4.0, 0.5).unwrap() - 17.5).abs() < 1e-9);
    }

    #[test]
    fn bess_step_rejects_limit_and_bound_violations() {
        assert!(matches!(
            bess_step(&bess(0.9), 10.0, 7.0, 1.0),
            Err(DerError::PowerLimit { .. })
        ));
        assert!(matches!(
            bess_step(&bess(0.9), 6.0, -6.0, 1.0),
            Err(DerError::SocBound { .. })
        ));
        assert!(matches!(
            bess_step(&bess(0.9), 10.0, 1.0, 0.0),
            Err(DerError::NonPositiveStep(_))
        ));
    }

    #[test]
    fn feasible_range_examples() {
        let r = bess_feasible_range(&bess(0.9), 50.0, 1.0);
        assert_eq!(r.hi, 0.0);
        let r = bess_feasible_range(&bess(0.9), 10.0, 1.0);
        assert!((r.lo + 4.5).abs() < 1e-9 && (r.hi - 6.0).abs() < 1e-9);
        let r = bess_feasible_range(&bess(0.9), 10.0, 10.0);
        assert!((r.lo + 0.45).abs() < 1e-9);
        assert!((r.hi - 40.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn feasible_range_degenerates_when_saturated_both_ways() {
        let p = BessParams {
            p_min: -1.0,
            p_max: 1.0,
            soc_min: 0.0,
            soc_max: 1e-12,
            eta: 1.0,
        };
        let r = bess_feasible_range(&p, 0.0, 1.0);
        assert_eq!(r.lo, 0.0);
        assert!(r.hi < 1e-9);
    }

    #[test]
    fn departure_check() {
        let p = ev(50.0, 0.9, 7.2);
        assert!(ev_departure_ok(&p, 50.0));
        assert!(!ev_departure_ok(&p, 49.9));
        assert!(ev_departure_ok(&p, 50.1));
        assert!(ev_departure_ok(&p, 50.0 - 1e-12));
        assert!(!ev_departure_ok(&p, 50.0 - 1e-6));
    }

    #[test]
    fn latest_flexible_time_examples() {
        let p = ev(50.0, 0.9, 7.2);
        let t = ev_latest_flexible_time(&p, 10.0, 1.0, 0.0).unwrap();
        assert!((t - (24.0 - 7.0)).abs() < 1e-9);
        assert_eq!(ev_latest_flexible_time(&p, 50.0, 1.0, 0.0).unwrap(), 24.0);
        let p = ev(40.0, 1.0, 8.0);
        assert!((ev_charge_duration(&p, 36.0, 0.25) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn latest_flexible_time_rejects_missed_deadline() {
        let p = ev(50.0, 0.9, 7.2);
        assert!(matches!(
            ev_latest_flexible_time(&p, 10.0, 1.0, 20.0),
            Err(DerError::InfeasibleDeadline { .. })
        ));
    }

    #[test]
    fn pv_examples() {
        let p = PvParams {
            p_rated: 10.0,
            derate_coeff: 0.005,
            t_ref: 25.0,
            psi: 0.95,
        };
        let dark = WeatherSample {
            irradiance: 0.0,
            temperature: 25.0,
        };
        assert_eq!(pv_power(&p, &dark), 0.0);
        let mild = WeatherSample {
            irradiance: 0.8,
            temperature: 25.0,
        };
        assert!((pv_power(&p, &mild) - 7.6).abs() < 1e-9);
        let hot = WeatherSample {
            irradiance: 0.8,
            temperature: 45.0,
        };
        assert!((pv_power(&p, &hot) - 6.84).abs() < 1e-9);
    }

    fn st() -> StParams {
        StParams {
            setpoint: 22.0,
            deadband: 1.0,
            thermal_resistance: 2.0,
            thermal_capacitance: 10.0,
            hvac_power: 3.0,
            cop: 3.0,
        }
    }

    #[test]
    fn thermostat_examples() {
        assert_eq!(st_step(&st(), 22.0, 22.0, false, 0.25), 22.0);
        assert!(st_step(&st(), 20.0, 30.0, false, 0.25) > 20.0);
        // 24 + 0.25/20*(30-24) - 0.25*3*3/10, evaluated offline.
        assert!((st_step(&st(), 24.0, 30.0, true, 0.25) - 23.85).abs() < 1e-9);
    }

    #[test]
    fn ev_params_validation() {
        let mut p = ev(50.0, 0.9, 7.2);
        assert!(p.validate().is_ok());
        p.battery.p_min = -1.0;
        assert!(p.validate().is_err());
        let mut p = ev(70.0, 0.9, 7.2);
        assert!(p.validate().is_err());
        p.soc_req = 50.0;
        p.t_dep = p.t_arr;
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn feasible_powers_keep_soc_in_bounds(
            soc0 in 5.0f64..50.0,
            fracs in proptest::collection::vec(0.0f64..1.0, 1..40),
            eta in 0.5f64..1.0,
            dt in 0.05f64..2.0,
        ) {
            let p = bess(eta);
            let mut soc = soc0;
            for f in fracs {
                let r = bess_feasible_range(&p, soc, dt);
                let power = r.lo + f * (r.hi - r.lo);
                soc = bess_step(&p, soc, power, dt).unwrap();
                prop_assert!(soc >= p.soc_min && soc <= p.soc_max);
            }
        }

        #[test]
        fn round_trip_loses_energy(soc in 20.0f64..30.0, e in 0.1f64..5.0, eta in 0.5f64..0.999) {
            let p = bess(eta);
            let charged = bess_step(&p, soc, e, 1.0).unwrap();
            let back = bess_step(&p, charged, -e, 1.0).unwrap();
            let expected_loss = e * (1.0 / eta - eta);
            prop_assert!(back < soc);
            prop_assert!(((soc - back) - expected_loss).abs() < 1e-9);
        }

        #[test]
        fn half_steps_equal_full_step(soc in 10.0f64..40.0, power in -3.0f64..3.0, dt in 0.1f64..1.0) {
            let p = bess(0.9);
            let full = bess_step(&p, soc, power, dt).unwrap();
            let half = bess_step(&p, soc, power, dt / 2.0).unwrap();
            let two = bess_step(&p, half, power, dt / 2.0).unwrap();
            prop_assert!((full - two).abs() < 1e-9);
        }

        #[test]
        fn pv_is_monotone(i1 in 0.0f64..1.2, i2 in 0.0f64..1.2, t1 in 25.0f64..80.0, t2 in 25.0f64..80.0) {
            let p = PvParams { p_rated: 5.0, derate_coeff: 0.005, t_ref: 25.0, psi: 0.96 };
            let (lo_i, hi_i) = if i1 <= i2 { (i1, i2) } else { (i2, i1) };
            let (lo_t, hi_t) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = pv_power(&p, &WeatherSample { irradiance: lo_i, temperature: 30.0 });
            let b = pv_power(&p, &WeatherSample { irradiance: hi_i, temperature: 30.0 });
            prop_assert!(a <= b);
            let c = pv_power(&p, &WeatherSample { irradiance: 0.9, temperature: lo_t });
            let d = pv_power(&p, &WeatherSample { irradiance: 0.9, temperature: hi_t });
            prop_assert!(d <= c);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn lower_soc_means_earlier_deadline(s1 in 0.0f64..50.0, s2 in 0.0f64..50.0) {
            let p = ev(50.0, 0.9, 7.2);
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let a = ev_latest_flexible_time(&p, lo, 0.25, 0.0).unwrap();
            let b = ev_latest_flexible_time(&p, hi, 0.25, 0.0).unwrap();
            prop_assert!(a <= b);
        }
    }
}
