//! Current-profile generators for the standard experiment designs.
//!
//! All rates are C-rates relative to `capacity` in Ah; positive rates
//! discharge the cell, so the generated currents are `-rate * capacity`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{Ambient, CurrentProfile, Interpolation};

pub const DEFAULT_AMBIENT: f64 = 298.15;

/// eVTOL phase rates: takeoff, cruise, landing.
pub const EVTOL_RATES: [f64; 3] = [5.0, 1.48, 5.0];

const UDDS_TEMPLATE: &str = include_str!("../data/udds_template.csv");

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidProfile(format!("{name} = {v} must be positive")))
    }
}

fn check_rate(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidProfile(format!("rate {v} must be finite")))
    }
}

fn constant_ambient(samples: Vec<(f64, f64)>, interpolation: Interpolation) -> Result<CurrentProfile> {
    CurrentProfile::new(samples, interpolation, Ambient::Constant(DEFAULT_AMBIENT))
}

/// Constant discharge at `rate_c` for `duration` seconds.
pub fn gen_constant(rate_c: f64, duration: f64, capacity: f64) -> Result<CurrentProfile> {
    check_rate(rate_c)?;
    check_positive("duration", duration)?;
    check_positive("capacity", capacity)?;
    let i = -rate_c * capacity;
    constant_ambient(vec![(0.0, i), (duration, i)], Interpolation::HoldPrevious)
}

/// `count` discharge pulses of `pulse_s` seconds, each followed by a rest of
/// `rest_s` seconds.
pub fn gen_pulse_train(rate_c: f64, pulse_s: f64, rest_s: f64, count: usize, capacity: f64) -> Result<CurrentProfile> {
    check_rate(rate_c)?;
    check_positive("pulse_s", pulse_s)?;
    check_positive("rest_s", rest_s)?;
    check_positive("capacity", capacity)?;
    if count == 0 {
        return Err(Error::InvalidProfile("pulse count must be >= 1".into()));
    }
    let i = -rate_c * capacity;
    let period = pulse_s + rest_s;
    let mut samples = Vec::with_capacity(2 * count + 1);
    for k in 0..count {
        let start = k as f64 * period;
        samples.push((start, i));
        samples.push((start + pulse_s, 0.0));
    }
    samples.push((count as f64 * period, 0.0));
    constant_ambient(samples, Interpolation::HoldPrevious)
}

/// Constant-current charge for `cc_s` seconds, then a current tapering as
/// `exp(-t / tau_s)` for `taper_s` seconds, sampled every 10 s.
pub fn gen_cc_cv_charge(rate_c: f64, capacity: f64, cc_s: f64, taper_s: f64, tau_s: f64) -> Result<CurrentProfile> {
    check_rate(rate_c)?;
    check_positive("capacity", capacity)?;
    check_positive("cc_s", cc_s)?;
    check_positive("tau_s", tau_s)?;
    if !(taper_s.is_finite() && taper_s >= 0.0) {
        return Err(Error::InvalidProfile(format!("taper_s = {taper_s} must be >= 0")));
    }
    let i = rate_c.abs() * capacity;
    let mut samples = vec![(0.0, i), (cc_s, i)];
    let taper_step_s = 10.0;
    let n = (taper_s / taper_step_s).ceil() as usize;
    for k in 1..=n {
        let t = (k as f64 * taper_step_s).min(taper_s);
        samples.push((cc_s + t, i * (-t / tau_s).exp()));
    }
    constant_ambient(samples, Interpolation::Linear)
}

/// Takeoff, cruise, and landing discharge at 5 C, 1.48 C, and 5 C. A zero
/// cruise duration yields a two-phase profile.
pub fn gen_evtol_mission(capacity: f64, takeoff_s: f64, cruise_s: f64, landing_s: f64) -> Result<CurrentProfile> {
    check_positive("capacity", capacity)?;
    check_positive("takeoff_s", takeoff_s)?;
    check_positive("landing_s", landing_s)?;
    if !(cruise_s.is_finite() && cruise_s >= 0.0) {
        return Err(Error::InvalidProfile(format!("cruise_s = {cruise_s} must be >= 0")));
    }
    let [up, cruise, down] = EVTOL_RATES.map(|r| -r * capacity);
    let mut samples = vec![(0.0, up)];
    if cruise_s > 0.0 {
        samples.push((takeoff_s, cruise));
    }
    samples.push((takeoff_s + cruise_s, down));
    samples.push((takeoff_s + cruise_s + landing_s, down));
    constant_ambient(samples, Interpolation::HoldPrevious)
}

/// The bundled drive-cycle load template: `(time, load)` with load
/// normalized so the peak traction demand is 1 and regenerative braking is
/// negative.
pub fn udds_template() -> Vec<(f64, f64)> {
    UDDS_TEMPLATE
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (t, v) = l.split_once(',').expect("template rows have two columns");
            (
                t.trim().parse().expect("template time"),
                v.trim().parse().expect("template load"),
            )
        })
        .collect()
}

/// The drive-cycle template repeated `cycles` times and mapped affinely so
/// that peak traction draws `low_c` (a negative C-rate, discharge) and peak
/// regeneration returns `high_c`. Linear interpolation between samples.
pub fn gen_udds_like(low_c: f64, high_c: f64, capacity: f64, cycles: usize) -> Result<CurrentProfile> {
    check_rate(low_c)?;
    check_rate(high_c)?;
    check_positive("capacity", capacity)?;
    if low_c > high_c {
        return Err(Error::InvalidProfile(format!(
            "low rate {low_c} C exceeds high rate {high_c} C"
        )));
    }
    if cycles == 0 {
        return Err(Error::InvalidProfile("cycles must be >= 1".into()));
    }
    let template = udds_template();
    let (lo, hi) = template
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let map = |load: f64| capacity * (high_c + (load - lo) / (hi - lo) * (low_c - high_c));
    let period = template[template.len() - 1].0 + (template[1].0 - template[0].0);
    let mut samples = Vec::with_capacity(template.len() * cycles);
    for c in 0..cycles {
        let offset = c as f64 * period;
        samples.extend(template.iter().map(|&(t, l)| (t + offset, map(l))));
    }
    constant_ambient(samples, Interpolation::Linear)
}

/// A profile description that can be turned into a [`CurrentProfile`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProfileSpec {
    Constant {
        rate_c: f64,
        duration_s: f64,
    },
    PulseTrain {
        rate_c: f64,
        pulse_s: f64,
        rest_s: f64,
        count: usize,
    },
    CcCvCharge {
        rate_c: f64,
        cc_s: f64,
        taper_s: f64,
        tau_s: f64,
    },
    UddsLike {
        low_c: f64,
        high_c: f64,
        cycles: usize,
    },
    EvtolMission {
        takeoff_s: f64,
        cruise_s: f64,
        landing_s: f64,
    },
}

impl ProfileSpec {
    pub fn build(&self, capacity: f64) -> Result<CurrentProfile> {
        match *self {
            ProfileSpec::Constant { rate_c, duration_s } => gen_constant(rate_c, duration_s, capacity),
            ProfileSpec::PulseTrain {
                rate_c,
                pulse_s,
                rest_s,
                count,
            } => gen_pulse_train(rate_c, pulse_s, rest_s, count, capacity),
            ProfileSpec::CcCvCharge {
                rate_c,
                cc_s,
                taper_s,
                tau_s,
            } => gen_cc_cv_charge(rate_c, capacity, cc_s, taper_s, tau_s),
            ProfileSpec::UddsLike { low_c, high_c, cycles } => gen_udds_like(low_c, high_c, capacity, cycles),
            ProfileSpec::EvtolMission {
                takeoff_s,
                cruise_s,
                landing_s,
            } => gen_evtol_mission(capacity, takeoff_s, cruise_s, landing_s),
        }
    }

    /// Parses a compact form such as `constant:1C`, `constant:0.5C:3600`,
    /// `pulse:0.5C:300:7200:12`, `evtol`, `evtol:90:1200:90`,
    /// `udds:-8:5:4` or `cccv:1C:3000:1800:600`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || Error::InvalidProfile(format!("cannot parse profile spec `{text}`"));
        let num = |s: &str| -> Result<f64> { s.trim().trim_end_matches(['C', 'c']).parse().map_err(|_| bad()) };
        let count = |s: &str| -> Result<usize> { s.trim().parse().map_err(|_| bad()) };
        match parts.as_slice() {
            ["constant", rate] => {
                let rate_c = num(rate)?;
                // Long enough to reach a cutoff at any non-trivial rate.
                let duration_s = if rate_c.abs() > 1e-9 {
                    1.5 * 3600.0 / rate_c.abs()
                } else {
                    3600.0
                };
                Ok(ProfileSpec::Constant { rate_c, duration_s })
            }
            ["constant", rate, dur] => Ok(ProfileSpec::Constant {
                rate_c: num(rate)?,
                duration_s: num(dur)?,
            }),
            ["pulse", rate, pulse, rest, n] => Ok(ProfileSpec::PulseTrain {
                rate_c: num(rate)?,
                pulse_s: num(pulse)?,
                rest_s: num(rest)?,
                count: count(n)?,
            }),
            ["pulse"] => Ok(ProfileSpec::PulseTrain {
                rate_c: 0.5,
                pulse_s: 300.0,
                rest_s: 7200.0,
                count: 12,
            }),
            ["evtol"] => Ok(ProfileSpec::EvtolMission {
                takeoff_s: 90.0,
                cruise_s: 1200.0,
                landing_s: 90.0,
            }),
            ["evtol", a, b, c] => Ok(ProfileSpec::EvtolMission {
                takeoff_s: num(a)?,
                cruise_s: num(b)?,
                landing_s: num(c)?,
            }),
            ["udds"] => Ok(ProfileSpec::UddsLike {
                low_c: -8.0,
                high_c: 5.0,
                cycles: 10,
            }),
            ["udds", lo, hi, n] => Ok(ProfileSpec::UddsLike {
                low_c: num(lo)?,
                high_c: num(hi)?,
                cycles: count(n)?,
            }),
            ["cccv", rate, cc, taper, tau] => Ok(ProfileSpec::CcCvCharge {
                rate_c: num(rate)?,
                cc_s: num(cc)?,
                taper_s: num(taper)?,
                tau_s: num(tau)?,
            }),
            _ => Err(bad()),
        }
    }
}
