//! Synthetic identification experiments simulated from known parameters.
//!
//! Every record is produced with [`simulate_at`] on an explicit sample grid
//! that contains all current breakpoints, so replaying a record through the
//! model with the generating parameters reproduces it exactly.

use serde::{Deserialize, Serialize};

use crate::dataset::{perturb, Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::identification::Experiments;
use crate::model::ModelParams;
use crate::profiles::{gen_constant, gen_pulse_train, DEFAULT_AMBIENT};
use crate::simulator::{
    discharge_current, initial_state_from_soc, simulate, simulate_at, Ambient, CurrentProfile, InitialCondition,
    Interpolation, SimOptions, Termination,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    /// Capacity used to convert C-rates to amperes.
    pub nominal_capacity_ah: f64,
    pub t_amb: f64,
    pub step: f64,
    /// Sample spacing of the OCV, pulse, solid and thermal records.
    pub sample_interval: f64,
    /// Sample spacing of the high-rate records.
    pub fast_sample_interval: f64,
    pub trickle_c: f64,
    pub ocv_rest_s: f64,
    /// Fraction of the discharged charge put back by the OCV charge leg.
    pub ocv_recharge_fraction: f64,
    pub pulse_c: f64,
    pub pulse_s: f64,
    pub pulse_rest_s: f64,
    /// Upper limit on pulses; fewer are used if the cell would hit cutoff.
    pub pulse_count: usize,
    pub solid_c: f64,
    pub thermal_c: f64,
    pub electrolyte_c: f64,
}

impl Default for Design {
    fn default() -> Self {
        Self {
            nominal_capacity_ah: 2.5,
            t_amb: DEFAULT_AMBIENT,
            step: 0.1,
            sample_interval: 10.0,
            fast_sample_interval: 2.0,
            trickle_c: 1.0 / 30.0,
            ocv_rest_s: 3600.0,
            ocv_recharge_fraction: 0.99,
            pulse_c: 0.5,
            pulse_s: 300.0,
            pulse_rest_s: 7200.0,
            pulse_count: 24,
            solid_c: 0.5,
            thermal_c: 2.0,
            electrolyte_c: 3.0,
        }
    }
}

impl Design {
    fn meta(&self, params: &ModelParams, soc0: f64) -> DatasetMeta {
        // Coulomb counting uses the cell's actual capacity, as a capacity
        // test before the experiments would measure it.
        DatasetMeta {
            capacity_ah: params.capacity_ah(),
            t_amb: self.t_amb,
            soc0,
        }
    }
}

/// Samples `profile` on `times` (relative to its start) from a rested cell
/// at `soc0`.
pub fn record(
    profile: &CurrentProfile,
    params: &ModelParams,
    soc0: f64,
    times: &[f64],
    design: &Design,
) -> Result<Dataset> {
    let initial = initial_state_from_soc(soc0, design.t_amb, params)?;
    let trace = simulate_at(profile, params, &initial, times, design.step)?;
    Dataset::from_trace(&trace, design.meta(params, soc0))
}

/// Time until the voltage cutoff under constant `rate_c` discharge from
/// `soc0`, rounded down to a multiple of `interval`.
pub fn time_to_cutoff(params: &ModelParams, rate_c: f64, soc0: f64, interval: f64, design: &Design) -> Result<f64> {
    let current = discharge_current(rate_c, design.nominal_capacity_ah);
    let horizon = 1.5 * 3600.0 * params.capacity_ah() / current.abs();
    let profile = CurrentProfile::constant(current, horizon, design.t_amb)?;
    let trace = simulate(
        &profile,
        params,
        &SimOptions {
            step: design.step,
            output_interval: interval.max(design.step),
            initial: InitialCondition::Soc(soc0),
            ..SimOptions::default()
        },
    )?;
    if trace.termination != Termination::LowCutoff {
        return Err(Error::InvalidProfile(format!(
            "{rate_c} C discharge ended by {:?} instead of the low cutoff",
            trace.termination
        )));
    }
    Ok((trace.duration() / interval).floor() * interval)
}

fn grid(end: f64, interval: f64) -> Vec<f64> {
    let n = (end / interval).floor() as usize;
    let mut t: Vec<f64> = (0..=n).map(|k| k as f64 * interval).collect();
    if end - t[n] > 1e-9 {
        t.push(end);
    }
    t
}

/// Adds a sample one integration step before every breakpoint so that each
/// current step is bracketed by adjacent samples.
fn with_edge_samples(mut times: Vec<f64>, breakpoints: &[f64], step: f64) -> Vec<f64> {
    for &b in breakpoints {
        if b > step {
            times.push(b - step);
            times.push(b);
        }
    }
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    times
}

/// Constant-current discharge from `soc0` to the cutoff.
pub fn constant_discharge(
    params: &ModelParams,
    rate_c: f64,
    soc0: f64,
    interval: f64,
    design: &Design,
) -> Result<Dataset> {
    let end = time_to_cutoff(params, rate_c, soc0, interval, design)?;
    let profile =
        gen_constant(rate_c, end, design.nominal_capacity_ah)?.with_ambient(Ambient::Constant(design.t_amb))?;
    record(&profile, params, soc0, &grid(end, interval), design)
}

/// Trickle discharge from full to the cutoff, a rest, and a trickle charge
/// returning most of the charge.
pub fn ocv_experiment(params: &ModelParams, design: &Design) -> Result<Dataset> {
    let dt = design.sample_interval;
    let discharge_s = time_to_cutoff(params, design.trickle_c, 1.0, dt, design)?;
    let charge_s = ((discharge_s * design.ocv_recharge_fraction) / dt).floor() * dt;
    let i = discharge_current(design.trickle_c, design.nominal_capacity_ah);
    let t1 = discharge_s;
    let t2 = t1 + design.ocv_rest_s;
    let end = t2 + charge_s;
    let profile = CurrentProfile::new(
        vec![(0.0, i), (t1, 0.0), (t2, -i), (end, -i)],
        Interpolation::HoldPrevious,
        Ambient::Constant(design.t_amb),
    )?;
    record(&profile, params, 1.0, &grid(end, dt), design)
}

/// Discharge pulses separated by long rests, starting full. The pulse
/// count is reduced until the train completes without reaching cutoff.
pub fn pulse_experiment(params: &ModelParams, design: &Design) -> Result<Dataset> {
    let mut count = design.pulse_count;
    loop {
        if count == 0 {
            return Err(Error::InvalidProfile("no pulse fits before the cutoff".into()));
        }
        let profile = gen_pulse_train(
            design.pulse_c,
            design.pulse_s,
            design.pulse_rest_s,
            count,
            design.nominal_capacity_ah,
        )?
        .with_ambient(Ambient::Constant(design.t_amb))?;
        let check = simulate(
            &profile,
            params,
            &SimOptions {
                step: design.step,
                output_interval: design.sample_interval,
                initial: InitialCondition::Soc(1.0),
                ..SimOptions::default()
            },
        )?;
        if check.termination == Termination::ProfileEnd {
            let breaks: Vec<f64> = profile.samples().iter().map(|s| s.0).collect();
            let end = profile.duration();
            let times = with_edge_samples(grid(end, design.sample_interval), &breaks, design.step);
            return record(&profile, params, 1.0, &times, design);
        }
        count -= 1;
    }
}

/// All five identification records from a full cell at `design.t_amb`.
pub fn experiments(params: &ModelParams, design: &Design) -> Result<Experiments> {
    Ok(Experiments {
        ocv: ocv_experiment(params, design)?,
        pulse: pulse_experiment(params, design)?,
        solid: constant_discharge(params, design.solid_c, 1.0, design.sample_interval, design)?,
        thermal: constant_discharge(params, design.thermal_c, 1.0, design.sample_interval, design)?,
        electrolyte: constant_discharge(params, design.electrolyte_c, 1.0, design.fast_sample_interval, design)?,
    })
}

/// Gaussian measurement noise on every record, each with its own stream
/// derived from `seed`.
pub fn noisy(data: &Experiments, voltage_sigma: f64, temp_sigma: f64, seed: u64) -> Result<Experiments> {
    let p = |d: &Dataset, k: u64| perturb(d, voltage_sigma, temp_sigma, seed.wrapping_mul(31).wrapping_add(k));
    Ok(Experiments {
        ocv: p(&data.ocv, 1)?,
        pulse: p(&data.pulse, 2)?,
        solid: p(&data.solid, 3)?,
        thermal: p(&data.thermal, 4)?,
        electrolyte: p(&data.electrolyte, 5)?,
    })
}
