//! Step 5: electrolyte ladder, electrolyte potential scale, and Arrhenius
//! exponents from a high-rate discharge.
//!
//! For each `(kappa1, kappa2)` grid cell the full model is replayed once to
//! obtain the solid and thermal response, which does not depend on the
//! electrolyte group. The electrolyte ladder has no temperature dependence,
//! so its voltages follow exactly from the closed form on each
//! constant-current segment, and the inner fit over `(C_e, R_e, beta1,
//! beta2)` needs no further simulation.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nls::{bounded_nls, FitResult, NlsOptions, ParamBound, ParamBounds, Residual};
use super::{
    apply_fit, params_with, require_groups, GROUP_ELECTROLYTE, GROUP_OCV, GROUP_RO, GROUP_SOLID, GROUP_THERMAL,
};
use crate::analytic::build_omega_e;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{ocv_unchecked, r_o_t, ModelParams, ELECTROLYTE_EQUILIBRIUM};
use crate::simulator::simulate_at;

/// Peak electrolyte potential, in volts, below which the electrolyte group
/// is reported as not identifiable from the record.
pub const UE_NOISE_FLOOR: f64 = 0.025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaGrid {
    pub kappa1: Vec<f64>,
    pub kappa2: Vec<f64>,
}

impl KappaGrid {
    /// `n` log-spaced values over `[lo, hi]` on each axis.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo && n >= 1) {
            return Err(Error::InvalidOptions(format!("bad kappa grid {lo}..{hi} x {n}")));
        }
        let axis: Vec<f64> = (0..n)
            .map(|k| {
                if k == 0 {
                    lo
                } else if k == n - 1 {
                    hi
                } else {
                    (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp()
                }
            })
            .collect();
        Ok(Self {
            kappa1: axis.clone(),
            kappa2: axis,
        })
    }

    /// 8 x 8 log-spaced over the bounds of `kappa1` and `kappa2`.
    pub fn default_for(bounds: &ParamBounds) -> Result<Self> {
        let axis = |name: &str| -> Result<Vec<f64>> {
            let b = bounds
                .get(name)
                .ok_or_else(|| Error::param(name, "missing from bounds"))?;
            Ok(Self::log_spaced(b.lower.max(1e-9), b.upper, 8)?.kappa1)
        };
        Ok(Self {
            kappa1: axis("kappa1")?,
            kappa2: axis("kappa2")?,
        })
    }

    fn cells(&self) -> Vec<(f64, f64)> {
        self.kappa1
            .iter()
            .flat_map(|&a| self.kappa2.iter().map(move |&b| (a, b)))
            .collect()
    }

    fn check_within(&self, bounds: &ParamBounds) -> Result<()> {
        for (name, axis) in [("kappa1", &self.kappa1), ("kappa2", &self.kappa2)] {
            let b = bounds
                .get(name)
                .ok_or_else(|| Error::param(name, "missing from bounds"))?;
            if axis.is_empty() {
                return Err(Error::InvalidOptions(format!("empty {name} grid")));
            }
            if let Some(v) = axis.iter().find(|v| !(b.lower <= **v && **v <= b.upper)) {
                return Err(Error::InvalidOptions(format!(
                    "{name} grid value {v} outside bounds [{}, {}]",
                    b.lower, b.upper
                )));
            }
        }
        Ok(())
    }
}

/// `U_s(V_s1) + R_o,T I` at every sample from a full replay with `params`.
fn base_voltage(data: &Dataset, params: &ModelParams, step: f64) -> Result<Vec<f64>> {
    let trace = simulate_at(
        &data.profile()?,
        params,
        &data.initial_state(params.n_solid_nodes),
        &data.relative_times(),
        step,
    )?;
    trace
        .rows
        .iter()
        .map(|r| {
            let us = ocv_unchecked(r.state.v_s[0].clamp(0.0, 1.0), &params.alpha);
            Ok(us + r_o_t(r.soc, r.state.t_core, params)? * r.current)
        })
        .collect()
}

/// Electrolyte potential at every sample for `(c_e, r_e, beta1, beta2)`,
/// chaining closed-form solutions across constant-current segments.
pub fn electrolyte_potential(times: &[f64], current: &[f64], theta: &[f64]) -> Option<Vec<f64>> {
    let (c_e, r_e, beta1, beta2) = (theta[0], theta[1], theta[2], theta[3]);
    let sys = build_omega_e().with_circuit(c_e, r_e);
    let mut out = Vec::with_capacity(times.len());
    let mut start = 0;
    let mut v0 = DVector::from_element(3, ELECTROLYTE_EQUILIBRIUM);
    while start < times.len() {
        let i = current[start];
        let mut end = start + 1;
        while end < times.len() && current[end] == i {
            end += 1;
        }
        let traj = sys.trajectory(i, &v0);
        for k in start..end {
            let v = traj.at(times[k] - times[start]);
            let (a, b) = (v[0] + beta2, v[2] + beta2);
            if !(a > 0.0 && b > 0.0) {
                return None;
            }
            out.push(beta1 * (a / b).ln());
        }
        if end < times.len() {
            // The sample current holds until the next sample time.
            v0 = traj.at(times[end] - times[start]);
        }
        start = end;
    }
    Some(out)
}

struct InnerResidual<'a> {
    times: &'a [f64],
    current: &'a [f64],
    /// Measured voltage minus the base voltage of the grid cell.
    target: Vec<f64>,
}

impl Residual for InnerResidual<'_> {
    fn residuals(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let ue = electrolyte_potential(self.times, self.current, theta)?;
        Some(ue.iter().zip(&self.target).map(|(m, d)| m - d).collect())
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Grid search over the Arrhenius exponents with an inner bounded fit of
/// the electrolyte group in each cell; returns the best cell's fit.
#[allow(clippy::too_many_arguments)]
pub fn fit_electrolyte_arrhenius(
    data: &Dataset,
    base: &ModelParams,
    identified: &[&FitResult],
    bounds: &ParamBounds,
    grid: &KappaGrid,
    options: &NlsOptions,
    replay_step: f64,
) -> Result<FitResult> {
    require_groups(
        GROUP_ELECTROLYTE,
        identified,
        &[GROUP_OCV, GROUP_RO, GROUP_SOLID, GROUP_THERMAL],
    )?;
    let inner_bounds = bounds.subset(&["c_e", "r_e", "beta1", "beta2"])?;
    grid.check_within(bounds)?;
    let params = params_with(base, identified)?;
    let times = data.relative_times();

    // Baseline: the reduced model without electrolyte or Arrhenius terms.
    let mut flat = params.clone();
    flat.kappa1 = 0.0;
    flat.kappa2 = 0.0;
    let baseline = base_voltage(data, &flat, replay_step)?;
    let baseline_rms = rms(&baseline
        .iter()
        .zip(&data.voltage)
        .map(|(m, d)| m - d)
        .collect::<Vec<_>>());

    let cells = grid.cells();
    let fits: Vec<Result<FitResult>> = cells
        .par_iter()
        .map(|&(k1, k2)| {
            let mut p = params.clone();
            p.kappa1 = k1;
            p.kappa2 = k2;
            let base_v = base_voltage(data, &p, replay_step)?;
            let residual = InnerResidual {
                times: &times,
                current: &data.current,
                target: data.voltage.iter().zip(&base_v).map(|(d, b)| d - b).collect(),
            };
            let mut fit = bounded_nls(&residual, &inner_bounds, options)?;
            fit.estimates.insert("kappa1".into(), k1);
            fit.estimates.insert("kappa2".into(), k2);
            Ok(fit)
        })
        .collect();
    let fits: Vec<FitResult> = fits.into_iter().collect::<Result<_>>()?;
    let best_index = fits
        .iter()
        .enumerate()
        .fold(0, |b, (k, f)| if f.residual_rms < fits[b].residual_rms { k } else { b });
    let mut best = fits[best_index].clone();
    best.group = GROUP_ELECTROLYTE.into();

    let theta: Vec<f64> = ["c_e", "r_e", "beta1", "beta2"]
        .iter()
        .map(|n| best.estimates[*n])
        .collect();
    let ue = electrolyte_potential(&times, &data.current, &theta).unwrap_or_default();
    let peak_ue = ue.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let identifiable = peak_ue >= UE_NOISE_FLOOR;
    let grid_rms = best.residual_rms;
    if identifiable {
        let mut p = params.clone();
        apply_fit(&mut p, &best)?;
        let polished = polish(data, &p, bounds, None, options, replay_step)?;
        if polished.residual_rms <= best.residual_rms {
            adopt(&mut best, &polished);
        }
    }
    if !identifiable {
        best.warnings.push(format!(
            "electrolyte group not identifiable: peak electrolyte potential {:.1} mV is below the {:.0} mV noise floor",
            peak_ue * 1e3,
            UE_NOISE_FLOOR * 1e3
        ));
    }
    if best.residual_rms >= baseline_rms * (1.0 - 1e-3) {
        best.warnings.push(format!(
            "no residual improvement over the reduced model without electrolyte ({:.3} mV vs {:.3} mV)",
            best.residual_rms * 1e3,
            baseline_rms * 1e3
        ));
    }
    let d = &mut best.diagnostics;
    d.insert("baseline_rms".into(), baseline_rms);
    d.insert("peak_ue_v".into(), peak_ue);
    d.insert("identifiable".into(), if identifiable { 1.0 } else { 0.0 });
    d.insert("grid_cells".into(), cells.len() as f64);
    d.insert("best_cell".into(), best_index as f64);
    d.insert("grid_rms".into(), grid_rms);
    Ok(best)
}

/// Names varied by the continuous refinement after the grid search.
/// `beta2` stays at its grid value: only `R_e / (0.5 + beta2)` is
/// determined by the voltage, so freeing both would leave a flat valley.
const POLISH_NAMES: [&str; 5] = ["kappa1", "kappa2", "c_e", "r_e", "beta1"];

/// Thermal parameters that give the same surface temperature for any heat
/// input. The surface response depends on `R_surf`,
/// `R_core C_core / R_surf + C_core + C_surf` and `R_core C_core C_surf`
/// only, which leaves one free direction, parameterized here by `C_surf`.
#[derive(Debug, Clone, Copy)]
struct ThermalFamily {
    r_surf: f64,
    first: f64,
    second: f64,
    c_core: (f64, f64),
    r_core: (f64, f64),
}

impl ThermalFamily {
    fn of(p: &ModelParams, bounds: &ParamBounds) -> Result<Self> {
        let range = |name: &str| {
            bounds
                .get(name)
                .map(|b| (b.lower, b.upper))
                .ok_or_else(|| Error::param(name, "missing from bounds"))
        };
        Ok(Self {
            r_surf: p.r_surf,
            first: p.r_core * p.c_core / p.r_surf + p.c_core + p.c_surf,
            second: p.r_core * p.c_core * p.c_surf,
            c_core: range("c_core")?,
            r_core: range("r_core")?,
        })
    }

    /// `(c_core, r_core)` of the member with the given `c_surf`, or `None`
    /// when that member lies outside the bounds. Members within rounding
    /// of a bound are clamped onto it.
    fn member(&self, c_surf: f64) -> Option<(f64, f64)> {
        let product = self.second / c_surf;
        let c_core = self.first - c_surf - product / self.r_surf;
        if c_core <= 0.0 {
            return None;
        }
        let fit = |v: f64, (lo, hi): (f64, f64)| {
            let slack = 1e-9 * (hi - lo);
            (lo - slack <= v && v <= hi + slack).then(|| v.clamp(lo, hi))
        };
        Some((fit(c_core, self.c_core)?, fit(product / c_core, self.r_core)?))
    }
}

/// Local refinement of `POLISH_NAMES`, and of `c_surf` along `family` when
/// given, against the full simulated voltage. Starts from `start`.
fn polish(
    data: &Dataset,
    start: &ModelParams,
    bounds: &ParamBounds,
    family: Option<ThermalFamily>,
    options: &NlsOptions,
    replay_step: f64,
) -> Result<FitResult> {
    let value = |p: &ModelParams, name: &str| match name {
        "kappa1" => p.kappa1,
        "kappa2" => p.kappa2,
        "c_e" => p.c_e,
        "r_e" => p.r_e,
        "beta1" => p.beta1,
        _ => p.c_surf,
    };
    let mut names: Vec<&str> = POLISH_NAMES.to_vec();
    if family.is_some() {
        names.push("c_surf");
    }
    let mut entries = Vec::new();
    for &name in &names {
        let b = bounds
            .get(name)
            .ok_or_else(|| Error::param(name, "missing from bounds"))?;
        let v = value(start, name).clamp(b.lower, b.upper);
        entries.push(ParamBound::new(name, v, b.lower, b.upper));
    }
    let polish_bounds = ParamBounds::new(entries)?;
    let profile = data.profile()?;
    let times = data.relative_times();
    let initial = data.initial_state(start.n_solid_nodes);
    let residual = |theta: &[f64]| -> Option<Vec<f64>> {
        let mut p = start.clone();
        p.kappa1 = theta[0];
        p.kappa2 = theta[1];
        p.c_e = theta[2];
        p.r_e = theta[3];
        p.beta1 = theta[4];
        if let Some(fam) = family {
            let (c_core, r_core) = fam.member(theta[5])?;
            p.c_surf = theta[5];
            p.c_core = c_core;
            p.r_core = r_core;
        }
        let trace = simulate_at(&profile, &p, &initial, &times, replay_step).ok()?;
        Some(
            trace
                .rows
                .iter()
                .zip(&data.voltage)
                .map(|(r, d)| r.terminal_voltage - d)
                .collect(),
        )
    };
    let local = NlsOptions {
        restarts: 0,
        ..options.clone()
    };
    bounded_nls(&residual, &polish_bounds, &local)
}

/// Copies the polished estimates and solver summary into `fit`.
fn adopt(fit: &mut FitResult, polished: &FitResult) {
    for name in POLISH_NAMES {
        fit.estimates.insert(name.into(), polished.estimates[name]);
        match polished.std_errors.get(name) {
            Some(e) => fit.std_errors.insert(name.into(), *e),
            None => fit.std_errors.remove(name),
        };
    }
    fit.residual_rms = polished.residual_rms;
    fit.iterations += polished.iterations;
    fit.converged = polished.converged;
    fit.active_bounds.retain(|n| !POLISH_NAMES.contains(&n.as_str()));
    fit.active_bounds.extend(
        polished
            .active_bounds
            .iter()
            .filter(|n| POLISH_NAMES.contains(&n.as_str()))
            .cloned(),
    );
}

/// Moves the thermal group along the direction that surface temperature
/// cannot see, jointly with the Arrhenius exponents and the electrolyte
/// group, to fit the high-rate voltage. Core temperature enters the voltage
/// through the Arrhenius factors, which is what pins this direction down.
///
/// `identified` holds the OCV, ohmic, solid, thermal and electrolyte fits in
/// that order; updated thermal and electrolyte fits are returned. When the
/// electrolyte group was not identifiable or the thermal fit was
/// degenerate, both are returned unchanged.
pub fn fit_core_temperature(
    data: &Dataset,
    base: &ModelParams,
    identified: &[&FitResult],
    bounds: &ParamBounds,
    options: &NlsOptions,
    replay_step: f64,
) -> Result<(FitResult, FitResult)> {
    require_groups(
        GROUP_ELECTROLYTE,
        identified,
        &[GROUP_OCV, GROUP_RO, GROUP_SOLID, GROUP_THERMAL, GROUP_ELECTROLYTE],
    )?;
    let (thermal, electrolyte) = (identified[3], identified[4]);
    let flag = |f: &FitResult, key: &str| f.diagnostics.get(key).copied();
    if flag(electrolyte, "identifiable") == Some(0.0) || flag(thermal, "degenerate") == Some(1.0) {
        return Ok((thermal.clone(), electrolyte.clone()));
    }
    let params = params_with(base, identified)?;
    let family = ThermalFamily::of(&params, bounds)?;
    let polished = polish(data, &params, bounds, Some(family), options, replay_step)?;
    let c_surf = polished.estimates["c_surf"];
    let (c_core, r_core) = family
        .member(c_surf)
        .ok_or_else(|| Error::Optimization("core alignment left the thermal family".into()))?;
    let mut new_thermal = thermal.clone();
    for (name, v) in [("c_surf", c_surf), ("c_core", c_core), ("r_core", r_core)] {
        new_thermal.estimates.insert(name.into(), v);
        new_thermal.std_errors.remove(name);
    }
    new_thermal.diagnostics.insert("core_aligned".into(), 1.0);
    let mut new_electrolyte = electrolyte.clone();
    adopt(&mut new_electrolyte, &polished);
    new_electrolyte.diagnostics.insert("core_aligned".into(), 1.0);
    Ok((new_thermal, new_electrolyte))
}
