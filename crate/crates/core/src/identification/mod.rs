//! Grouped parameter identification.
//!
//! Parameters are identified in five steps, each from its own experiment
//! and each consuming only the results of earlier steps:
//!
//! 1. `ocv`: OCV coefficients from a trickle discharge/charge.
//! 2. `ro`: ohmic resistance coefficients from voltage jumps of a pulse train.
//! 3. `solid`: solid ladder `C_s1`, `R_s1` from a constant-current discharge.
//! 4. `thermal`: thermal capacitances and resistances from surface temperature.
//! 5. `electrolyte`: electrolyte ladder, `beta1`, `beta2` and the Arrhenius
//!    exponents from a high-rate discharge.

pub mod electrolyte;
pub mod nls;
pub mod ocv;
pub mod pipeline;
pub mod ro;
pub mod solid;
pub mod thermal;

pub use electrolyte::{fit_core_temperature, fit_electrolyte_arrhenius, KappaGrid};
pub use nls::{bounded_nls, FitResult, NlsOptions, ParamBound, ParamBounds, Residual};
pub use ocv::fit_ocv;
pub use pipeline::{
    pulse_samples, refine_round, run_pipeline, single_pass, Experiments, Fits, PipelineOptions, PipelineResult,
    PulseData, RoundSummary,
};
pub use ro::{detect_pulse_edges, estimate_ro_samples, fit_ro, PulseEdge, RoSample};
pub use solid::{fit_solid, fit_solid_after, ELECTROLYTE_SETTLE_S};
pub use thermal::fit_thermal;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelParams, OCV_COEFFS, REFERENCE_ALPHA};

pub const GROUP_OCV: &str = "ocv";
pub const GROUP_RO: &str = "ro";
pub const GROUP_SOLID: &str = "solid";
pub const GROUP_THERMAL: &str = "thermal";
pub const GROUP_ELECTROLYTE: &str = "electrolyte";

/// Step names in pipeline order.
pub const STEP_ORDER: [&str; 5] = [GROUP_OCV, GROUP_RO, GROUP_SOLID, GROUP_THERMAL, GROUP_ELECTROLYTE];

pub fn alpha_name(k: usize) -> String {
    format!("alpha{k}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoulombCount {
    pub soc: Vec<f64>,
    /// Samples whose count fell outside `[0, 1]` and were clipped.
    pub clipped: usize,
}

/// State of charge at every sample, integrating each sample's current over
/// the following interval (the hold-previous convention).
pub fn coulomb_count(data: &Dataset, soc0: f64, capacity_ah: f64) -> Result<CoulombCount> {
    if !(capacity_ah.is_finite() && capacity_ah > 0.0) {
        return Err(Error::domain(
            "coulomb_count",
            format!("capacity {capacity_ah} Ah must be positive"),
        ));
    }
    let scale = 1.0 / (3600.0 * capacity_ah);
    let mut soc = Vec::with_capacity(data.len());
    let mut clipped = 0;
    let mut acc = soc0;
    for k in 0..data.len() {
        if k > 0 {
            acc += data.current[k - 1] * (data.time[k] - data.time[k - 1]) * scale;
        }
        if !(0.0..=1.0).contains(&acc) {
            clipped += 1;
        }
        soc.push(acc.clamp(0.0, 1.0));
    }
    Ok(CoulombCount { soc, clipped })
}

/// Writes the estimates of `fit` into the matching fields of `params`.
pub fn apply_fit(params: &mut ModelParams, fit: &FitResult) -> Result<()> {
    for (name, &v) in &fit.estimates {
        if let Some(k) = name.strip_prefix("alpha").and_then(|s| s.parse::<usize>().ok()) {
            let slot = params
                .alpha
                .get_mut(k)
                .ok_or_else(|| Error::param(name, "index out of range"))?;
            *slot = v;
            continue;
        }
        let slot = match name.as_str() {
            "gamma1" => &mut params.gamma1,
            "gamma2" => &mut params.gamma2,
            "gamma3" => &mut params.gamma3,
            "c_s1" => &mut params.c_s1,
            "r_s1" => &mut params.r_s1,
            "c_surf" => &mut params.c_surf,
            "r_surf" => &mut params.r_surf,
            "c_core" => &mut params.c_core,
            "r_core" => &mut params.r_core,
            "c_e" => &mut params.c_e,
            "r_e" => &mut params.r_e,
            "beta1" => &mut params.beta1,
            "beta2" => &mut params.beta2,
            "kappa1" => &mut params.kappa1,
            "kappa2" => &mut params.kappa2,
            other => return Err(Error::param(other, "not an identifiable parameter")),
        };
        *slot = v;
    }
    Ok(())
}

/// Fails unless `fits` holds a result for every group in `needed`.
pub(crate) fn require_groups(step: &str, fits: &[&FitResult], needed: &[&str]) -> Result<()> {
    let missing: Vec<&str> = needed
        .iter()
        .copied()
        .filter(|g| !fits.iter().any(|f| f.group == *g))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Ordering(format!(
            "step `{step}` needs results of earlier step(s) {}; run them first",
            missing.iter().map(|m| format!("`{m}`")).collect::<Vec<_>>().join(", ")
        )))
    }
}

/// `base` with every earlier fit applied.
pub(crate) fn params_with(base: &ModelParams, fits: &[&FitResult]) -> Result<ModelParams> {
    let mut p = base.clone();
    for f in fits {
        apply_fit(&mut p, f)?;
    }
    Ok(p)
}

/// Mean absolute current as a C-rate, weighting each sample by the interval
/// it holds for.
pub(crate) fn mean_abs_c_rate(data: &Dataset) -> f64 {
    let span = data.time[data.len() - 1] - data.time[0];
    let total: f64 = data
        .time
        .windows(2)
        .zip(&data.current)
        .map(|(w, i)| i.abs() * (w[1] - w[0]))
        .sum();
    total / span / data.meta.capacity_ah
}

/// Fails unless every sample carries the same non-zero current.
pub(crate) fn require_constant_current(data: &Dataset, expected: &'static str) -> Result<f64> {
    let i0 = data.current[0];
    if i0 == 0.0 {
        return Err(Error::DatasetMismatch {
            expected,
            detail: "first sample carries no current".into(),
        });
    }
    if let Some(k) = data.current.iter().position(|i| (i - i0).abs() > 1e-6 * i0.abs()) {
        return Err(Error::DatasetMismatch {
            expected,
            detail: format!(
                "current changes from {i0} A to {} A at t = {} s; a constant-current record is required",
                data.current[k], data.time[k]
            ),
        });
    }
    Ok(i0)
}

/// OCV coefficients: centred on the reference fit, half-width
/// `max(|alpha|/2, 0.5)`.
pub fn ocv_bounds() -> ParamBounds {
    let entries = (0..OCV_COEFFS)
        .map(|k| {
            let a = REFERENCE_ALPHA[k];
            let h = (0.5 * a.abs()).max(0.5);
            ParamBound::new(&alpha_name(k), a, a - h, a + h)
        })
        .collect();
    ParamBounds::new(entries).expect("valid OCV bounds")
}

pub fn ro_bounds() -> ParamBounds {
    ParamBounds::new(vec![
        ParamBound::new("gamma1", 1.0, 0.0, 5.0),
        ParamBound::new("gamma2", 1.0, 0.0, 5.0),
        ParamBound::new("gamma3", 1.0, 0.0, 50.0),
    ])
    .expect("valid bounds")
}

pub fn solid_bounds() -> ParamBounds {
    ParamBounds::new(vec![
        ParamBound::new("c_s1", 4391.0, 3600.0, 5500.0),
        ParamBound::new("r_s1", 0.090, 0.054, 0.167),
    ])
    .expect("valid bounds")
}

pub fn thermal_bounds() -> ParamBounds {
    ParamBounds::new(vec![
        ParamBound::new("c_surf", 7.0, 3.0, 12.0),
        ParamBound::new("r_surf", 6.0, 3.0, 20.0),
        ParamBound::new("c_core", 20.0, 5.0, 50.0),
        ParamBound::new("r_core", 1.0, 0.5, 7.0),
    ])
    .expect("valid bounds")
}

pub fn electrolyte_bounds() -> ParamBounds {
    ParamBounds::new(vec![
        ParamBound::new("c_e", 1032.0, 500.0, 5000.0),
        ParamBound::new("r_e", 0.028, 0.002, 0.080),
        ParamBound::new("beta1", 0.53, 0.42, 1.00),
        ParamBound::new("beta2", 0.31, 0.19, 0.423),
        ParamBound::new("kappa1", 15.0, 10.0, 100.0),
        ParamBound::new("kappa2", 22.0, 10.0, 100.0),
    ])
    .expect("valid bounds")
}

/// Bounds for every identified parameter, in step order.
pub fn default_bounds() -> ParamBounds {
    let mut entries = Vec::new();
    for b in [
        ocv_bounds(),
        ro_bounds(),
        solid_bounds(),
        thermal_bounds(),
        electrolyte_bounds(),
    ] {
        entries.extend(b.entries().iter().cloned());
    }
    ParamBounds::new(entries).expect("valid bounds")
}

/// `base` with every identified parameter reset to its initial guess.
pub fn initial_params(base: &ModelParams, bounds: &ParamBounds) -> Result<ModelParams> {
    let fit = FitResult::from_initial("initial", bounds, String::new());
    let mut p = base.clone();
    apply_fit(&mut p, &fit)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;

    fn data(time: Vec<f64>, current: Vec<f64>) -> Dataset {
        let n = time.len();
        Dataset::new(time, current, vec![3.7; n], None, DatasetMeta::default()).unwrap()
    }

    #[test]
    fn zero_current_keeps_soc() {
        let d = data(vec![0.0, 10.0, 20.0], vec![0.0; 3]);
        let c = coulomb_count(&d, 0.4, 2.5).unwrap();
        assert_eq!(c.soc, vec![0.4; 3]);
        assert_eq!(c.clipped, 0);
    }

    #[test]
    fn one_hour_at_one_c_fills_the_cell() {
        let d = data(vec![0.0, 1800.0, 3600.0], vec![2.5; 3]);
        let c = coulomb_count(&d, 0.0, 2.5).unwrap();
        assert!((c.soc[2] - 1.0).abs() < 1e-12);
        let over = coulomb_count(&d, 0.5, 2.5).unwrap();
        assert_eq!(over.clipped, 1);
        assert_eq!(over.soc[2], 1.0);
        assert!(coulomb_count(&d, 0.0, 0.0).is_err());
    }

    #[test]
    fn ordering_errors_name_missing_steps() {
        let f = FitResult::from_initial(GROUP_OCV, &ocv_bounds(), String::new());
        let e = require_groups(GROUP_SOLID, &[&f], &[GROUP_OCV, GROUP_RO]).unwrap_err();
        assert!(matches!(e, Error::Ordering(ref m) if m.contains("`ro`") && !m.contains("`ocv`")));
    }

    #[test]
    fn apply_fit_maps_names() {
        let mut p = ModelParams::default();
        let mut f = FitResult::from_initial(GROUP_RO, &ro_bounds(), String::new());
        f.estimates.insert("alpha3".into(), 0.5);
        apply_fit(&mut p, &f).unwrap();
        assert_eq!((p.gamma1, p.gamma2, p.gamma3, p.alpha[3]), (1.0, 1.0, 1.0, 0.5));
        f.estimates.insert("eta".into(), 1.0);
        assert!(apply_fit(&mut p, &f).is_err());
    }

    #[test]
    fn default_bounds_contain_reference_values() {
        let b = default_bounds();
        let truth = ModelParams::default();
        let mut p = truth.clone();
        let f = FitResult::from_initial("x", &b, String::new());
        apply_fit(&mut p, &f).unwrap();
        for e in b.entries() {
            let v = match e.name.as_str() {
                n if n.starts_with("alpha") => truth.alpha[n[5..].parse::<usize>().unwrap()],
                "gamma1" => truth.gamma1,
                "gamma2" => truth.gamma2,
                "gamma3" => truth.gamma3,
                "c_s1" => truth.c_s1,
                "r_s1" => truth.r_s1,
                "c_surf" => truth.c_surf,
                "r_surf" => truth.r_surf,
                "c_core" => truth.c_core,
                "r_core" => truth.r_core,
                "c_e" => truth.c_e,
                "r_e" => truth.r_e,
                "beta1" => truth.beta1,
                "beta2" => truth.beta2,
                "kappa1" => truth.kappa1,
                "kappa2" => truth.kappa2,
                other => panic!("{other}"),
            };
            assert!(e.lower <= v && v <= e.upper, "{} = {v}", e.name);
        }
    }
}
