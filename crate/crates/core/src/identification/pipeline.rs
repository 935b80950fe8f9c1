//! The five identification steps run in order, with optional refinement.
//!
//! Steps 1 to 4 fit reduced models (OCV only, ohmic jumps only, solid ladder
//! at reference temperature, heat at reference temperature), so a single
//! pass carries the bias of whatever those models leave out. Each
//! refinement round replays every experiment through the full model at the
//! current estimates, takes the difference between full and reduced model
//! outputs, subtracts it from the measurements, and repeats the steps on
//! the corrected records. The true parameters are a fixed point of this
//! iteration. With zero rounds the result is the plain single pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::electrolyte::{fit_core_temperature, fit_electrolyte_arrhenius, KappaGrid};
use super::nls::{FitResult, NlsOptions, ParamBounds};
use super::ocv::{alpha_from, fit_ocv};
use super::ro::{detect_pulse_edges, estimate_ro_samples, fit_ro, PulseEdge, RoSample, RoSamples, EDGE_THRESHOLD_C};
use super::solid::{fit_solid, fit_solid_after, reference_surface_ocv};
use super::thermal::{fit_thermal, reduced_surface_temperature};
use super::{apply_fit, coulomb_count, params_with};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{ocv_unchecked, r_o, ModelParams};
use crate::simulator::{simulate_at, SimulationTrace};

/// One record per identification step.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiments {
    pub ocv: Dataset,
    pub pulse: Dataset,
    pub solid: Dataset,
    pub thermal: Dataset,
    pub electrolyte: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub nls: NlsOptions,
    /// Defaults to 8 x 8 log-spaced over the kappa bounds.
    pub kappa_grid: Option<KappaGrid>,
    pub refine_rounds: usize,
    /// Iteration cap of each fit in a refinement round. Those fits start
    /// from the previous round's estimates without random restarts, and
    /// the OCV fit in particular needs many steps to follow small
    /// corrections along its ill-conditioned directions.
    pub refine_max_iterations: usize,
    /// Integration step for replaying records through the model, seconds.
    pub replay_step: f64,
    pub edge_threshold_c: f64,
    /// Use only edges where a pulse stops.
    pub stop_edges_only: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            nls: NlsOptions::default(),
            kappa_grid: None,
            refine_rounds: 6,
            refine_max_iterations: 2000,
            replay_step: 0.1,
            edge_threshold_c: EDGE_THRESHOLD_C,
            stop_edges_only: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fits {
    pub ocv: FitResult,
    pub ro: FitResult,
    pub solid: FitResult,
    pub thermal: FitResult,
    pub electrolyte: FitResult,
}

impl Fits {
    pub fn all(&self) -> [&FitResult; 5] {
        [&self.ocv, &self.ro, &self.solid, &self.thermal, &self.electrolyte]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    /// Largest relative change of any non-OCV estimate from the previous
    /// round.
    pub max_relative_change: f64,
    pub solid_rms_v: f64,
    pub thermal_rms_k: f64,
    pub electrolyte_rms_v: f64,
    /// Estimates after the round, OCV coefficients excluded.
    pub estimates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub params: ModelParams,
    pub fits: Fits,
    pub rounds: Vec<RoundSummary>,
}

/// Edges of a pulse record and the resistance sample of each.
pub fn pulse_samples(data: &Dataset, threshold_c: f64, stop_only: bool) -> Result<(Vec<PulseEdge>, RoSamples)> {
    let edges: Vec<PulseEdge> = detect_pulse_edges(data, threshold_c)
        .into_iter()
        .filter(|e| e.is_stop || !stop_only)
        .collect();
    if edges.is_empty() {
        return Err(Error::DatasetMismatch {
            expected: "pulse-train ohmic resistance",
            detail: "no current steps found".into(),
        });
    }
    let soc = coulomb_count(data, data.meta.soc0, data.meta.capacity_ah)?.soc;
    let samples = estimate_ro_samples(data, &edges, &soc);
    Ok((edges, samples))
}

fn replay(data: &Dataset, params: &ModelParams, step: f64) -> Result<SimulationTrace> {
    simulate_at(
        &data.profile()?,
        params,
        &data.initial_state(params.n_solid_nodes),
        &data.relative_times(),
        step,
    )
}

fn with_voltage(data: &Dataset, voltage: Vec<f64>) -> Dataset {
    Dataset {
        voltage,
        ..data.clone()
    }
}

/// Measurements minus the full-minus-reduced discrepancy.
fn corrected(measured: &[f64], full: &[f64], reduced: &[f64]) -> Vec<f64> {
    measured
        .iter()
        .zip(full.iter().zip(reduced))
        .map(|(m, (f, r))| m - (f - r))
        .collect()
}

/// Pulse edges and measured resistance samples of an experiment set,
/// computed once and shared by every round.
pub struct PulseData {
    pub edges: Vec<PulseEdge>,
    pub measured: RoSamples,
}

impl PulseData {
    pub fn new(data: &Experiments, options: &PipelineOptions) -> Result<Self> {
        let (edges, measured) = pulse_samples(&data.pulse, options.edge_threshold_c, options.stop_edges_only)?;
        Ok(Self { edges, measured })
    }
}

/// Steps 1 to 5 on the measured records.
pub fn single_pass(
    data: &Experiments,
    pulses: &PulseData,
    base: &ModelParams,
    bounds: &ParamBounds,
    grid: &KappaGrid,
    options: &PipelineOptions,
) -> Result<Fits> {
    let nls = &options.nls;
    let ocv = fit_ocv(&data.ocv, bounds, nls)?;
    let mut ro = fit_ro(&pulses.measured.samples, bounds, nls)?;
    ro.warnings.extend(pulses.measured.warnings.iter().cloned());
    let solid = fit_solid(&data.solid, base, &ocv, &ro, bounds, nls)?;
    let thermal = fit_thermal(
        &data.thermal,
        base,
        &[&ocv, &ro, &solid],
        bounds,
        nls,
        options.replay_step,
    )?;
    let electrolyte = fit_electrolyte_arrhenius(
        &data.electrolyte,
        base,
        &[&ocv, &ro, &solid, &thermal],
        bounds,
        grid,
        nls,
        options.replay_step,
    )?;
    let (thermal, electrolyte) = fit_core_temperature(
        &data.electrolyte,
        base,
        &[&ocv, &ro, &solid, &thermal, &electrolyte],
        bounds,
        nls,
        options.replay_step,
    )?;
    Ok(Fits {
        ocv,
        ro,
        solid,
        thermal,
        electrolyte,
    })
}

/// One refinement round. Each step fits its record corrected by the
/// full-minus-reduced discrepancy at the newest estimates: those of this
/// round for earlier steps, those of `previous` for the rest.
pub fn refine_round(
    data: &Experiments,
    pulses: &PulseData,
    base: &ModelParams,
    bounds: &ParamBounds,
    previous: &Fits,
    options: &PipelineOptions,
) -> Result<Fits> {
    let nls = &NlsOptions {
        restarts: 0,
        max_iterations: options.refine_max_iterations,
        ..options.nls.clone()
    };
    let step = options.replay_step;
    let prior = bounds;
    let mut bounds = bounds.clone();
    for f in previous.all() {
        for (name, v) in &f.estimates {
            if bounds.get(name).is_some() {
                bounds.set_initial(name, *v)?;
            }
        }
    }
    let mut est = params_with(base, &previous.all())?;

    // Discrepancies are evaluated along the replayed model's own SoC, so
    // that a capacity error in the current estimates does not leak into
    // the corrections.
    let trace = replay(&data.ocv, &est, step)?;
    let reduced: Vec<f64> = trace.rows.iter().map(|r| ocv_unchecked(r.soc, &est.alpha)).collect();
    // The OCV valley is long and curved, so a start from the previous
    // round can stall against a bound. The prior guess is kept as a second
    // start.
    let ocv_data = with_voltage(&data.ocv, corrected(&data.ocv.voltage, &trace.voltages(), &reduced));
    let ocv = fit_ocv(&ocv_data, &bounds, nls)?;
    let from_prior = fit_ocv(&ocv_data, prior, nls)?;
    let ocv = if from_prior.residual_rms < ocv.residual_rms {
        from_prior
    } else {
        ocv
    };
    est.alpha = alpha_from(&ocv)?;

    let trace = replay(&data.pulse, &est, step)?;
    let simulated = with_voltage(&data.pulse, trace.voltages());
    let soc: Vec<f64> = trace.rows.iter().map(|r| r.soc).collect();
    let full = estimate_ro_samples(&simulated, &pulses.edges, &soc).samples;
    let samples: Vec<RoSample> = pulses
        .measured
        .samples
        .iter()
        .zip(&full)
        .map(|(m, f)| RoSample {
            resistance: m.resistance - (f.resistance - r_o(f.soc, est.gamma1, est.gamma2, est.gamma3)),
            ..m.clone()
        })
        .collect();
    let mut ro = fit_ro(&samples, &bounds, nls)?;
    ro.warnings.extend(pulses.measured.warnings.iter().cloned());
    apply_fit(&mut est, &ro)?;

    let trace = replay(&data.solid, &est, step)?;
    let us = reference_surface_ocv(&data.solid, &est)?;
    let reduced: Vec<f64> = trace
        .rows
        .iter()
        .zip(&us)
        .map(|(r, u)| u + r_o(r.soc, est.gamma1, est.gamma2, est.gamma3) * r.current)
        .collect();
    // The correction already removes the electrolyte transient, so the
    // whole record is usable here.
    let solid = fit_solid_after(
        &with_voltage(&data.solid, corrected(&data.solid.voltage, &trace.voltages(), &reduced)),
        base,
        &ocv,
        &ro,
        &bounds,
        nls,
        0.0,
    )?;
    apply_fit(&mut est, &solid)?;

    let measured = data.thermal.temp_surf.as_ref().ok_or_else(|| Error::DatasetMismatch {
        expected: "surface-temperature thermal",
        detail: "record has no surface-temperature channel".into(),
    })?;
    let full = replay(&data.thermal, &est, step)?.surface_temperatures();
    let reduced = reduced_surface_temperature(&data.thermal, &est, step)?;
    let thermal_data = Dataset {
        temp_surf: Some(corrected(measured, &full, &reduced)),
        ..data.thermal.clone()
    };
    let thermal = fit_thermal(&thermal_data, base, &[&ocv, &ro, &solid], &bounds, nls, step)?;

    // The grid search ran in the single pass; here the electrolyte group,
    // the Arrhenius exponents and the free thermal direction are refined
    // locally from the previous round.
    let (thermal, electrolyte) = fit_core_temperature(
        &data.electrolyte,
        base,
        &[&ocv, &ro, &solid, &thermal, &previous.electrolyte],
        &bounds,
        nls,
        step,
    )?;
    Ok(Fits {
        ocv,
        ro,
        solid,
        thermal,
        electrolyte,
    })
}

fn relative_change(a: &Fits, b: &Fits) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.all().iter().zip(b.all()).skip(1) {
        for (name, v) in &x.estimates {
            if let Some(w) = y.estimates.get(name) {
                let scale = v.abs().max(w.abs()).max(1e-12);
                worst = worst.max((v - w).abs() / scale);
            }
        }
    }
    worst
}

/// Runs steps 1 to 5 on `data`, then `options.refine_rounds` refinement
/// rounds. `base` supplies the fixed structure (ladder ratios, reference
/// temperature, cutoffs); identified fields start from `bounds`' initial
/// guesses.
pub fn run_pipeline(
    data: &Experiments,
    base: &ModelParams,
    bounds: &ParamBounds,
    options: &PipelineOptions,
) -> Result<PipelineResult> {
    base.validate()?;
    let grid = match &options.kappa_grid {
        Some(g) => g.clone(),
        None => KappaGrid::default_for(bounds)?,
    };
    let pulses = PulseData::new(data, options)?;
    let mut fits = single_pass(data, &pulses, base, bounds, &grid, options)?;
    let mut rounds = vec![summary(0, f64::NAN, &fits)];
    for round in 1..=options.refine_rounds {
        let next = refine_round(data, &pulses, base, bounds, &fits, options)?;
        let change = relative_change(&fits, &next);
        fits = next;
        rounds.push(summary(round, change, &fits));
    }
    Ok(PipelineResult {
        params: params_with(base, &fits.all())?,
        fits,
        rounds,
    })
}

fn summary(round: usize, change: f64, fits: &Fits) -> RoundSummary {
    RoundSummary {
        round,
        max_relative_change: if change.is_nan() { 0.0 } else { change },
        solid_rms_v: fits.solid.residual_rms,
        thermal_rms_k: fits.thermal.residual_rms,
        electrolyte_rms_v: fits.electrolyte.residual_rms,
        estimates: fits
            .all()
            .iter()
            .skip(1)
            .flat_map(|f| f.estimates.iter().map(|(k, v)| (k.clone(), *v)))
            .collect(),
    }
}
