//! Step 4: thermal capacitances and resistances from surface temperature.

use super::nls::{bounded_nls, FitResult, NlsOptions, ParamBounds, Residual};
use super::{params_with, require_groups, GROUP_OCV, GROUP_RO, GROUP_SOLID, GROUP_THERMAL};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::simulator::simulate_at;

/// Largest internal step of the thermal integration, in seconds.
const THERMAL_STEP: f64 = 1.0;

/// Heat generation at every sample from the model at reference temperature
/// (Arrhenius exponents zeroed), replaying the measured current.
pub fn reference_heat(data: &Dataset, params: &ModelParams, step: f64) -> Result<Vec<f64>> {
    let mut p = params.clone();
    p.kappa1 = 0.0;
    p.kappa2 = 0.0;
    let trace = simulate_at(
        &data.profile()?,
        &p,
        &data.initial_state(p.n_solid_nodes),
        &data.relative_times(),
        step,
    )?;
    Ok(trace.rows.iter().map(|r| r.heat_rate).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalParams {
    pub c_core: f64,
    pub r_core: f64,
    pub c_surf: f64,
    pub r_surf: f64,
}

impl From<&ModelParams> for ThermalParams {
    fn from(p: &ModelParams) -> Self {
        Self {
            c_core: p.c_core,
            r_core: p.r_core,
            c_surf: p.c_surf,
            r_surf: p.r_surf,
        }
    }
}

/// Integrates the two-node thermal model driven by heat samples `q`,
/// linearly interpolated, from both nodes at `t_amb`. Returns the surface
/// temperature at each sample time.
pub fn surface_temperature(times: &[f64], q: &[f64], t_amb: f64, th: ThermalParams) -> Vec<f64> {
    let f = |tc: f64, ts: f64, q: f64| {
        let flow = (ts - tc) / th.r_core;
        (
            q / th.c_core + flow / th.c_core,
            (t_amb - ts) / (th.r_surf * th.c_surf) - flow / th.c_surf,
        )
    };
    let mut out = Vec::with_capacity(times.len());
    let (mut tc, mut ts) = (t_amb, t_amb);
    out.push(ts);
    for k in 1..times.len() {
        let span = times[k] - times[k - 1];
        let n = (span / THERMAL_STEP).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let q_at = |s: f64| q[k - 1] + (q[k] - q[k - 1]) * (s / span);
        for j in 0..n {
            let s = j as f64 * h;
            let (q0, qm, q1) = (q_at(s), q_at(s + 0.5 * h), q_at(s + h));
            let k1 = f(tc, ts, q0);
            let k2 = f(tc + 0.5 * h * k1.0, ts + 0.5 * h * k1.1, qm);
            let k3 = f(tc + 0.5 * h * k2.0, ts + 0.5 * h * k2.1, qm);
            let k4 = f(tc + h * k3.0, ts + h * k3.1, q1);
            tc += h / 6.0 * (k1.0 + 2.0 * (k2.0 + k3.0) + k4.0);
            ts += h / 6.0 * (k1.1 + 2.0 * (k2.1 + k3.1) + k4.1);
        }
        out.push(ts);
    }
    out
}

struct ThermalResidual<'a> {
    times: Vec<f64>,
    q: Vec<f64>,
    t_amb: f64,
    measured: &'a [f64],
}

impl Residual for ThermalResidual<'_> {
    fn residuals(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let th = ThermalParams {
            c_surf: theta[0],
            r_surf: theta[1],
            c_core: theta[2],
            r_core: theta[3],
        };
        let t = surface_temperature(&self.times, &self.q, self.t_amb, th);
        Some(t.iter().zip(self.measured).map(|(m, d)| m - d).collect())
    }
}

/// Reduced-model surface temperature used by [`fit_thermal`].
pub fn reduced_surface_temperature(data: &Dataset, params: &ModelParams, step: f64) -> Result<Vec<f64>> {
    let q = reference_heat(data, params, step)?;
    Ok(surface_temperature(
        &data.relative_times(),
        &q,
        data.meta.t_amb,
        params.into(),
    ))
}

/// Fits the thermal group to measured surface temperature, with heat from
/// the identified OCV, ohmic and solid groups at reference temperature.
/// A record without heat generation cannot excite the thermal model; the
/// prior initial guesses are then returned unconverged with a warning.
pub fn fit_thermal(
    data: &Dataset,
    base: &ModelParams,
    identified: &[&FitResult],
    bounds: &ParamBounds,
    options: &NlsOptions,
    replay_step: f64,
) -> Result<FitResult> {
    require_groups(GROUP_THERMAL, identified, &[GROUP_OCV, GROUP_RO, GROUP_SOLID])?;
    let bounds = bounds.subset(&["c_surf", "r_surf", "c_core", "r_core"])?;
    let measured = data.temp_surf.as_ref().ok_or_else(|| Error::DatasetMismatch {
        expected: "surface-temperature thermal",
        detail: "record has no surface-temperature channel".into(),
    })?;
    let params = params_with(base, identified)?;
    let q = reference_heat(data, &params, replay_step)?;
    let peak_q = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak_q < 1e-9 {
        let mut fit = FitResult::from_initial(
            GROUP_THERMAL,
            &bounds,
            "no heat generation in the record; thermal parameters are not excited and the prior guesses are returned"
                .into(),
        );
        fit.diagnostics.insert("degenerate".into(), 1.0);
        return Ok(fit);
    }
    let residual = ThermalResidual {
        times: data.relative_times(),
        q,
        t_amb: data.meta.t_amb,
        measured,
    };
    let mut fit = bounded_nls(&residual, &bounds, options)?;
    fit.group = GROUP_THERMAL.into();
    let rise = measured.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) - measured[0];
    fit.diagnostics.insert("degenerate".into(), 0.0);
    fit.diagnostics.insert("peak_heat_w".into(), peak_q);
    fit.diagnostics.insert("surface_rise_k".into(), rise);
    Ok(fit)
}
