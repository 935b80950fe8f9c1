//! Step 3: solid ladder scale from a constant-current discharge.

use nalgebra::DVector;

use super::nls::{bounded_nls, FitResult, NlsOptions, ParamBound, ParamBounds, Residual};
use super::{coulomb_count, params_with, require_constant_current, require_groups, GROUP_OCV, GROUP_RO, GROUP_SOLID};
use crate::analytic::{build_omega_s, LadderSystem};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::model::{ocv_unchecked, r_o, ModelParams};

struct SolidResidual<'a> {
    ladder: LadderSystem,
    params: &'a ModelParams,
    times: Vec<f64>,
    current: f64,
    v0: DVector<f64>,
    /// `U - R_o(SoC) I` at each sample.
    target: Vec<f64>,
    /// Samples earlier than this many seconds after the start are left out.
    settle: f64,
}

impl SolidResidual<'_> {
    /// Surface OCV at every sample.
    fn surface_ocv(&self, c_s1: f64, r_s1: f64) -> Vec<f64> {
        let sys = self.ladder.clone().with_circuit(c_s1, r_s1);
        let traj = sys.trajectory(self.current, &self.v0);
        self.times
            .iter()
            .map(|&t| ocv_unchecked(traj.at(t)[0].clamp(0.0, 1.0), &self.params.alpha))
            .collect()
    }
}

impl Residual for SolidResidual<'_> {
    fn residuals(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let us = self.surface_ocv(theta[0], theta[1]);
        Some(
            us.iter()
                .zip(&self.target)
                .zip(&self.times)
                .filter(|(_, t)| **t >= self.settle)
                .map(|((m, d), _)| m + theta[2] - d)
                .collect(),
        )
    }
}

/// Name of the constant voltage offset fitted alongside the ladder.
pub const OFFSET: &str = "voltage_offset";

/// Half-width of the offset's search box, in volts.
pub const OFFSET_LIMIT: f64 = 0.2;

/// Leading window, in seconds, excluded from the residual while the
/// electrolyte potential is still rising toward its steady value.
pub const ELECTROLYTE_SETTLE_S: f64 = 120.0;

/// Surface OCV at every sample from the closed-form ladder at reference
/// temperature, as seen by [`fit_solid`].
pub fn reference_surface_ocv(data: &Dataset, params: &ModelParams) -> Result<Vec<f64>> {
    let current = require_constant_current(data, "constant-current solid diffusion")?;
    let ladder = build_omega_s(&params.eta, &params.sigma)?.with_circuit(params.c_s1, params.r_s1);
    let v0 = DVector::from_element(params.n_solid_nodes, data.meta.soc0);
    let traj = ladder.trajectory(current, &v0);
    let t0 = data.time[0];
    Ok(data
        .time
        .iter()
        .map(|t| ocv_unchecked(traj.at(t - t0)[0].clamp(0.0, 1.0), &params.alpha))
        .collect())
}

/// Fits `C_s1` and `R_s1` with the OCV and ohmic coefficients held at
/// their identified values and the ladder ratios fixed by `base`.
///
/// A constant voltage offset is fitted as a nuisance parameter and
/// reported in the diagnostics. It absorbs the electrolyte potential, which
/// settles to a constant within a minute or two of a constant-current
/// load. Samples inside [`ELECTROLYTE_SETTLE_S`] are skipped because the
/// rising part of that potential would otherwise inflate `R_s1`.
pub fn fit_solid(
    data: &Dataset,
    base: &ModelParams,
    theta_us: &FitResult,
    theta_ro: &FitResult,
    bounds: &ParamBounds,
    options: &NlsOptions,
) -> Result<FitResult> {
    fit_solid_after(data, base, theta_us, theta_ro, bounds, options, ELECTROLYTE_SETTLE_S)
}

/// [`fit_solid`] with an explicit leading window, in seconds, left out of
/// the residual. Zero suits records whose electrolyte transient has already
/// been corrected away.
pub fn fit_solid_after(
    data: &Dataset,
    base: &ModelParams,
    theta_us: &FitResult,
    theta_ro: &FitResult,
    bounds: &ParamBounds,
    options: &NlsOptions,
    settle_s: f64,
) -> Result<FitResult> {
    require_groups(GROUP_SOLID, &[theta_us, theta_ro], &[GROUP_OCV, GROUP_RO])?;
    let mut entries = bounds.subset(&["c_s1", "r_s1"])?.entries().to_vec();
    entries.push(ParamBound::new(OFFSET, 0.0, -OFFSET_LIMIT, OFFSET_LIMIT));
    let bounds = ParamBounds::new(entries)?;
    let current = require_constant_current(data, "constant-current solid diffusion")?;
    let params = params_with(base, &[theta_us, theta_ro])?;
    let soc = coulomb_count(data, data.meta.soc0, data.meta.capacity_ah)?.soc;
    let t0 = data.time[0];
    let residual = SolidResidual {
        ladder: build_omega_s(&params.eta, &params.sigma)?,
        params: &params,
        times: data.time.iter().map(|t| t - t0).collect(),
        current,
        v0: DVector::from_element(params.n_solid_nodes, data.meta.soc0),
        target: data
            .voltage
            .iter()
            .zip(&soc)
            .map(|(u, s)| u - r_o(*s, params.gamma1, params.gamma2, params.gamma3) * current)
            .collect(),
        settle: settle_s,
    };
    let mut fit = bounded_nls(&residual, &bounds, options)?;
    fit.group = GROUP_SOLID.into();
    let offset = fit.estimates.remove(OFFSET).unwrap_or(0.0);
    fit.std_errors.remove(OFFSET);
    fit.active_bounds.retain(|n| n != OFFSET);
    fit.diagnostics.insert("voltage_offset_v".into(), offset);
    let eta_sum: f64 = params.eta.iter().sum();
    fit.diagnostics
        .insert("capacity_ah".into(), fit.estimates["c_s1"] * eta_sum / 3600.0);
    fit.diagnostics.insert("current_a".into(), current);
    Ok(fit)
}
