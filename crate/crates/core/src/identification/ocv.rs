//! Step 1: OCV curve from a trickle-current record.

use nalgebra::DMatrix;

use super::nls::{bounded_nls, FitResult, NlsOptions, ParamBounds, Residual};
use super::{alpha_name, coulomb_count, mean_abs_c_rate, GROUP_OCV};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{ocv_coefficient_gradient, ocv_unchecked, OCV_COEFFS};

/// Largest mean current, as a C-rate, accepted as a trickle.
pub const TRICKLE_MAX_C: f64 = 1.0 / 20.0;

/// Samples kept for the fit; longer records are decimated evenly.
pub const MAX_OCV_POINTS: usize = 4000;

struct OcvResidual {
    soc: Vec<f64>,
    voltage: Vec<f64>,
}

impl Residual for OcvResidual {
    fn residuals(&self, alpha: &[f64]) -> Option<Vec<f64>> {
        Some(
            self.soc
                .iter()
                .zip(&self.voltage)
                .map(|(x, u)| ocv_unchecked(*x, alpha) - u)
                .collect(),
        )
    }

    fn jacobian(&self, alpha: &[f64], _r: &[f64]) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.soc.len(), OCV_COEFFS);
        let mut grad = [0.0; OCV_COEFFS];
        for (k, x) in self.soc.iter().enumerate() {
            ocv_coefficient_gradient(*x, alpha, &mut grad);
            for (c, g) in grad.iter().enumerate() {
                j[(k, c)] = *g;
            }
        }
        Some(j)
    }
}

/// Fits the OCV coefficients to `(SoC, U)` pairs of a trickle record, with
/// SoC from Coulomb counting. Samples at zero current are skipped; a record
/// holding a discharge and a charge leg averages out the small polarization
/// of each.
pub fn fit_ocv(data: &Dataset, bounds: &ParamBounds, options: &NlsOptions) -> Result<FitResult> {
    let names: Vec<String> = (0..OCV_COEFFS).map(alpha_name).collect();
    let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let bounds = bounds.subset(&names)?;

    let rate = mean_abs_c_rate(data);
    if rate > TRICKLE_MAX_C {
        return Err(Error::DatasetMismatch {
            expected: "trickle-current OCV",
            detail: format!("mean |I| is {rate:.4} C, above the C/20 trickle limit"),
        });
    }
    if rate == 0.0 {
        return Err(Error::DatasetMismatch {
            expected: "trickle-current OCV",
            detail: "record carries no current".into(),
        });
    }

    let count = coulomb_count(data, data.meta.soc0, data.meta.capacity_ah)?;
    let loaded: Vec<usize> = (0..data.len()).filter(|&k| data.current[k] != 0.0).collect();
    let stride = loaded.len().div_ceil(MAX_OCV_POINTS).max(1);
    let picked: Vec<usize> = loaded.iter().copied().step_by(stride).collect();
    let residual = OcvResidual {
        soc: picked.iter().map(|&k| count.soc[k]).collect(),
        voltage: picked.iter().map(|&k| data.voltage[k]).collect(),
    };

    let mut fit = bounded_nls(&residual, &bounds, options)?;
    fit.group = GROUP_OCV.into();
    let (lo, hi) = residual
        .soc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    fit.diagnostics.insert("points".into(), picked.len() as f64);
    fit.diagnostics.insert("soc_min".into(), lo);
    fit.diagnostics.insert("soc_max".into(), hi);
    if count.clipped > 0 {
        fit.warnings.push(format!(
            "{} Coulomb-count samples fell outside [0, 1] and were clipped",
            count.clipped
        ));
    }
    Ok(fit)
}

/// Coefficient vector of an `ocv` result.
pub fn alpha_from(fit: &FitResult) -> Result<Vec<f64>> {
    (0..OCV_COEFFS).map(|k| fit.estimate(&alpha_name(k))).collect()
}

/// RMS difference of two OCV curves on `points` evenly spaced SoC values in
/// `[lo, hi]`.
pub fn ocv_curve_rms(a: &[f64], b: &[f64], lo: f64, hi: f64, points: usize) -> f64 {
    let n = points.max(2);
    let sum: f64 = (0..n)
        .map(|k| {
            let x = lo + (hi - lo) * k as f64 / (n - 1) as f64;
            (ocv_unchecked(x, a) - ocv_unchecked(x, b)).powi(2)
        })
        .sum();
    (sum / n as f64).sqrt()
}
