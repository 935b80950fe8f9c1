//! Step 2: ohmic resistance from voltage jumps at current steps.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::nls::{bounded_nls, FitResult, NlsOptions, ParamBounds, Residual};
use super::GROUP_RO;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::r_o;

/// Default current-step threshold as a C-rate.
pub const EDGE_THRESHOLD_C: f64 = 0.1;

/// Fewest samples accepted by [`fit_ro`].
pub const MIN_RO_SAMPLES: usize = 4;

/// Smallest SoC span accepted by [`fit_ro`].
pub const MIN_RO_SOC_SPAN: f64 = 0.5;

/// A current step between two adjacent samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseEdge {
    /// Last sample before the step.
    pub t_star: f64,
    /// First sample after the step.
    pub t_star_plus: f64,
    /// Index of `t_star` in the dataset.
    pub index: usize,
    /// Index of `t_star_plus` in the dataset.
    pub index_plus: usize,
    /// Current after minus current before, in amperes.
    pub delta_current: f64,
    /// The step reduces the current magnitude (a pulse ends).
    pub is_stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoSample {
    pub soc: f64,
    pub t_star: f64,
    /// Ohms.
    pub resistance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoSamples {
    pub samples: Vec<RoSample>,
    pub warnings: Vec<String>,
}

/// All current steps larger than `threshold_c` times the 1 C current. A
/// step spread over several consecutive sample intervals counts once.
pub fn detect_pulse_edges(data: &Dataset, threshold_c: f64) -> Vec<PulseEdge> {
    let threshold = threshold_c.abs() * data.meta.capacity_ah;
    let mut edges: Vec<PulseEdge> = Vec::new();
    for k in 0..data.len().saturating_sub(1) {
        let di = data.current[k + 1] - data.current[k];
        if di.abs() <= threshold {
            continue;
        }
        if let Some(last) = edges.last_mut() {
            if last.index_plus == k && last.delta_current.signum() == di.signum() {
                last.t_star_plus = data.time[k + 1];
                last.index_plus = k + 1;
                last.delta_current += di;
                last.is_stop = data.current[k + 1].abs() < data.current[last.index].abs();
                continue;
            }
        }
        edges.push(PulseEdge {
            t_star: data.time[k],
            t_star_plus: data.time[k + 1],
            index: k,
            index_plus: k + 1,
            delta_current: di,
            is_stop: data.current[k + 1].abs() < data.current[k].abs(),
        });
    }
    edges
}

/// `|dU / dI|` across each edge, paired with the SoC at `t_star`.
pub fn estimate_ro_samples(data: &Dataset, edges: &[PulseEdge], soc: &[f64]) -> RoSamples {
    let mut out = RoSamples::default();
    let mut seen: Vec<f64> = Vec::new();
    for e in edges {
        if seen.contains(&e.t_star) {
            continue;
        }
        seen.push(e.t_star);
        let di = data.current[e.index_plus] - data.current[e.index];
        if di == 0.0 {
            out.warnings
                .push(format!("edge at t = {} s has zero current step; skipped", e.t_star));
            continue;
        }
        let du = data.voltage[e.index_plus] - data.voltage[e.index];
        out.samples.push(RoSample {
            soc: soc[e.index],
            t_star: e.t_star,
            resistance: (du / di).abs(),
        });
    }
    out
}

struct RoResidual<'a> {
    samples: &'a [RoSample],
}

impl Residual for RoResidual<'_> {
    fn residuals(&self, g: &[f64]) -> Option<Vec<f64>> {
        Some(
            self.samples
                .iter()
                .map(|s| r_o(s.soc, g[0], g[1], g[2]) - s.resistance)
                .collect(),
        )
    }

    fn jacobian(&self, g: &[f64], _r: &[f64]) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.samples.len(), 3);
        for (k, s) in self.samples.iter().enumerate() {
            let e = (-g[2] * s.soc).exp();
            j[(k, 0)] = 1.0;
            j[(k, 1)] = e;
            j[(k, 2)] = -g[1] * s.soc * e;
        }
        Some(j)
    }
}

/// Fits `gamma1 + gamma2 * exp(-gamma3 * soc)` to resistance samples.
pub fn fit_ro(samples: &[RoSample], bounds: &ParamBounds, options: &NlsOptions) -> Result<FitResult> {
    let bounds = bounds.subset(&["gamma1", "gamma2", "gamma3"])?;
    if samples.len() < MIN_RO_SAMPLES {
        return Err(Error::Identifiability(format!(
            "{} resistance samples; at least {MIN_RO_SAMPLES} are needed",
            samples.len()
        )));
    }
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| {
        (a.min(s.soc), b.max(s.soc))
    });
    if hi - lo < MIN_RO_SOC_SPAN {
        return Err(Error::Identifiability(format!(
            "resistance samples span SoC {lo:.3}..{hi:.3}; a span of at least {MIN_RO_SOC_SPAN} is needed"
        )));
    }
    let mut fit = bounded_nls(&RoResidual { samples }, &bounds, options)?;
    fit.group = GROUP_RO.into();
    fit.diagnostics.insert("samples".into(), samples.len() as f64);
    fit.diagnostics.insert("soc_min".into(), lo);
    fit.diagnostics.insert("soc_max".into(), hi);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::identification::ro_bounds;

    fn dataset(current: Vec<f64>, voltage: Vec<f64>) -> Dataset {
        let time = (0..current.len()).map(|k| k as f64).collect();
        Dataset::new(time, current, voltage, None, DatasetMeta::default()).unwrap()
    }

    #[test]
    fn constant_current_has_no_edges() {
        let d = dataset(vec![-1.25; 20], vec![3.9; 20]);
        assert!(detect_pulse_edges(&d, EDGE_THRESHOLD_C).is_empty());
    }

    #[test]
    fn single_pulse_has_start_and_stop() {
        let mut i = vec![0.0; 10];
        i.extend(vec![-1.25; 10]);
        i.extend(vec![0.0; 10]);
        let d = dataset(i, vec![3.9; 30]);
        let edges = detect_pulse_edges(&d, EDGE_THRESHOLD_C);
        assert_eq!(edges.len(), 2);
        assert!(!edges[0].is_stop && edges[1].is_stop);
        assert_eq!((edges[1].t_star, edges[1].t_star_plus), (19.0, 20.0));
    }

    #[test]
    fn ramped_step_counts_once() {
        let d = dataset(vec![-1.25, -1.25, -0.6, 0.0, 0.0], vec![3.9; 5]);
        let edges = detect_pulse_edges(&d, EDGE_THRESHOLD_C);
        assert_eq!(edges.len(), 1);
        assert_eq!((edges[0].index, edges[0].index_plus), (1, 3));
        assert!((edges[0].delta_current - 1.25).abs() < 1e-12);
    }

    #[test]
    fn jump_arithmetic() {
        let d = dataset(vec![-1.25, 0.0], vec![3.80, 3.85]);
        let edges = detect_pulse_edges(&d, EDGE_THRESHOLD_C);
        let s = estimate_ro_samples(&d, &edges, &[0.5, 0.5]);
        assert!((s.samples[0].resistance - 0.04).abs() < 1e-12);
        let dup = estimate_ro_samples(&d, &[edges[0].clone(), edges[0].clone()], &[0.5, 0.5]);
        assert_eq!(dup.samples.len(), 1);
    }

    #[test]
    fn zero_step_is_skipped() {
        let d = dataset(vec![-1.25, -1.25], vec![3.8, 3.8]);
        let edge = PulseEdge {
            t_star: 0.0,
            t_star_plus: 1.0,
            index: 0,
            index_plus: 1,
            delta_current: 0.0,
            is_stop: false,
        };
        let s = estimate_ro_samples(&d, &[edge], &[0.5, 0.5]);
        assert!(s.samples.is_empty());
        assert_eq!(s.warnings.len(), 1);
    }

    fn synthetic(g: [f64; 3], n: usize) -> Vec<RoSample> {
        (0..n)
            .map(|k| {
                let soc = 0.02 + 0.96 * k as f64 / (n - 1) as f64;
                RoSample {
                    soc,
                    t_star: k as f64,
                    resistance: r_o(soc, g[0], g[1], g[2]),
                }
            })
            .collect()
    }

    #[test]
    fn exact_samples_recover_gamma() {
        let fit = fit_ro(
            &synthetic([0.026, 0.061, 14.36], 24),
            &ro_bounds(),
            &NlsOptions::default(),
        )
        .unwrap();
        for (n, t) in [("gamma1", 0.026), ("gamma2", 0.061), ("gamma3", 14.36)] {
            assert!((fit.estimates[n] / t - 1.0).abs() < 1e-6, "{n}");
        }
    }

    #[test]
    fn flat_truth_fits_exactly() {
        let fit = fit_ro(&synthetic([0.03, 0.0, 5.0], 12), &ro_bounds(), &NlsOptions::default()).unwrap();
        assert!(fit.residual_rms < 1e-9);
    }

    #[test]
    fn too_few_or_narrow_samples() {
        let three = synthetic([0.026, 0.061, 14.36], 3);
        assert!(matches!(
            fit_ro(&three, &ro_bounds(), &NlsOptions::default()),
            Err(Error::Identifiability(_))
        ));
        let mut narrow = synthetic([0.026, 0.061, 14.36], 6);
        for s in &mut narrow {
            s.soc = 0.5 + 0.1 * s.soc;
        }
        assert!(matches!(
            fit_ro(&narrow, &ro_bounds(), &NlsOptions::default()),
            Err(Error::Identifiability(_))
        ));
    }
}
