//! Box-constrained nonlinear least squares.
//!
//! Levenberg-Marquardt in coordinates normalized to the unit box, with
//! projection onto the box and a free set that drops variables pinned at a
//! bound by an outward-pointing gradient. Multi-start runs the initial
//! guess plus seeded uniform restarts and keeps the lowest cost.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBound {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub initial: f64,
}

impl ParamBound {
    pub fn new(name: &str, initial: f64, lower: f64, upper: f64) -> Self {
        Self {
            name: name.to_string(),
            lower,
            upper,
            initial,
        }
    }
}

/// Ordered search box with initial guesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamBounds {
    entries: Vec<ParamBound>,
}

impl ParamBounds {
    pub fn new(entries: Vec<ParamBound>) -> Result<Self> {
        let b = Self { entries };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidOptions("empty parameter bounds".into()));
        }
        for (k, e) in self.entries.iter().enumerate() {
            if !(e.lower.is_finite() && e.upper.is_finite() && e.initial.is_finite()) {
                return Err(Error::param(&e.name, "bounds and initial guess must be finite"));
            }
            if !(e.lower <= e.initial && e.initial <= e.upper) {
                return Err(Error::param(
                    &e.name,
                    format!(
                        "need lower <= initial <= upper, got {} <= {} <= {}",
                        e.lower, e.initial, e.upper
                    ),
                ));
            }
            if self.entries[..k].iter().any(|p| p.name == e.name) {
                return Err(Error::param(&e.name, "listed twice"));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ParamBound] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ParamBound> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn initial(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.initial).collect()
    }

    /// Replaces the initial guess of `name`, clamped into its box.
    pub fn set_initial(&mut self, name: &str, value: f64) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::param(name, "not in bounds"))?;
        e.initial = value.clamp(e.lower, e.upper);
        Ok(())
    }

    /// Bounds restricted to (or reordered as) `names`.
    pub fn subset(&self, names: &[&str]) -> Result<Self> {
        let entries = names
            .iter()
            .map(|n| {
                self.get(n)
                    .cloned()
                    .ok_or_else(|| Error::param(*n, "missing from bounds"))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    /// Entries of `other` replace same-named entries of `self`.
    pub fn merged(&self, other: &ParamBounds) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| other.get(&e.name).cloned().unwrap_or_else(|| e.clone()))
            .collect();
        Self { entries }
    }
}

/// A residual vector as a function of the parameters.
pub trait Residual: Sync {
    fn residuals(&self, theta: &[f64]) -> Option<Vec<f64>>;

    /// Jacobian with one row per residual; `None` selects forward
    /// differences.
    fn jacobian(&self, _theta: &[f64], _residuals: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

impl<F> Residual for F
where
    F: Fn(&[f64]) -> Option<Vec<f64>> + Sync,
{
    fn residuals(&self, theta: &[f64]) -> Option<Vec<f64>> {
        self(theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsOptions {
    pub max_iterations: usize,
    /// Relative cost reduction below which an accepted step ends the run.
    pub ftol: f64,
    /// Step length in normalized coordinates below which the run ends.
    pub xtol: f64,
    /// Uniformly sampled restarts in addition to the initial guess.
    pub restarts: usize,
    pub seed: u64,
    /// Forward-difference step in normalized coordinates.
    pub fd_step: f64,
}

impl Default for NlsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            ftol: 1e-12,
            xtol: 1e-12,
            restarts: 8,
            seed: 0,
            fd_step: 1e-7,
        }
    }
}

impl NlsOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStartSummary {
    pub starts: usize,
    pub converged: usize,
    /// Index of the winning start; 0 is the initial guess.
    pub best_start: usize,
    /// Final root-mean-square residual of each start, `None` when the
    /// start produced no finite residual.
    pub start_rms: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Parameter group, e.g. `ocv` or `solid`.
    pub group: String,
    pub estimates: BTreeMap<String, f64>,
    /// Root-mean-square residual in the residual's unit (volts, ohms or
    /// kelvin).
    pub residual_rms: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active_bounds: Vec<String>,
    pub multi_start: MultiStartSummary,
    /// Linearized standard errors, where the normal matrix is invertible.
    pub std_errors: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    /// Step-specific scalar diagnostics.
    pub diagnostics: BTreeMap<String, f64>,
}

impl FitResult {
    pub fn estimate(&self, name: &str) -> Result<f64> {
        self.estimates
            .get(name)
            .copied()
            .ok_or_else(|| Error::param(name, format!("not estimated by the `{}` step", self.group)))
    }

    /// A result that reports the initial guesses unchanged.
    pub fn from_initial(group: &str, bounds: &ParamBounds, warning: String) -> Self {
        Self {
            group: group.to_string(),
            estimates: bounds.entries().iter().map(|e| (e.name.clone(), e.initial)).collect(),
            residual_rms: 0.0,
            iterations: 0,
            converged: false,
            active_bounds: Vec::new(),
            multi_start: MultiStartSummary {
                starts: 0,
                converged: 0,
                best_start: 0,
                start_rms: Vec::new(),
            },
            std_errors: BTreeMap::new(),
            warnings: vec![warning],
            diagnostics: BTreeMap::new(),
        }
    }
}

/// Maps a parameter's box to `[0, 1]`. Strictly positive boxes are mapped
/// logarithmically, so that products and ratios of parameters, which
/// circuit responses mostly depend on, become linear in the solver's
/// coordinates.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lower: f64,
    upper: f64,
    log: bool,
}

impl Axis {
    fn new(b: &ParamBound) -> Self {
        Self {
            lower: b.lower,
            upper: b.upper,
            log: b.lower > 0.0,
        }
    }

    fn fixed(&self) -> bool {
        self.upper <= self.lower
    }

    fn to_theta(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let v = if self.log {
            (self.lower.ln() + u * (self.upper.ln() - self.lower.ln())).exp()
        } else {
            self.lower + u * (self.upper - self.lower)
        };
        v.clamp(self.lower, self.upper)
    }

    fn to_unit(&self, theta: f64) -> f64 {
        if self.fixed() {
            0.0
        } else if self.log {
            (theta.ln() - self.lower.ln()) / (self.upper.ln() - self.lower.ln())
        } else {
            (theta - self.lower) / (self.upper - self.lower)
        }
    }

    /// `d theta / d u` at `theta`.
    fn slope(&self, theta: f64) -> f64 {
        if self.fixed() {
            0.0
        } else if self.log {
            theta * (self.upper.ln() - self.lower.ln())
        } else {
            self.upper - self.lower
        }
    }
}

struct Problem<'a> {
    residual: &'a dyn Residual,
    axes: Vec<Axis>,
    options: &'a NlsOptions,
}

struct Run {
    u: Vec<f64>,
    cost: f64,
    m: usize,
    iterations: usize,
    converged: bool,
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn half_norm2(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

impl Problem<'_> {
    fn theta(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.axes).map(|(u, a)| a.to_theta(*u)).collect()
    }

    fn free(&self, i: usize) -> bool {
        !self.axes[i].fixed()
    }

    fn eval(&self, u: &[f64]) -> Option<Vec<f64>> {
        let r = self.residual.residuals(&self.theta(u))?;
        (finite(&r) && !r.is_empty()).then_some(r)
    }

    /// Jacobian with respect to the normalized coordinates.
    fn jacobian(&self, u: &[f64], r: &[f64]) -> Option<DMatrix<f64>> {
        let p = u.len();
        let theta = self.theta(u);
        if let Some(mut j) = self.residual.jacobian(&theta, r) {
            if j.nrows() != r.len() || j.ncols() != p {
                return None;
            }
            for (c, a) in self.axes.iter().enumerate() {
                j.column_mut(c).scale_mut(a.slope(theta[c]));
            }
            return finite(j.as_slice()).then_some(j);
        }
        let mut j = DMatrix::zeros(r.len(), p);
        for c in 0..p {
            if !self.free(c) {
                continue;
            }
            let h = if u[c] + self.options.fd_step <= 1.0 {
                self.options.fd_step
            } else {
                -self.options.fd_step
            };
            let mut up = u.to_vec();
            up[c] += h;
            let rp = self.eval(&up)?;
            if rp.len() != r.len() {
                return None;
            }
            for (k, (a, b)) in rp.iter().zip(r).enumerate() {
                j[(k, c)] = (a - b) / h;
            }
        }
        Some(j)
    }

    /// Second-order correction to the damped step `y` (in scaled free
    /// coordinates) from a finite-difference directional second derivative
    /// of the residual along the step.
    #[allow(clippy::too_many_arguments)]
    fn acceleration(
        &self,
        u: &[f64],
        r: &[f64],
        j: &DMatrix<f64>,
        free: &[usize],
        scale: &[f64],
        y: &DVector<f64>,
        left: &DMatrix<f64>,
        right_t: &DMatrix<f64>,
        sigma: &DVector<f64>,
        damp: f64,
    ) -> Option<DVector<f64>> {
        let h = GEODESIC_STEP;
        let mut probe = u.to_vec();
        let mut dir = vec![0.0; u.len()];
        for (k, &i) in free.iter().enumerate() {
            dir[i] = y[k] / scale[k];
            probe[i] = u[i] + h * dir[i];
            if !(0.0..=1.0).contains(&probe[i]) {
                return None;
            }
        }
        let rp = self.eval(&probe)?;
        let jd = j * DVector::from_column_slice(&dir);
        let second = DVector::from_iterator(
            r.len(),
            rp.iter()
                .zip(r)
                .zip(jd.iter())
                .map(|((a, b), d)| 2.0 / h * ((a - b) / h - d)),
        );
        let proj = left.tr_mul(&second);
        let coeff = DVector::from_iterator(
            sigma.len(),
            sigma.iter().zip(proj.iter()).map(|(s, q)| {
                let d = s * s + damp;
                if d > 0.0 {
                    -s * q / d
                } else {
                    0.0
                }
            }),
        );
        Some(right_t.tr_mul(&coeff))
    }

    fn solve(&self, u0: Vec<f64>) -> Option<Run> {
        let p = u0.len();
        let opts = self.options;
        let mut u = u0;
        let mut r = self.eval(&u)?;
        let m = r.len();
        let mut cost = half_norm2(&r);
        let mut lambda = 1e-3;
        let mut iterations = 0;
        let mut converged = false;

        while iterations < opts.max_iterations {
            iterations += 1;
            if cost == 0.0 {
                converged = true;
                break;
            }
            let Some(j) = self.jacobian(&u, &r) else { break };
            let rv = DVector::from_column_slice(&r);
            let g = j.tr_mul(&rv);
            let free: Vec<usize> = (0..p)
                .filter(|&i| self.free(i) && !((u[i] <= 0.0 && g[i] > 0.0) || (u[i] >= 1.0 && g[i] < 0.0)))
                .collect();
            if free.is_empty() {
                converged = true;
                break;
            }
            // Damped Gauss-Newton steps from the SVD of the column-scaled
            // Jacobian; this avoids squaring its condition number.
            let mut jf = j.select_columns(&free);
            let scale: Vec<f64> = (0..free.len()).map(|c| jf.column(c).norm()).collect();
            let max_scale = scale.iter().fold(0.0f64, |m, v| m.max(*v));
            if max_scale == 0.0 {
                converged = true;
                break;
            }
            let scale: Vec<f64> = scale.iter().map(|s| s.max(1e-12 * max_scale)).collect();
            for (c, s) in scale.iter().enumerate() {
                jf.column_mut(c).unscale_mut(*s);
            }
            let svd = jf.svd(true, true);
            let (Some(left), Some(right_t)) = (svd.u.as_ref(), svd.v_t.as_ref()) else {
                break;
            };
            let proj = left.tr_mul(&rv);
            let sigma = &svd.singular_values;
            let sigma_max = sigma.iter().fold(0.0f64, |m, v| m.max(*v));

            let mut accepted = false;
            while lambda < 1e16 {
                let damp = lambda * sigma_max * sigma_max;
                let coeff = DVector::from_iterator(
                    sigma.len(),
                    sigma.iter().zip(proj.iter()).map(|(s, q)| {
                        let d = s * s + damp;
                        if d > 0.0 {
                            -s * q / d
                        } else {
                            0.0
                        }
                    }),
                );
                let mut y = right_t.tr_mul(&coeff);
                // Geodesic acceleration: bends the step along curved
                // valleys, where plain damped steps crawl.
                if let Some(a) = self.acceleration(&u, &r, &j, &free, &scale, &y, left, right_t, sigma, damp) {
                    let (vn, an) = (y.norm(), a.norm());
                    if vn > 0.0 && 2.0 * an <= GEODESIC_RATIO * vn {
                        y += 0.5 * a;
                    }
                }
                let mut trial = u.clone();
                for (k, &i) in free.iter().enumerate() {
                    trial[i] = (u[i] + y[k] / scale[k]).clamp(0.0, 1.0);
                }
                let step = trial.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if step == 0.0 {
                    break;
                }
                match self.eval(&trial) {
                    Some(rt) if half_norm2(&rt) < cost => {
                        let new_cost = half_norm2(&rt);
                        let small_gain = cost - new_cost <= opts.ftol * cost;
                        u = trial;
                        r = rt;
                        cost = new_cost;
                        lambda = (lambda * 0.3).max(1e-15);
                        accepted = true;
                        converged = small_gain || step <= opts.xtol;
                        break;
                    }
                    _ => lambda *= 10.0,
                }
            }
            if !accepted {
                // No descent is available at working precision.
                converged = true;
                break;
            }
            if converged {
                break;
            }
        }
        Some(Run {
            u,
            cost,
            m,
            iterations,
            converged,
        })
    }
}

/// Caps rayon parallelism when `BATTX_THREADS` is set; safe to call more
/// than once.
pub fn configure_threads_from_env() {
    if let Some(n) = std::env::var("BATTX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Largest ratio of acceleration to velocity for which the second-order
/// step correction is applied.
const GEODESIC_RATIO: f64 = 0.75;
/// Relative probe length for the directional second derivative.
const GEODESIC_STEP: f64 = 0.1;

/// Relative RMS gap under which two starts are treated as tied.
const TIE_REL: f64 = 1e-6;
/// Absolute RMS gap, in residual units, under which two starts are tied.
const TIE_ABS: f64 = 1e-9;

/// Minimizes `0.5 * |r(theta)|^2` over the box of `bounds`.
pub fn bounded_nls(residual: &dyn Residual, bounds: &ParamBounds, options: &NlsOptions) -> Result<FitResult> {
    bounds.validate()?;
    let entries = bounds.entries();
    let axes: Vec<Axis> = entries.iter().map(Axis::new).collect();
    let u_init: Vec<f64> = entries.iter().zip(&axes).map(|(e, a)| a.to_unit(e.initial)).collect();
    let mut starts = vec![u_init];
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for _ in 0..options.restarts {
        starts.push(
            axes.iter()
                .map(|a| if a.fixed() { 0.0 } else { rng.random::<f64>() })
                .collect(),
        );
    }
    let problem = Problem {
        residual,
        axes,
        options,
    };

    let runs: Vec<Option<Run>> = starts.into_par_iter().map(|u0| problem.solve(u0)).collect();
    let start_rms: Vec<Option<f64>> = runs
        .iter()
        .map(|r| r.as_ref().map(|r| (2.0 * r.cost / r.m as f64).sqrt()))
        .collect();
    // Starts that tie with the lowest RMS count as equal and the earliest
    // wins, so a fit seeded at a minimum stays there when the minimum is
    // not unique.
    let min_rms = start_rms.iter().flatten().fold(f64::INFINITY, |m, v| m.min(*v));
    let best_start = start_rms
        .iter()
        .position(|r| r.is_some_and(|r| r <= min_rms * (1.0 + TIE_REL) + TIE_ABS))
        .ok_or_else(|| Error::Optimization("no start produced a finite residual".into()))?;
    let n_converged = runs.iter().flatten().filter(|r| r.converged).count();
    let best = runs[best_start].as_ref().expect("best start exists");

    let theta = problem.theta(&best.u);
    let mut active = Vec::new();
    for (k, e) in entries.iter().enumerate() {
        if problem.free(k) && (best.u[k] <= 1e-9 || best.u[k] >= 1.0 - 1e-9) {
            active.push(e.name.clone());
        }
    }
    let std_errors = standard_errors(&problem, &best.u, best.cost, best.m, entries);

    Ok(FitResult {
        group: String::new(),
        estimates: entries.iter().zip(&theta).map(|(e, v)| (e.name.clone(), *v)).collect(),
        residual_rms: (2.0 * best.cost / best.m as f64).sqrt(),
        iterations: best.iterations,
        converged: best.converged,
        active_bounds: active,
        multi_start: MultiStartSummary {
            starts: runs.len(),
            converged: n_converged,
            best_start,
            start_rms,
        },
        std_errors,
        warnings: Vec::new(),
        diagnostics: BTreeMap::new(),
    })
}

fn standard_errors(problem: &Problem, u: &[f64], cost: f64, m: usize, entries: &[ParamBound]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let p = u.len();
    if m <= p {
        return out;
    }
    let Some(r) = problem.eval(u) else { return out };
    let Some(j) = problem.jacobian(u, &r) else { return out };
    let free: Vec<usize> = (0..p).filter(|&i| problem.free(i)).collect();
    let theta = problem.theta(u);
    let jf = j.select_columns(&free);
    let Some(inv) = jf.tr_mul(&jf).try_inverse() else {
        return out;
    };
    let s2 = 2.0 * cost / (m - p) as f64;
    for (k, &i) in free.iter().enumerate() {
        let var = s2 * inv[(k, k)];
        if var.is_finite() && var >= 0.0 {
            out.insert(entries[i].name.clone(), var.sqrt() * problem.axes[i].slope(theta[i]));
        }
    }
    out
}
