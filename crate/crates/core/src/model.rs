//! Cell parameters, state, and the algebraic and differential relations of
//! the four coupled sub-circuits: the solid-diffusion ladder (A), the
//! three-node electrolyte ladder (B), the lumped core/surface thermal pair
//! (C) and the terminal-voltage assembly (D).
//!
//! Sign convention: positive current charges the cell. Node voltages of both
//! ladders are normalized to `[0, 1]`; temperatures are in kelvin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of coefficients in the open-circuit-voltage parameterization.
pub const OCV_COEFFS: usize = 17;

/// Branch boundary of the OCV function: the logistic mixture applies at or
/// below this surface concentration, the exponential pair above it.
pub const OCV_BRANCH_POINT: f64 = 0.9;

/// Equilibrium value of every electrolyte node.
pub const ELECTROLYTE_EQUILIBRIUM: f64 = 0.5;

/// OCV coefficients fitted to the reference INR18650-25R cell.
pub const REFERENCE_ALPHA: [f64; OCV_COEFFS] = [
    -9.048, -2.360, -12.986, 0.010, 13.036, -32.840, -0.087, 2.359, -14.863, 0.055, -0.788, -7.136, 0.966, 31.132,
    -3.414, 0.513, 1.816,
];

/// Capacitance ratios of a five-volume discretization of the electrode particle.
pub const REFERENCE_ETA: [f64; 5] = [1.0, 0.6066, 0.3115, 0.1148, 0.0164];

/// Resistance ratios matching [`REFERENCE_ETA`].
pub const REFERENCE_SIGMA: [f64; 4] = [1.0, 1.77, 4.00, 15.98];

/// Every identifiable constant of the model.
///
/// Capacitances of the two ladders are in coulomb per normalized volt, so
/// `c_s1 * sum(eta)` is the total charge capacity in coulombs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n_solid_nodes: usize,
    pub c_s1: f64,
    pub r_s1: f64,
    pub eta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub c_e: f64,
    pub r_e: f64,
    pub alpha: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub c_core: f64,
    pub r_core: f64,
    pub c_surf: f64,
    pub r_surf: f64,
    pub t_ref: f64,
    pub v_cut_low: f64,
    pub v_cut_high: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::inr18650_25r()
    }
}

impl ModelParams {
    /// Final estimates for the Samsung INR18650-25R reference cell.
    ///
    /// `gamma3` is stored as `+14.36`: with the literal negative value the
    /// ohmic resistance grows as `exp(14.36 * soc)` and reaches ~10^5 ohm at
    /// full charge.
    pub fn inr18650_25r() -> Self {
        Self {
            n_solid_nodes: 5,
            c_s1: 4521.0,
            r_s1: 0.114,
            eta: REFERENCE_ETA.to_vec(),
            sigma: REFERENCE_SIGMA.to_vec(),
            c_e: 3691.0,
            r_e: 0.007,
            alpha: REFERENCE_ALPHA.to_vec(),
            beta1: 0.789,
            beta2: 0.317,
            gamma1: 0.026,
            gamma2: 0.061,
            gamma3: 14.36,
            kappa1: 30.0,
            kappa2: 70.0,
            c_core: 40.0,
            r_core: 4.0,
            c_surf: 10.0,
            r_surf: 7.0,
            t_ref: 298.15,
            v_cut_low: 2.5,
            v_cut_high: 4.2,
        }
    }

    /// Checks every structural and sign invariant, naming the first field
    /// that fails.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_solid_nodes;
        if n < 2 {
            return Err(Error::param("n_solid_nodes", format!("must be >= 2, got {n}")));
        }
        if self.eta.len() != n {
            return Err(Error::param(
                "eta",
                format!("length {} does not match n_solid_nodes = {n}", self.eta.len()),
            ));
        }
        if self.sigma.len() != n - 1 {
            return Err(Error::param(
                "sigma",
                format!(
                    "length {} does not match n_solid_nodes - 1 = {}",
                    self.sigma.len(),
                    n - 1
                ),
            ));
        }
        if self.eta[0] != 1.0 {
            return Err(Error::param(
                "eta",
                format!("eta[0] must be exactly 1, got {}", self.eta[0]),
            ));
        }
        if self.sigma[0] != 1.0 {
            return Err(Error::param(
                "sigma",
                format!("sigma[0] must be exactly 1, got {}", self.sigma[0]),
            ));
        }
        for (i, &e) in self.eta.iter().enumerate() {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::param("eta", format!("eta[{i}] = {e} must be positive")));
            }
        }
        for (i, &s) in self.sigma.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::param("sigma", format!("sigma[{i}] = {s} must be positive")));
            }
        }
        if self.alpha.len() != OCV_COEFFS {
            return Err(Error::param(
                "alpha",
                format!("expected {OCV_COEFFS} coefficients, got {}", self.alpha.len()),
            ));
        }
        if let Some(i) = self.alpha.iter().position(|a| !a.is_finite()) {
            return Err(Error::param("alpha", format!("alpha[{i}] is not finite")));
        }
        let positive = [
            ("c_s1", self.c_s1),
            ("r_s1", self.r_s1),
            ("c_e", self.c_e),
            ("r_e", self.r_e),
            ("c_core", self.c_core),
            ("r_core", self.r_core),
            ("c_surf", self.c_surf),
            ("r_surf", self.r_surf),
            ("t_ref", self.t_ref),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, format!("must be strictly positive, got {v}")));
            }
        }
        let finite = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("v_cut_low", self.v_cut_low),
            ("v_cut_high", self.v_cut_high),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::param(name, "must be finite"));
            }
        }
        if self.v_cut_low >= self.v_cut_high {
            return Err(Error::param(
                "v_cut_low",
                format!(
                    "v_cut_low {} must be below v_cut_high {}",
                    self.v_cut_low, self.v_cut_high
                ),
            ));
        }
        Ok(())
    }

    /// Capacitance of solid node `i` (zero-based).
    pub fn c_s(&self, i: usize) -> f64 {
        self.eta[i] * self.c_s1
    }

    /// Reference-temperature resistance between solid nodes `j` and `j + 1`.
    pub fn r_s(&self, j: usize) -> f64 {
        self.sigma[j] * self.r_s1
    }

    /// Sum of all solid capacitances in coulombs.
    pub fn total_solid_capacitance(&self) -> f64 {
        self.c_s1 * self.eta.iter().sum::<f64>()
    }

    /// Charge capacity implied by the solid ladder, in amp-hours.
    pub fn capacity_ah(&self) -> f64 {
        self.total_solid_capacitance() / 3600.0
    }
}

/// Dynamic state of the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    /// Solid-node voltages from the particle surface inward.
    pub v_s: Vec<f64>,
    /// Electrolyte-node voltages; node 0 receives `+I / C_e`.
    pub v_e: [f64; 3],
    pub t_core: f64,
    pub t_surf: f64,
}

impl CellState {
    /// Equilibrium state: uniform solid ladder at `soc`, electrolyte at 0.5,
    /// both temperatures at `temperature`.
    pub fn equilibrium(n_solid_nodes: usize, soc: f64, temperature: f64) -> Self {
        Self {
            v_s: vec![soc; n_solid_nodes],
            v_e: [ELECTROLYTE_EQUILIBRIUM; 3],
            t_core: temperature,
            t_surf: temperature,
        }
    }

    pub fn validate(&self, n_solid_nodes: usize) -> Result<()> {
        if self.v_s.len() != n_solid_nodes {
            return Err(Error::DimensionMismatch {
                expected: n_solid_nodes,
                actual: self.v_s.len(),
            });
        }
        for (i, &v) in self.v_s.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidState(format!("v_s[{i}] = {v} outside [0, 1]")));
            }
        }
        for (j, &v) in self.v_e.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidState(format!("v_e[{j}] = {v} outside [0, 1]")));
            }
        }
        if !(self.t_core.is_finite() && self.t_core > 0.0) {
            return Err(Error::InvalidState(format!(
                "t_core = {} must be positive",
                self.t_core
            )));
        }
        if !(self.t_surf.is_finite() && self.t_surf > 0.0) {
            return Err(Error::InvalidState(format!(
                "t_surf = {} must be positive",
                self.t_surf
            )));
        }
        Ok(())
    }

    pub(crate) fn pack(&self, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.v_s);
        out.extend_from_slice(&self.v_e);
        out.push(self.t_core);
        out.push(self.t_surf);
    }

    pub(crate) fn unpack(x: &[f64]) -> Self {
        let n = x.len() - 5;
        Self {
            v_s: x[..n].to_vec(),
            v_e: [x[n], x[n + 1], x[n + 2]],
            t_core: x[n + 3],
            t_surf: x[n + 4],
        }
    }
}

/// Time derivative of a [`CellState`], per second.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub v_s: Vec<f64>,
    pub v_e: [f64; 3],
    pub t_core: f64,
    pub t_surf: f64,
}

/// State of charge as a fraction: the capacitance-weighted mean of the solid
/// node voltages.
pub fn soc(state: &CellState, params: &ModelParams) -> f64 {
    weighted_soc(&state.v_s, &params.eta)
}

pub(crate) fn weighted_soc(v_s: &[f64], eta: &[f64]) -> f64 {
    // Offsetting by the first node keeps uniform ladders exact.
    let base = v_s[0];
    let (num, den) = v_s
        .iter()
        .zip(eta)
        .fold((0.0, 0.0), |(n, d), (v, e)| (n + (v - base) * e, d + e));
    base + num / den
}

#[inline]
fn logistic(steepness: f64, center: f64, x: f64) -> f64 {
    1.0 / (1.0 + (steepness * (x - center)).exp())
}

/// Open-circuit potential of the solid phase as a function of the surface
/// node voltage.
pub fn ocv_us(v_s1: f64, alpha: &[f64]) -> Result<f64> {
    if alpha.len() != OCV_COEFFS {
        return Err(Error::DimensionMismatch {
            expected: OCV_COEFFS,
            actual: alpha.len(),
        });
    }
    if !(0.0..=1.0).contains(&v_s1) {
        return Err(Error::domain("ocv_us", format!("v_s1 = {v_s1} outside [0, 1]")));
    }
    Ok(ocv_unchecked(v_s1, alpha))
}

/// OCV evaluation without range checks; `alpha` must hold 17 entries.
pub(crate) fn ocv_unchecked(x: f64, a: &[f64]) -> f64 {
    if x <= OCV_BRANCH_POINT {
        a[0] + a[1] * logistic(a[2], a[3], x)
            + a[4] * logistic(a[5], a[6], x)
            + a[7] * logistic(a[8], a[9], x)
            + a[10] * logistic(a[11], 0.0, x)
            + a[12] * x
    } else {
        a[13] * (a[14] * x).exp() + a[15] * (a[16] * x).exp()
    }
}

/// Gradient of the OCV function with respect to its 17 coefficients.
pub(crate) fn ocv_coefficient_gradient(x: f64, a: &[f64], grad: &mut [f64]) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    if x <= OCV_BRANCH_POINT {
        for (amp, k, c) in [(1, 2, 3), (4, 5, 6), (7, 8, 9)] {
            let l = logistic(a[k], a[c], x);
            let dl = l * (1.0 - l);
            grad[amp] = l;
            grad[k] = -a[amp] * dl * (x - a[c]);
            grad[c] = a[amp] * dl * a[k];
        }
        let l = logistic(a[11], 0.0, x);
        grad[0] = 1.0;
        grad[10] = l;
        grad[11] = -a[10] * l * (1.0 - l) * x;
        grad[12] = x;
    } else {
        let e1 = (a[14] * x).exp();
        let e2 = (a[16] * x).exp();
        grad[13] = e1;
        grad[14] = a[13] * x * e1;
        grad[15] = e2;
        grad[16] = a[15] * x * e2;
    }
}

/// Electrolyte potential from the two end nodes of the electrolyte ladder.
pub fn ue(v_e1: f64, v_e3: f64, beta1: f64, beta2: f64) -> Result<f64> {
    let num = v_e1 + beta2;
    let den = v_e3 + beta2;
    if !(num > 0.0 && den > 0.0) {
        return Err(Error::domain(
            "ue",
            format!("log argument ({v_e1} + {beta2}) / ({v_e3} + {beta2}) is not positive"),
        ));
    }
    Ok(beta1 * (num / den).ln())
}

/// Reference-temperature ohmic resistance as a function of state of charge.
pub fn r_o(soc: f64, gamma1: f64, gamma2: f64, gamma3: f64) -> f64 {
    gamma1 + gamma2 * (-gamma3 * soc).exp()
}

/// Arrhenius factor `exp(kappa (1/T - 1/T_ref))`.
pub fn arrhenius(kappa: f64, t: f64, t_ref: f64) -> f64 {
    (kappa * (1.0 / t - 1.0 / t_ref)).exp()
}

fn check_temperature(function: &'static str, t_core: f64, t_ref: f64) -> Result<()> {
    if !(t_core.is_finite() && t_core > 0.0) {
        return Err(Error::domain(function, format!("t_core = {t_core} must be positive")));
    }
    if !(t_ref.is_finite() && t_ref > 0.0) {
        return Err(Error::domain(function, format!("t_ref = {t_ref} must be positive")));
    }
    Ok(())
}

/// Temperature-dependent ohmic resistance.
pub fn r_o_t(soc: f64, t_core: f64, params: &ModelParams) -> Result<f64> {
    check_temperature("r_o_t", t_core, params.t_ref)?;
    Ok(r_o(soc, params.gamma1, params.gamma2, params.gamma3) * arrhenius(params.kappa1, t_core, params.t_ref))
}

/// Temperature-dependent base resistance of the solid ladder.
pub fn r_s1_t(t_core: f64, params: &ModelParams) -> Result<f64> {
    check_temperature("r_s1_t", t_core, params.t_ref)?;
    Ok(params.r_s1 * arrhenius(params.kappa2, t_core, params.t_ref))
}

/// Internal heat generation rate in watts.
pub fn heat_rate(current: f64, state: &CellState, params: &ModelParams) -> Result<f64> {
    let s = soc(state, params);
    let us_bulk = ocv_us(s.clamp(0.0, 1.0), &params.alpha)?;
    let us_surf = ocv_us(state.v_s[0], &params.alpha)?;
    let r = r_o_t(s, state.t_core, params)?;
    Ok(-current * (us_bulk - us_surf - r * current))
}

/// Terminal voltage: surface OCV plus electrolyte potential plus ohmic drop.
pub fn terminal_voltage(state: &CellState, current: f64, params: &ModelParams) -> Result<f64> {
    let us = ocv_us(state.v_s[0], &params.alpha)?;
    let ue = ue(state.v_e[0], state.v_e[2], params.beta1, params.beta2)?;
    let r = r_o_t(soc(state, params), state.t_core, params)?;
    Ok(us + ue + r * current)
}

/// Right-hand side of the full coupled system.
pub fn rhs(state: &CellState, current: f64, t_amb: f64, params: &ModelParams) -> Result<StateDerivative> {
    params.validate()?;
    state.validate(params.n_solid_nodes)?;
    if !(t_amb.is_finite() && t_amb > 0.0) {
        return Err(Error::domain("rhs", format!("t_amb = {t_amb} must be positive")));
    }
    let kernel = Kernel::new(params);
    let mut x = Vec::with_capacity(kernel.dim());
    state.pack(&mut x);
    let mut dx = vec![0.0; kernel.dim()];
    kernel.rhs(&x, current, t_amb, &mut dx);
    Ok(StateDerivative {
        v_s: dx[..kernel.n].to_vec(),
        v_e: [dx[kernel.n], dx[kernel.n + 1], dx[kernel.n + 2]],
        t_core: dx[kernel.n + 3],
        t_surf: dx[kernel.n + 4],
    })
}

/// Precomputed constants for evaluating the model on packed state vectors
/// `[v_s.., v_e1, v_e2, v_e3, t_core, t_surf]`.
///
/// OCV arguments are clamped to `[0, 1]` here; range policy belongs to the
/// caller.
#[derive(Debug, Clone)]
pub(crate) struct Kernel<'a> {
    pub params: &'a ModelParams,
    pub n: usize,
    inv_c_s: Vec<f64>,
    sigma_r: Vec<f64>,
    inv_eta_sum: f64,
}

impl<'a> Kernel<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let n = params.n_solid_nodes;
        Self {
            params,
            n,
            inv_c_s: (0..n).map(|i| 1.0 / params.c_s(i)).collect(),
            sigma_r: (0..n - 1).map(|j| params.r_s(j)).collect(),
            inv_eta_sum: 1.0 / params.eta.iter().sum::<f64>(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n + 5
    }

    pub fn soc(&self, x: &[f64]) -> f64 {
        let base = x[0];
        base + x[..self.n]
            .iter()
            .zip(&self.params.eta)
            .map(|(v, e)| (v - base) * e)
            .sum::<f64>()
            * self.inv_eta_sum
    }

    pub fn ohmic(&self, soc: f64, t_core: f64) -> f64 {
        let p = self.params;
        r_o(soc, p.gamma1, p.gamma2, p.gamma3) * arrhenius(p.kappa1, t_core, p.t_ref)
    }

    pub fn heat(&self, x: &[f64], current: f64) -> f64 {
        let p = self.params;
        let s = self.soc(x);
        let bulk = ocv_unchecked(s.clamp(0.0, 1.0), &p.alpha);
        let surf = ocv_unchecked(x[0].clamp(0.0, 1.0), &p.alpha);
        -current * (bulk - surf - self.ohmic(s, x[self.n + 3]) * current)
    }

    /// Terminal voltage, or `None` when the electrolyte log argument is not
    /// positive.
    pub fn voltage(&self, x: &[f64], current: f64) -> Option<f64> {
        let p = self.params;
        let n = self.n;
        let us = ocv_unchecked(x[0].clamp(0.0, 1.0), &p.alpha);
        let num = x[n] + p.beta2;
        let den = x[n + 2] + p.beta2;
        if !(num > 0.0 && den > 0.0) {
            return None;
        }
        let ue = p.beta1 * (num / den).ln();
        Some(us + ue + self.ohmic(self.soc(x), x[n + 3]) * current)
    }

    pub fn rhs(&self, x: &[f64], current: f64, t_amb: f64, dx: &mut [f64]) {
        let p = self.params;
        let n = self.n;
        let t_core = x[n + 3];
        let t_surf = x[n + 4];
        let arr_s = arrhenius(p.kappa2, t_core, p.t_ref);

        // Sub-circuit A: flows[j] is the current from node j+1 into node j.
        let mut prev_flow = current;
        for j in 0..n - 1 {
            let flow = (x[j + 1] - x[j]) / (self.sigma_r[j] * arr_s);
            dx[j] = (prev_flow + flow) * self.inv_c_s[j];
            prev_flow = -flow;
        }
        dx[n - 1] = prev_flow * self.inv_c_s[n - 1];

        // Sub-circuit B.
        let tau_e = p.c_e * p.r_e;
        let (e1, e2, e3) = (x[n], x[n + 1], x[n + 2]);
        dx[n] = (e2 - e1) / tau_e + current / p.c_e;
        dx[n + 1] = (e1 - 2.0 * e2 + e3) / tau_e;
        dx[n + 2] = (e2 - e3) / tau_e - current / p.c_e;

        // Sub-circuit C.
        let q = self.heat(x, current);
        dx[n + 3] = q / p.c_core + (t_surf - t_core) / (p.r_core * p.c_core);
        dx[n + 4] = (t_amb - t_surf) / (p.r_surf * p.c_surf) - (t_surf - t_core) / (p.r_core * p.c_surf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn alpha_with(entries: &[(usize, f64)]) -> Vec<f64> {
        let mut a = vec![0.0; OCV_COEFFS];
        for &(i, v) in entries {
            a[i] = v;
        }
        a
    }

    #[test]
    fn soc_full_empty_and_weighted() {
        let p = ModelParams::default();
        assert_eq!(soc(&CellState::equilibrium(5, 1.0, 298.15), &p), 1.0);
        assert_eq!(soc(&CellState::equilibrium(5, 0.0, 298.15), &p), 0.0);
        let mut s = CellState::equilibrium(5, 0.0, 298.15);
        s.v_s[0] = 1.0;
        // 1 / (1 + 0.6066 + 0.3115 + 0.1148 + 0.0164)
        assert_relative_eq!(soc(&s, &p), 1.0 / 2.0493, max_relative = 1e-12);
        assert!((soc(&s, &p) - 0.4880).abs() < 5e-5);
    }

    #[test]
    fn ocv_linear_and_exponential_branches() {
        let lin = alpha_with(&[(12, 1.0)]);
        assert_eq!(ocv_us(0.5, &lin).unwrap(), 0.5);
        let exp = alpha_with(&[(13, 2.0), (14, 0.0)]);
        assert_eq!(ocv_us(1.0, &exp).unwrap(), 2.0);
    }

    #[test]
    fn ocv_branch_gap_at_reference_coefficients() {
        let below = ocv_us(OCV_BRANCH_POINT, &REFERENCE_ALPHA).unwrap();
        let above = ocv_us(f64::from_bits(OCV_BRANCH_POINT.to_bits() + 1), &REFERENCE_ALPHA).unwrap();
        // Regression fixture: the printed coefficients leave a ~1.57 mV step.
        assert!((below - 4.069_692_512).abs() < 1e-8, "{below}");
        assert!((above - 4.071_264_376).abs() < 1e-8, "{above}");
        assert!(((above - below) - 1.571_863e-3).abs() < 1e-8);
    }

    #[test]
    fn ocv_rejects_out_of_range() {
        assert!(matches!(ocv_us(1.01, &REFERENCE_ALPHA), Err(Error::Domain { .. })));
        assert!(matches!(ocv_us(-0.01, &REFERENCE_ALPHA), Err(Error::Domain { .. })));
        assert!(matches!(ocv_us(0.5, &[0.0; 3]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn ocv_gradient_matches_finite_differences() {
        let a = REFERENCE_ALPHA.to_vec();
        let mut g = vec![0.0; OCV_COEFFS];
        for &x in &[0.05, 0.37, 0.9, 0.95] {
            ocv_coefficient_gradient(x, &a, &mut g);
            for i in 0..OCV_COEFFS {
                let h = 1e-6 * a[i].abs().max(1.0);
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[i] += h;
                am[i] -= h;
                let fd = (ocv_unchecked(x, &ap) - ocv_unchecked(x, &am)) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0),
                    "x={x} i={i} fd={fd} g={}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn ue_cases() {
        assert_eq!(ue(0.5, 0.5, 0.789, 0.317).unwrap(), 0.0);
        let v = ue(0.6, 0.4, 0.789, 0.317).unwrap();
        assert_relative_eq!(v, 0.789 * (0.917f64 / 0.717).ln(), max_relative = 1e-14);
        assert_eq!(ue(0.7, 0.2, 0.0, 0.317).unwrap(), 0.0);
        assert!(matches!(ue(0.1, 0.5, 0.789, -0.2), Err(Error::Domain { .. })));
    }

    #[test]
    fn ohmic_resistance_cases() {
        assert_eq!(r_o(0.0, 0.026, 0.061, 14.36), 0.026 + 0.061);
        assert_eq!(r_o(0.7, 0.026, 0.0, 14.36), 0.026);
        // Fixture on the SoC grid with the sign-corrected exponent: monotone decreasing.
        let grid: Vec<f64> = (0..=10).map(|k| r_o(k as f64 / 10.0, 0.026, 0.061, 14.36)).collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));
        assert_relative_eq!(grid[1], 0.026 + 0.061 * (-1.436f64).exp(), max_relative = 1e-14);
        // Printed (negative) exponent grows without bound at high SoC.
        let literal: Vec<f64> = (0..=10).map(|k| r_o(k as f64 / 10.0, 0.026, 0.061, -14.36)).collect();
        assert!(literal.windows(2).all(|w| w[1] > w[0]));
        assert!(literal[10] > 1e5);
    }

    #[test]
    fn arrhenius_scaled_resistances() {
        let p = ModelParams::default();
        let base = r_o(0.5, p.gamma1, p.gamma2, p.gamma3);
        assert_eq!(r_o_t(0.5, p.t_ref, &p).unwrap(), base);
        assert!(r_o_t(0.5, 310.0, &p).unwrap() < base);
        let expected = base * (30.0 * (1.0 / 308.15 - 1.0 / 298.15f64)).exp();
        assert_relative_eq!(r_o_t(0.5, 308.15, &p).unwrap(), expected, max_relative = 1e-14);

        assert_eq!(r_s1_t(p.t_ref, &p).unwrap(), p.r_s1);
        let expected = p.r_s1 * (70.0 * (1.0 / 313.15 - 1.0 / 298.15f64)).exp();
        assert_relative_eq!(r_s1_t(313.15, &p).unwrap(), expected, max_relative = 1e-14);
        let flat = ModelParams {
            kappa2: 0.0,
            ..p.clone()
        };
        assert_eq!(r_s1_t(330.0, &flat).unwrap(), flat.r_s1);
        assert!(r_o_t(0.5, 0.0, &p).is_err());
        assert!(r_s1_t(-1.0, &p).is_err());
    }

    #[test]
    fn heat_rate_at_equilibrium_is_joule_heating() {
        let p = ModelParams::default();
        let s = CellState::equilibrium(5, 0.6, 303.0);
        assert_eq!(heat_rate(0.0, &s, &p).unwrap(), 0.0);
        for i in [-7.5, -1.0, 2.0] {
            let r = r_o_t(0.6, 303.0, &p).unwrap();
            let q = heat_rate(i, &s, &p).unwrap();
            assert!(q > 0.0);
            assert_relative_eq!(q, r * i * i, max_relative = 1e-9);
        }
    }

    #[test]
    fn terminal_voltage_cases() {
        let p = ModelParams::default();
        let s = CellState::equilibrium(5, 0.42, p.t_ref);
        assert_eq!(terminal_voltage(&s, 0.0, &p).unwrap(), ocv_us(0.42, &p.alpha).unwrap());
        let mut d = s.clone();
        d.v_e = [0.45, 0.5, 0.55];
        assert!(terminal_voltage(&d, -2.0, &p).unwrap() < ocv_us(0.42, &p.alpha).unwrap());
    }

    #[test]
    fn rhs_equilibrium_and_injection() {
        let p = ModelParams::default();
        let s = CellState::equilibrium(5, 0.7, 300.0);
        let d = rhs(&s, 0.0, 300.0, &p).unwrap();
        assert!(d.v_s.iter().all(|&v| v == 0.0));
        assert_eq!(d.v_e, [0.0; 3]);
        assert_eq!((d.t_core, d.t_surf), (0.0, 0.0));

        let d = rhs(&s, 1.5, 300.0, &p).unwrap();
        assert_relative_eq!(d.v_s[0], 1.5 / p.c_s(0), max_relative = 1e-14);
        assert!(d.v_s[1..].iter().all(|&v| v == 0.0));
        assert_relative_eq!(d.v_e[0], 1.5 / p.c_e, max_relative = 1e-14);
        assert_relative_eq!(d.v_e[2], -1.5 / p.c_e, max_relative = 1e-14);
    }

    #[test]
    fn rhs_rejects_invalid_state() {
        let p = ModelParams::default();
        let mut s = CellState::equilibrium(5, 0.5, 300.0);
        s.v_s[2] = 1.2;
        assert!(matches!(rhs(&s, 0.0, 300.0, &p), Err(Error::InvalidState(_))));
        let s = CellState::equilibrium(4, 0.5, 300.0);
        assert!(matches!(rhs(&s, 0.0, 300.0, &p), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn validate_names_offending_field() {
        let mut p = ModelParams::default();
        p.eta.pop();
        match p.validate() {
            Err(Error::InvalidParams { field, .. }) => assert_eq!(field, "eta"),
            other => panic!("unexpected {other:?}"),
        }
        let p = ModelParams {
            r_e: -0.1,
            ..ModelParams::default()
        };
        match p.validate() {
            Err(Error::InvalidParams { field, .. }) => assert_eq!(field, "r_e"),
            other => panic!("unexpected {other:?}"),
        }
        let p = ModelParams {
            v_cut_low: 4.3,
            ..ModelParams::default()
        };
        assert!(p.validate().is_err());
        let mut p = ModelParams::default();
        p.sigma[0] = 1.1;
        assert!(p.validate().is_err());
        assert!(ModelParams::default().validate().is_ok());
    }

    #[test]
    fn capacity_identity_against_reported_charge() {
        let p = ModelParams::default();
        let q = p.total_solid_capacitance();
        assert_relative_eq!(q, 4521.0 * 2.0493, max_relative = 1e-12);
        assert!((q - 2.55 * 3600.0).abs() / (2.55 * 3600.0) < 0.05);
    }
}
