//! Closed-form constant-current solutions of the two diffusion ladders.
//!
//! Both ladders are linear systems `dV/dt = mu * Omega * V + b * I`. With one
//! zero eigenvalue and the rest distinct, the Cayley-Hamilton theorem reduces
//! any analytic function of `Omega` to a polynomial of degree `n - 1` whose
//! coefficients solve a Vandermonde system on the spectrum:
//!
//! ```text
//! exp(mu Omega t) = [Phi^-1 phi(mu, t)] (x) Omega,   (a (x) A = sum_i a_i A^(i-1))
//! ```
//!
//! and the forced response uses the antiderivative vector `phi_bar`.

use nalgebra::{DMatrix, DVector, SymmetricEigen, LU};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Relative tolerance below which two non-zero eigenvalues count as equal.
pub const DISTINCT_EIGENVALUE_TOL: f64 = 1e-9;

/// Largest accepted 1-norm condition estimate of the Vandermonde matrix.
pub const MAX_VANDERMONDE_CONDITION: f64 = 1e12;

/// A ladder `dV/dt = mu * omega * V + b * I` together with its cached
/// spectral data.
#[derive(Debug, Clone)]
pub struct LadderSystem {
    /// Dimensionless coupling matrix.
    pub omega: DMatrix<f64>,
    /// Rate `1 / (C R)` in 1/s.
    pub mu: f64,
    /// Input vector in 1/coulomb.
    pub b: DVector<f64>,
    /// Eigenvalues of `omega`, zero first, then decreasing.
    pub eigenvalues: DVector<f64>,
    /// Weights of the conserved linear functional (`eta` for the solid
    /// ladder, ones for the electrolyte ladder).
    pub conserved_weights: DVector<f64>,
    unit_b: DVector<f64>,
    vandermonde_lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    condition: f64,
    powers: Vec<DMatrix<f64>>,
}

impl LadderSystem {
    fn from_parts(omega: DMatrix<f64>, eigenvalues: DVector<f64>, conserved_weights: DVector<f64>) -> Result<Self> {
        let n = omega.nrows();
        let phi = vandermonde(eigenvalues.as_slice());
        let condition = condition_1norm(&phi);
        if !(condition.is_finite() && condition <= MAX_VANDERMONDE_CONDITION) {
            return Err(Error::IllConditioned(condition));
        }
        let mut powers = Vec::with_capacity(n);
        powers.push(DMatrix::identity(n, n));
        for k in 1..n {
            let next = &powers[k - 1] * &omega;
            powers.push(next);
        }
        let mut b = DVector::zeros(n);
        b[0] = 1.0;
        Ok(Self {
            omega,
            mu: 1.0,
            unit_b: b.clone(),
            b,
            eigenvalues,
            conserved_weights,
            vandermonde_lu: phi.lu(),
            condition,
            powers,
        })
    }

    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    /// 1-norm condition estimate of the eigenvalue Vandermonde matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// The Vandermonde matrix `Phi[i][k] = lambda_i^k`.
    pub fn vandermonde(&self) -> DMatrix<f64> {
        vandermonde(self.eigenvalues.as_slice())
    }

    /// Sets the physical scale: `mu = 1 / (c r)` and the input vector
    /// scaled by `1 / c`. The electrolyte ladder's input extracts at the
    /// last node as well.
    pub fn with_circuit(mut self, capacitance: f64, resistance: f64) -> Self {
        self.mu = 1.0 / (capacitance * resistance);
        self.b = &self.unit_b / capacitance;
        self
    }

    /// Solves `Phi a = v` for the polynomial coefficients.
    fn coefficients(&self, values: &DVector<f64>) -> DVector<f64> {
        self.vandermonde_lu
            .solve(values)
            .expect("Vandermonde matrix checked non-singular at construction")
    }

    /// `phi(mu, t)`: exponentials of the scaled spectrum.
    pub fn phi(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.eigenvalues.iter().map(|&l| (self.mu * l * t).exp()))
    }

    /// `phi_bar(mu, t) - phi_bar(mu, 0)`: `t` for the zero eigenvalue and
    /// `(exp(mu l t) - 1) / (mu l)` otherwise, formed with `exp_m1`.
    pub fn phi_bar_increment(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.eigenvalues.iter().map(|&l| {
                if l == 0.0 {
                    t
                } else {
                    let ml = self.mu * l;
                    (ml * t).exp_m1() / ml
                }
            }),
        )
    }

    fn expand(&self, coeffs: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (c, p) in coeffs.iter().zip(&self.powers) {
            out += p * *c;
        }
        out
    }

    /// Propagates the ladder over `t` seconds under a constant current.
    pub fn propagate(&self, t: f64, current: f64, v0: &DVector<f64>) -> DVector<f64> {
        let free = self.expand(&self.coefficients(&self.phi(t)));
        let forced = self.expand(&self.coefficients(&self.phi_bar_increment(t)));
        free * v0 + forced * (&self.b * current)
    }

    /// Precomputes the polynomial images of `v0` and `b` so that repeated
    /// evaluation at many times costs one small solve each.
    pub fn trajectory(&self, current: f64, v0: &DVector<f64>) -> LadderTrajectory<'_> {
        let n = self.dim();
        let bi = &self.b * current;
        let free_basis: Vec<DVector<f64>> = self.powers.iter().map(|p| p * v0).collect();
        let forced_basis: Vec<DVector<f64>> = self.powers.iter().map(|p| p * &bi).collect();
        // The polynomial coefficients are linear in the mode exponentials,
        // so each mode's contribution can be folded into one vector.
        let mut free_modes = vec![DVector::zeros(n); n];
        let mut forced_modes = vec![DVector::zeros(n); n];
        for i in 0..n {
            let mut unit = DVector::zeros(n);
            unit[i] = 1.0;
            let c = self.coefficients(&unit);
            for k in 0..n {
                free_modes[i].axpy(c[k], &free_basis[k], 1.0);
                forced_modes[i].axpy(c[k], &forced_basis[k], 1.0);
            }
        }
        LadderTrajectory {
            system: self,
            free_modes,
            forced_modes,
        }
    }
}

/// A constant-current trajectory of a [`LadderSystem`] from a fixed initial
/// state.
pub struct LadderTrajectory<'a> {
    system: &'a LadderSystem,
    free_modes: Vec<DVector<f64>>,
    forced_modes: Vec<DVector<f64>>,
}

impl LadderTrajectory<'_> {
    pub fn at(&self, t: f64) -> DVector<f64> {
        let sys = self.system;
        let mut out = DVector::zeros(sys.dim());
        for (i, &l) in sys.eigenvalues.iter().enumerate() {
            let ml = sys.mu * l;
            let (free, forced) = if l == 0.0 {
                (1.0, t)
            } else {
                ((ml * t).exp(), (ml * t).exp_m1() / ml)
            };
            out.axpy(free, &self.free_modes[i], 1.0);
            out.axpy(forced, &self.forced_modes[i], 1.0);
        }
        out
    }
}

fn vandermonde(eigs: &[f64]) -> DMatrix<f64> {
    let n = eigs.len();
    DMatrix::from_fn(n, n, |i, k| eigs[i].powi(k as i32))
}

fn condition_1norm(m: &DMatrix<f64>) -> f64 {
    let norm1 = |a: &DMatrix<f64>| {
        a.column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    match m.clone().try_inverse() {
        Some(inv) => norm1(m) * norm1(&inv),
        None => f64::INFINITY,
    }
}

/// Builds the tridiagonal solid-ladder coupling matrix from the capacitance
/// and resistance ratios, with unit circuit scale (`mu = 1`, `b = e1`). Use
/// [`LadderSystem::with_circuit`] to attach `C_s1` and `R_s1`.
pub fn build_omega_s(eta: &[f64], sigma: &[f64]) -> Result<LadderSystem> {
    let n = eta.len();
    if n < 2 {
        return Err(Error::param("eta", "need at least two solid nodes"));
    }
    if sigma.len() != n - 1 {
        return Err(Error::DimensionMismatch {
            expected: n - 1,
            actual: sigma.len(),
        });
    }
    if eta.iter().chain(sigma).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::param("eta/sigma", "ratios must be positive and finite"));
    }
    let mut omega = DMatrix::zeros(n, n);
    for j in 0..n - 1 {
        let up = 1.0 / (eta[j] * sigma[j]);
        let down = 1.0 / (eta[j + 1] * sigma[j]);
        omega[(j, j)] -= up;
        omega[(j, j + 1)] += up;
        omega[(j + 1, j)] += down;
        omega[(j + 1, j + 1)] -= down;
    }

    // diag(eta) * omega is symmetric, so D^(1/2) omega D^(-1/2) is too and
    // shares omega's spectrum.
    let sqrt_eta: Vec<f64> = eta.iter().map(|e| e.sqrt()).collect();
    let sym = DMatrix::from_fn(n, n, |i, k| sqrt_eta[i] * omega[(i, k)] / sqrt_eta[k]);
    let sym = (&sym + sym.transpose()) * 0.5;
    let mut eigs: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    // The largest eigenvalue is the conserved mode; pin it to exactly zero.
    eigs[0] = 0.0;
    let scale = eigs.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    for w in eigs.windows(2) {
        if (w[0] - w[1]).abs() <= DISTINCT_EIGENVALUE_TOL * scale {
            return Err(Error::DegenerateSpectrum(w[0], w[1]));
        }
    }
    LadderSystem::from_parts(omega, DVector::from_vec(eigs), DVector::from_column_slice(eta))
}

/// The fixed three-node electrolyte ladder with spectrum `{0, -1, -3}`, at
/// unit circuit scale; the input vector is `[1, 0, -1]`.
pub fn build_omega_e() -> LadderSystem {
    let omega = DMatrix::from_row_slice(3, 3, &[-1.0, 1.0, 0.0, 1.0, -2.0, 1.0, 0.0, 1.0, -1.0]);
    let eigs = DVector::from_vec(vec![0.0, -1.0, -3.0]);
    let mut sys = LadderSystem::from_parts(omega, eigs, DVector::from_element(3, 1.0))
        .expect("electrolyte Vandermonde is well-conditioned");
    sys.unit_b = DVector::from_vec(vec![1.0, 0.0, -1.0]);
    sys.b = sys.unit_b.clone();
    sys
}

/// `sum_i coeffs[i] * matrix^i`.
pub fn tensor_expand(coeffs: &[f64], matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: matrix.ncols(),
        });
    }
    if coeffs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: coeffs.len(),
        });
    }
    let mut power = DMatrix::identity(n, n);
    let mut out = DMatrix::zeros(n, n);
    for (k, c) in coeffs.iter().enumerate() {
        if k > 0 {
            power = &power * matrix;
        }
        out += &power * *c;
    }
    Ok(out)
}

/// `exp(mu * omega * t)` by the Cayley-Hamilton expansion.
pub fn matrix_exponential_ch(system: &LadderSystem, t: f64) -> Result<DMatrix<f64>> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::domain("matrix_exponential_ch", format!("t = {t} must be >= 0")));
    }
    let a = system.coefficients(&system.phi(t));
    tensor_expand(a.as_slice(), &system.omega)
}

/// Solid ladder system for `params` at the reference temperature.
pub fn solid_system(params: &ModelParams) -> Result<LadderSystem> {
    Ok(build_omega_s(&params.eta, &params.sigma)?.with_circuit(params.c_s1, params.r_s1))
}

/// Electrolyte ladder system for `params`.
pub fn electrolyte_system(params: &ModelParams) -> Result<LadderSystem> {
    if !(params.c_e > 0.0 && params.r_e > 0.0) {
        return Err(Error::param("c_e/r_e", "must be positive"));
    }
    Ok(build_omega_e().with_circuit(params.c_e, params.r_e))
}

fn check_time(function: &'static str, t: f64) -> Result<()> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::domain(function, format!("t = {t} must be >= 0")));
    }
    Ok(())
}

/// Solid node voltages after `t` seconds of constant `current` from `v_s0`,
/// with reference-temperature resistances.
pub fn vs_closed_form(t: f64, current: f64, v_s0: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    check_time("vs_closed_form", t)?;
    if v_s0.len() != params.n_solid_nodes {
        return Err(Error::DimensionMismatch {
            expected: params.n_solid_nodes,
            actual: v_s0.len(),
        });
    }
    let sys = solid_system(params)?;
    let v = sys.propagate(t, current, &DVector::from_column_slice(v_s0));
    Ok(v.iter().copied().collect())
}

/// Electrolyte node voltages after `t` seconds of constant `current` from
/// `v_e0`.
pub fn ve_closed_form(t: f64, current: f64, v_e0: &[f64; 3], params: &ModelParams) -> Result<[f64; 3]> {
    check_time("ve_closed_form", t)?;
    let sys = electrolyte_system(params)?;
    let v = sys.propagate(t, current, &DVector::from_column_slice(v_e0));
    Ok([v[0], v[1], v[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{REFERENCE_ETA, REFERENCE_SIGMA};

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn two_node_symmetric_ladder() {
        let sys = build_omega_s(&[1.0, 1.0], &[1.0]).unwrap();
        assert_eq!(sys.omega, DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]));
        assert_eq!(sys.eigenvalues[0], 0.0);
        assert!((sys.eigenvalues[1] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn reference_spectrum_fixture() {
        let sys = build_omega_s(&REFERENCE_ETA, &REFERENCE_SIGMA).unwrap();
        // Regression values from a general-purpose eigen solver.
        let expected = [0.0, -0.962_258_752, -2.494_296_94, -4.084_268_91, -5.193_916_49];
        for (l, e) in sys.eigenvalues.iter().zip(expected) {
            assert!((l - e).abs() < 1e-7, "{l} vs {e}");
        }
        assert!(sys.condition() < 1e6);
    }

    #[test]
    fn weighted_column_sums_vanish() {
        let sys = build_omega_s(&REFERENCE_ETA, &REFERENCE_SIGMA).unwrap();
        for j in 0..5 {
            let s: f64 = (0..5).map(|i| REFERENCE_ETA[i] * sys.omega[(i, j)]).sum();
            assert!(s.abs() < 1e-12, "column {j}: {s}");
        }
    }

    #[test]
    fn degenerate_spectrum_is_rejected() {
        // A symmetric three-node ladder whose end nodes are isolated copies
        // of each other still has distinct eigenvalues; force a tie instead
        // with two decoupled equal pairs approximated by a vanishing link.
        let r = build_omega_s(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1e12, 1.0]);
        assert!(matches!(
            r,
            Err(Error::DegenerateSpectrum(..)) | Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn electrolyte_ladder_structure() {
        let sys = build_omega_e();
        assert_eq!(sys.eigenvalues.as_slice(), &[0.0, -1.0, -3.0]);
        let ones = DVector::from_element(3, 1.0);
        assert_eq!(&sys.omega * &ones, DVector::zeros(3));
        assert_eq!(
            sys.vandermonde(),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, -1.0, 1.0, 1.0, -3.0, 9.0])
        );
        let scaled = build_omega_e().with_circuit(3691.0, 0.007);
        assert!((scaled.mu - 1.0 / (3691.0 * 0.007)).abs() < 1e-15);
        assert_eq!(scaled.b[0], 1.0 / 3691.0);
        assert_eq!(scaled.b[1], 0.0);
        assert_eq!(scaled.b[2], -1.0 / 3691.0);
    }

    #[test]
    fn tensor_expand_basics() {
        let a = DMatrix::from_row_slice(3, 3, &[0.3, -1.2, 0.5, 2.0, 0.1, -0.7, 0.4, 0.9, -1.5]);
        assert_eq!(tensor_expand(&[1.0, 0.0, 0.0], &a).unwrap(), DMatrix::identity(3, 3));
        assert_eq!(tensor_expand(&[0.0, 1.0, 0.0], &a).unwrap(), a);
        // Horner oracle.
        let c = [0.7, -1.3, 2.1];
        let mut horner = DMatrix::identity(3, 3) * c[2];
        for k in (0..2).rev() {
            horner = &horner * &a + DMatrix::identity(3, 3) * c[k];
        }
        assert!(max_abs_diff(&tensor_expand(&c, &a).unwrap(), &horner) < 1e-13);
        assert!(matches!(
            tensor_expand(&[1.0, 2.0], &a),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exponential_at_zero_is_identity() {
        let sys = solid_system(&ModelParams::default()).unwrap();
        let e = matrix_exponential_ch(&sys, 0.0).unwrap();
        assert!(max_abs_diff(&e, &DMatrix::identity(5, 5)) < 1e-12);
        assert!(matrix_exponential_ch(&sys, -1.0).is_err());
    }

    #[test]
    fn electrolyte_exponential_preserves_uniform_vector() {
        let sys = build_omega_e().with_circuit(3691.0, 0.007);
        for t in [0.5, 10.0, 300.0, 1e4] {
            let e = matrix_exponential_ch(&sys, t).unwrap();
            let ones = DVector::from_element(3, 1.0);
            let img = &e * &ones;
            for v in img.iter() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_forms_at_equilibrium_do_not_move() {
        let p = ModelParams::default();
        let v = vs_closed_form(1234.0, 0.0, &[0.6; 5], &p).unwrap();
        assert!(v.iter().all(|x| (x - 0.6).abs() < 1e-13));
        let e = ve_closed_form(777.0, 0.0, &[0.5; 3], &p).unwrap();
        assert!(e.iter().all(|x| (x - 0.5).abs() < 1e-13));
    }

    #[test]
    fn electrolyte_sum_is_conserved() {
        let p = ModelParams::default();
        let v0 = [0.45, 0.52, 0.57];
        for (t, i) in [(3.0, -7.5), (120.0, 12.5), (5000.0, -1.0)] {
            let v = ve_closed_form(t, i, &v0, &p).unwrap();
            assert!((v.iter().sum::<f64>() - v0.iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn solid_relaxes_to_weighted_mean() {
        let p = ModelParams::default();
        let sys = solid_system(&p).unwrap();
        let v0 = [0.9, 0.7, 0.5, 0.3, 0.1];
        let mean: f64 = v0.iter().zip(&p.eta).map(|(v, e)| v * e).sum::<f64>() / p.eta.iter().sum::<f64>();
        let t = 10.0 / (sys.mu * sys.eigenvalues[1].abs());
        let v = vs_closed_form(t, 0.0, &v0, &p).unwrap();
        for x in v {
            assert!((x - mean).abs() < 1e-3 * (0.9 - 0.1), "{x} vs {mean}");
        }
    }

    #[test]
    fn trajectory_matches_propagate() {
        let p = ModelParams::default();
        let sys = solid_system(&p).unwrap();
        let v0 = DVector::from_vec(vec![0.8, 0.82, 0.85, 0.9, 0.95]);
        let traj = sys.trajectory(-1.25, &v0);
        for t in [0.0, 1.0, 250.0, 3000.0] {
            let a = traj.at(t);
            let b = sys.propagate(t, -1.25, &v0);
            assert!((a - b).amax() < 1e-13);
        }
    }
}
