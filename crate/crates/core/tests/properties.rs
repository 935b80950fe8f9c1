use battx::analytic::{electrolyte_system, matrix_exponential_ch, solid_system, vs_closed_form, LadderSystem};
use battx::dataset::DatasetMeta;
use battx::identification::{bounded_nls, ParamBound, ParamBounds};
use battx::io::{load_dataset, load_params, load_profile, write_dataset, write_params, write_profile};
use battx::model::{heat_rate, r_o_t, r_s1_t, rhs, ue, CellState, ModelParams};
use battx::profiles::{gen_constant, gen_pulse_train, gen_udds_like};
use battx::simulator::{simulate, InitialCondition, SimOptions, Termination};
use battx::Dataset;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Scaling-and-squaring Taylor exponential, independent of the
/// eigen-expansion used by the library.
fn expm_oracle(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = a.iter().map(|v| v.abs()).sum::<f64>();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    let n = a.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn state_strategy(n: usize) -> impl Strategy<Value = CellState> {
    (
        prop::collection::vec(0.0..1.0f64, n),
        prop::array::uniform3(0.2..0.8f64),
        280.0..330.0f64,
        280.0..330.0f64,
    )
        .prop_map(|(v_s, v_e, t_core, t_surf)| CellState {
            v_s,
            v_e,
            t_core,
            t_surf,
        })
}

fn params() -> ModelParams {
    ModelParams::default()
}

fn systems() -> [LadderSystem; 2] {
    let p = params();
    [solid_system(&p).unwrap(), electrolyte_system(&p).unwrap()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rhs_conserves_charge(state in state_strategy(5), current in -25.0..25.0f64, t_amb in 280.0..320.0f64) {
        let p = params();
        let d = rhs(&state, current, t_amb, &p).unwrap();
        let stored: f64 = d.v_s.iter().enumerate().map(|(i, v)| p.c_s(i) * v).sum();
        prop_assert!((stored - current).abs() <= 1e-12 * current.abs().max(1.0));
        prop_assert!(d.v_e.iter().sum::<f64>().abs() <= 1e-15);
    }

    #[test]
    fn ue_is_antisymmetric(a in 0.0..1.0f64, b in 0.0..1.0f64, beta1 in 0.1..2.0f64, beta2 in 0.05..0.5f64) {
        let forward = ue(a, b, beta1, beta2).unwrap();
        let backward = ue(b, a, beta1, beta2).unwrap();
        prop_assert!((forward + backward).abs() <= 1e-14);
    }

    #[test]
    fn resistances_fall_with_temperature(t in 260.0..340.0f64, dt in 0.1..20.0f64, soc in 0.0..1.0f64,
                                         k1 in 1.0..100.0f64, k2 in 1.0..100.0f64) {
        let mut p = params();
        p.kappa1 = k1;
        p.kappa2 = k2;
        prop_assert!(r_o_t(soc, t + dt, &p).unwrap() < r_o_t(soc, t, &p).unwrap());
        prop_assert!(r_s1_t(t + dt, &p).unwrap() < r_s1_t(t, &p).unwrap());
    }

    #[test]
    fn exponential_semigroup(t1 in 0.0..3000.0f64, t2 in 0.0..3000.0f64) {
        for sys in systems() {
            let whole = matrix_exponential_ch(&sys, t1 + t2).unwrap();
            let parts = matrix_exponential_ch(&sys, t1).unwrap() * matrix_exponential_ch(&sys, t2).unwrap();
            prop_assert!(max_abs(&(whole - parts)) <= 1e-9);
        }
    }

    #[test]
    fn exponential_matches_taylor_oracle(t in 0.0..5000.0f64) {
        for sys in systems() {
            let a = &sys.omega * sys.mu;
            let err = max_abs(&(matrix_exponential_ch(&sys, t).unwrap() - expm_oracle(&(a * t))));
            prop_assert!(err <= 1e-10, "error {err} at t = {t}");
        }
    }

    #[test]
    fn exponential_preserves_conserved_functional(t in 0.0..1e4f64, v in prop::collection::vec(0.0..1.0f64, 5)) {
        for sys in systems() {
            let n = sys.dim();
            let v0 = DVector::from_column_slice(&v[..n]);
            let w = &sys.conserved_weights;
            let after = matrix_exponential_ch(&sys, t).unwrap() * &v0;
            prop_assert!((w.dot(&after) - w.dot(&v0)).abs() <= 1e-10);
        }
    }

    #[test]
    fn closed_form_superposition(t in 0.0..3600.0f64,
                                 a in prop::collection::vec(0.0..1.0f64, 5), b in prop::collection::vec(0.0..1.0f64, 5),
                                 i1 in -10.0..10.0f64, i2 in -10.0..10.0f64) {
        let p = params();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let combined = vs_closed_form(t, i1 + i2, &sum, &p).unwrap();
        let va = vs_closed_form(t, i1, &a, &p).unwrap();
        let vb = vs_closed_form(t, i2, &b, &p).unwrap();
        for k in 0..5 {
            prop_assert!((combined[k] - va[k] - vb[k]).abs() <= 1e-10);
        }
    }

    #[test]
    fn rest_relaxes_both_ladders(state in state_strategy(5)) {
        let p = params();
        let trace = simulate(
            &gen_constant(0.0, 600.0, 2.5).unwrap(),
            &p,
            &SimOptions { output_interval: 5.0, initial: InitialCondition::State(state), ..SimOptions::default() },
        ).unwrap();
        let spread = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
        for w in trace.rows.windows(2) {
            prop_assert!(spread(&w[1].state.v_s) <= spread(&w[0].state.v_s) + 1e-12);
            prop_assert!(spread(&w[1].state.v_e) <= spread(&w[0].state.v_e) + 1e-12);
        }
    }

    #[test]
    fn unheated_cell_returns_to_ambient(t_core in 280.0..330.0f64, t_surf in 280.0..330.0f64, soc in 0.1..0.9f64) {
        let p = params();
        let mut state = CellState::equilibrium(5, soc, 298.15);
        state.t_core = t_core;
        state.t_surf = t_surf;
        let trace = simulate(
            &gen_constant(0.0, 4000.0, 2.5).unwrap(),
            &p,
            &SimOptions { output_interval: 10.0, initial: InitialCondition::State(state), ..SimOptions::default() },
        ).unwrap();
        // The two-node system is a contraction towards ambient in the
        // energy norm weighted by the heat capacities.
        let energy = |r: &battx::simulator::TraceRow| {
            p.c_core * (r.state.t_core - 298.15).powi(2) + p.c_surf * (r.state.t_surf - 298.15).powi(2)
        };
        for w in trace.rows.windows(2) {
            prop_assert!(energy(&w[1]) <= energy(&w[0]) + 1e-9);
        }
        let last = trace.last();
        prop_assert!((last.state.t_core - 298.15).abs() < (t_core - 298.15).abs().max(1e-3));
    }

    #[test]
    fn single_signed_current_heats(rate in 0.1..4.0f64, soc in 0.3..0.9f64, charge in any::<bool>()) {
        let p = params();
        let current = if charge { rate * 2.5 } else { -rate * 2.5 };
        let profile = battx::CurrentProfile::constant(current, 300.0, 298.15).unwrap();
        let trace = simulate(
            &profile,
            &p,
            &SimOptions { initial: InitialCondition::Soc(soc), strict_bounds: false, ..SimOptions::default() },
        ).unwrap();
        for r in &trace.rows {
            prop_assert!(heat_rate(r.current, &r.state, &p).unwrap() >= 0.0);
        }
    }

    #[test]
    fn pulse_trains_keep_soc_and_cutoffs(rate in 0.2..3.0f64, pulse in 10.0..600.0f64, rest in 10.0..600.0f64, count in 1usize..6) {
        let p = params();
        let profile = gen_pulse_train(rate, pulse, rest, count, 2.5).unwrap();
        let trace = simulate(&profile, &p, &SimOptions::default()).unwrap();
        let first = &trace.rows[0];
        for r in &trace.rows {
            let expected = first.soc + r.charge / (3600.0 * p.capacity_ah());
            prop_assert!((r.soc - expected).abs() <= 1e-6);
        }
        let n = trace.rows.len();
        for r in &trace.rows[..n - 1] {
            prop_assert!(r.terminal_voltage >= p.v_cut_low && r.terminal_voltage <= p.v_cut_high);
        }
        prop_assert!(matches!(trace.termination, Termination::ProfileEnd | Termination::LowCutoff));
    }

    #[test]
    fn generated_profiles_convert_rates(rate in 0.01..8.0f64, capacity in 0.5..5.0f64, lo in -8.0..-0.1f64, hi in 0.1..5.0f64) {
        let c = gen_constant(rate, 100.0, capacity).unwrap();
        for (_, i) in c.samples() {
            prop_assert!((i.abs() - rate * capacity).abs() <= 1e-12 * capacity * rate.max(1.0));
        }
        let u = gen_udds_like(lo, hi, capacity, 1).unwrap();
        let (min, max) = u.samples().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s.1), b.max(s.1)));
        prop_assert!((min - lo * capacity).abs() <= 1e-12 * capacity * 8.0);
        prop_assert!((max - hi * capacity).abs() <= 1e-12 * capacity * 8.0);
    }

    #[test]
    fn dataset_and_profile_files_are_lossless(values in prop::collection::vec((-1e3..1e3f64, 2.0..4.5f64, 250.0..350.0f64), 2..40),
                                              soc0 in 0.0..1.0f64) {
        let dir = tempfile::tempdir().unwrap();
        let n = values.len();
        let time: Vec<f64> = (0..n).map(|k| k as f64 * 0.7).collect();
        let data = Dataset::new(
            time.clone(),
            values.iter().map(|v| v.0 / 100.0).collect(),
            values.iter().map(|v| v.1).collect(),
            Some(values.iter().map(|v| v.2).collect()),
            DatasetMeta { capacity_ah: 2.5, t_amb: 298.15, soc0 },
        ).unwrap();
        let path = dir.path().join("d.csv");
        write_dataset(&data, &path).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), data);

        let profile = battx::CurrentProfile::new(
            time.iter().zip(&values).map(|(t, v)| (*t, v.0 / 100.0)).collect(),
            battx::simulator::Interpolation::Linear,
            battx::simulator::Ambient::Constant(300.0),
        ).unwrap();
        let path = dir.path().join("p.csv");
        write_profile(&profile, &path).unwrap();
        prop_assert_eq!(load_profile(&path).unwrap(), profile);
    }

    #[test]
    fn params_files_are_lossless(c_s1 in 1000.0..9000.0f64, r_e in 1e-4..0.1f64, k1 in 0.0..100.0f64) {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams { c_s1, r_e, kappa1: k1, ..params() };
        let path = dir.path().join("p.json");
        write_params(&p, &path).unwrap();
        prop_assert_eq!(load_params(&path).unwrap(), p);
    }

    #[test]
    fn estimates_respect_bounds(targets in prop::collection::vec(-10.0..10.0f64, 1..4),
                                 boxes in prop::collection::vec((-5.0..0.0f64, 0.1..5.0f64), 3),
                                 seed in 0u64..1000) {
        let n = targets.len();
        let bounds = ParamBounds::new(
            (0..n).map(|k| {
                let (lo, width) = boxes[k];
                ParamBound::new(&format!("x{k}"), lo + 0.5 * width, lo, lo + width)
            }).collect(),
        ).unwrap();
        let t = targets.clone();
        let residual = move |theta: &[f64]| -> Option<Vec<f64>> {
            let mut r: Vec<f64> = theta.iter().zip(&t).map(|(a, b)| a - b).collect();
            r.push(theta.iter().map(|a| a * a).sum::<f64>().sin());
            Some(r)
        };
        let options = battx::identification::NlsOptions { restarts: 2, ..Default::default() }.with_seed(seed);
        let fit = bounded_nls(&residual, &bounds, &options).unwrap();
        for b in bounds.entries() {
            let v = fit.estimates[&b.name];
            prop_assert!(b.lower <= v && v <= b.upper, "{} = {v} outside [{}, {}]", b.name, b.lower, b.upper);
        }
    }
}

#[test]
fn integrated_heat_grows_with_rate() {
    let p = params();
    let heat: Vec<f64> = [1.0, 2.0, 3.0]
        .iter()
        .map(|&rate| {
            let trace = simulate(&gen_constant(rate, 7200.0, 2.5).unwrap(), &p, &SimOptions::default()).unwrap();
            assert_eq!(trace.termination, Termination::LowCutoff);
            trace
                .rows
                .windows(2)
                .map(|w| 0.5 * (w[0].heat_rate + w[1].heat_rate) * (w[1].time - w[0].time))
                .sum()
        })
        .collect();
    assert!(heat[0] > 0.0 && heat[0] < heat[1] && heat[1] < heat[2], "{heat:?}");
}
