//! Step-level round trips against synthetic records with known truth.

use battx::dataset::perturb;
use battx::identification::electrolyte::UE_NOISE_FLOOR;
use battx::identification::ocv::ocv_curve_rms;
use battx::identification::{
    alpha_name, coulomb_count, default_bounds, detect_pulse_edges, fit_core_temperature, fit_electrolyte_arrhenius,
    fit_ocv, fit_ro, fit_solid, fit_thermal, pulse_samples, refine_round, Experiments, FitResult, Fits, KappaGrid,
    NlsOptions, ParamBound, ParamBounds, PipelineOptions, PulseData, GROUP_ELECTROLYTE, GROUP_OCV, GROUP_RO,
    GROUP_SOLID, GROUP_THERMAL,
};
use battx::model::{r_o, ModelParams, OCV_COEFFS};
use battx::simulator::simulate_at;
use battx::synthetic::{constant_discharge, experiments, ocv_experiment, pulse_experiment, record, Design};
use battx::{CurrentProfile, Dataset};

const RO_NAMES: [&str; 3] = ["gamma1", "gamma2", "gamma3"];
const SOLID_NAMES: [&str; 2] = ["c_s1", "r_s1"];
const THERMAL_NAMES: [&str; 4] = ["c_surf", "r_surf", "c_core", "r_core"];
const ELECTROLYTE_NAMES: [&str; 6] = ["c_e", "r_e", "beta1", "beta2", "kappa1", "kappa2"];

fn truth() -> ModelParams {
    ModelParams::default()
}

fn value(p: &ModelParams, name: &str) -> f64 {
    match name {
        "gamma1" => p.gamma1,
        "gamma2" => p.gamma2,
        "gamma3" => p.gamma3,
        "c_s1" => p.c_s1,
        "r_s1" => p.r_s1,
        "c_surf" => p.c_surf,
        "r_surf" => p.r_surf,
        "c_core" => p.c_core,
        "r_core" => p.r_core,
        "c_e" => p.c_e,
        "r_e" => p.r_e,
        "beta1" => p.beta1,
        "beta2" => p.beta2,
        "kappa1" => p.kappa1,
        "kappa2" => p.kappa2,
        other => p.alpha[other.trim_start_matches("alpha").parse::<usize>().unwrap()],
    }
}

/// A result carrying the true values of `names`, standing in for an
/// upstream step.
fn truth_fit(group: &str, names: &[&str], p: &ModelParams) -> FitResult {
    let mut fit = FitResult::from_initial(group, &default_bounds().subset(names).unwrap(), String::new());
    for n in names {
        fit.estimates.insert(n.to_string(), value(p, n));
    }
    fit.warnings.clear();
    fit.converged = true;
    fit
}

fn ocv_truth(p: &ModelParams) -> FitResult {
    let names: Vec<String> = (0..OCV_COEFFS).map(alpha_name).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    truth_fit(GROUP_OCV, &refs, p)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn design() -> Design {
    Design::default()
}

#[test]
fn trickle_count_tracks_model_soc() {
    let p = truth();
    let d = design();
    let data = constant_discharge(&p, d.trickle_c, 1.0, d.sample_interval, &d).unwrap();
    let count = coulomb_count(&data, 1.0, data.meta.capacity_ah).unwrap().soc;
    let replay = simulate_at(
        &data.profile().unwrap(),
        &p,
        &data.initial_state(p.n_solid_nodes),
        &data.relative_times(),
        d.step,
    )
    .unwrap();
    let last = replay.last().soc;
    assert!((count.last().unwrap() - last).abs() < 1e-3);
    assert!(last < 0.02, "trickle discharge stops at SoC {last}");
}

#[test]
fn ocv_curve_round_trip() {
    let p = truth();
    let data = ocv_experiment(&p, &design()).unwrap();
    let fit = fit_ocv(&data, &default_bounds(), &NlsOptions::default()).unwrap();
    let alpha: Vec<f64> = (0..OCV_COEFFS).map(|k| fit.estimates[&alpha_name(k)]).collect();
    let err = ocv_curve_rms(&alpha, &p.alpha, 0.02, 0.98, 500);
    assert!(err < 2e-3, "OCV curve error {err}");
}

#[test]
fn twelve_pulse_record_has_twelve_stops() {
    let d = Design {
        pulse_count: 12,
        ..design()
    };
    let data = pulse_experiment(&truth(), &d).unwrap();
    let stops = detect_pulse_edges(&data, 0.1).into_iter().filter(|e| e.is_stop).count();
    assert_eq!(stops, 12);
}

#[test]
fn pulse_resistances_and_gamma_round_trip() {
    let p = truth();
    let data = pulse_experiment(&p, &design()).unwrap();
    let (_, samples) = pulse_samples(&data, 0.1, true).unwrap();
    assert!(samples.samples.len() >= 12);
    for s in &samples.samples {
        let expected = r_o(s.soc, p.gamma1, p.gamma2, p.gamma3);
        assert!(
            rel(s.resistance, expected) < 0.03,
            "{} vs {expected} at SoC {}",
            s.resistance,
            s.soc
        );
    }
    let fit = fit_ro(&samples.samples, &default_bounds(), &NlsOptions::default()).unwrap();
    for n in RO_NAMES {
        assert!(rel(fit.estimates[n], value(&p, n)) < 0.01, "{n} = {}", fit.estimates[n]);
    }
}

fn solid_fit(data: &Dataset, p: &ModelParams) -> FitResult {
    fit_solid(
        data,
        p,
        &ocv_truth(p),
        &truth_fit(GROUP_RO, &RO_NAMES, p),
        &default_bounds(),
        &NlsOptions::default(),
    )
    .unwrap()
}

fn solid_record() -> Dataset {
    let d = design();
    constant_discharge(&truth(), d.solid_c, 1.0, d.sample_interval, &d).unwrap()
}

#[test]
fn solid_round_trip_noiseless_and_noisy() {
    let p = truth();
    let data = solid_record();
    let fit = solid_fit(&data, &p);
    for n in SOLID_NAMES {
        assert!(rel(fit.estimates[n], value(&p, n)) < 0.02, "{n} = {}", fit.estimates[n]);
    }
    let charge = fit.diagnostics["capacity_ah"] * 3600.0;
    assert!(rel(charge, 2.55 * 3600.0) < 0.05, "total charge {charge} C");

    let noisy = perturb(&data, 0.005, 0.0, 42).unwrap();
    let fit = solid_fit(&noisy, &p);
    for n in SOLID_NAMES {
        assert!(rel(fit.estimates[n], value(&p, n)) < 0.05, "{n} = {}", fit.estimates[n]);
    }
}

#[test]
fn solid_error_grows_with_noise() {
    let p = truth();
    let data = solid_record();
    let mean_error = |sigma: f64| -> f64 {
        let total: f64 = (0..20u64)
            .map(|seed| {
                let fit = solid_fit(&perturb(&data, sigma, 0.0, seed).unwrap(), &p);
                SOLID_NAMES
                    .iter()
                    .map(|n| rel(fit.estimates[*n], value(&p, n)))
                    .sum::<f64>()
            })
            .sum();
        total / 20.0
    };
    let errors: Vec<f64> = [0.0, 0.002, 0.005, 0.010].iter().map(|s| mean_error(*s)).collect();
    assert!(errors.windows(2).all(|w| w[0] < w[1]), "{errors:?}");
}

fn upstream(p: &ModelParams) -> [FitResult; 3] {
    [
        ocv_truth(p),
        truth_fit(GROUP_RO, &RO_NAMES, p),
        truth_fit(GROUP_SOLID, &SOLID_NAMES, p),
    ]
}

/// Invariants of the surface-temperature response to heat: the static gain
/// and the two coefficients of the denominator polynomial.
fn thermal_invariants(c_s: f64, r_s: f64, c_c: f64, r_c: f64) -> [f64; 3] {
    [r_s, r_c * c_c / r_s + c_c + c_s, r_c * c_c * c_s]
}

#[test]
fn thermal_refit_and_identifiable_combinations() {
    let p = truth();
    let d = design();
    let data = constant_discharge(&p, d.thermal_c, 1.0, d.sample_interval, &d).unwrap();
    let [a, b, c] = upstream(&p);
    let fit = fit_thermal(
        &data,
        &p,
        &[&a, &b, &c],
        &default_bounds(),
        &NlsOptions::default(),
        d.step,
    )
    .unwrap();
    assert!(fit.residual_rms < 0.05, "refit {} K", fit.residual_rms);
    let rise = fit.diagnostics["surface_rise_k"];
    assert!((rise - 10.0).abs() < 4.0, "rise {rise} K");

    let e = |n: &str| fit.estimates[n];
    let got = thermal_invariants(e("c_surf"), e("r_surf"), e("c_core"), e("r_core"));
    let want = thermal_invariants(p.c_surf, p.r_surf, p.c_core, p.r_core);
    for (g, w) in got.iter().zip(&want) {
        assert!(rel(*g, *w) < 0.15, "{got:?} vs {want:?}");
    }
}

#[test]
fn thermal_parameters_recovered_after_core_alignment() {
    // Surface temperature leaves one direction of the thermal group free;
    // the high-rate voltage fixes it through the core temperature.
    let p = truth();
    let d = design();
    let heat = constant_discharge(&p, d.thermal_c, 1.0, d.sample_interval, &d).unwrap();
    let high_rate = constant_discharge(&p, d.electrolyte_c, 1.0, d.fast_sample_interval, &d).unwrap();
    let bounds = default_bounds();
    let options = NlsOptions::default();
    let [a, b, c] = upstream(&p);
    let thermal = fit_thermal(&heat, &p, &[&a, &b, &c], &bounds, &options, d.step).unwrap();
    let grid = KappaGrid::default_for(&bounds).unwrap();
    let electrolyte =
        fit_electrolyte_arrhenius(&high_rate, &p, &[&a, &b, &c, &thermal], &bounds, &grid, &options, 0.1).unwrap();
    let (aligned, _) = fit_core_temperature(
        &high_rate,
        &p,
        &[&a, &b, &c, &thermal, &electrolyte],
        &bounds,
        &options,
        0.1,
    )
    .unwrap();
    for n in THERMAL_NAMES {
        let got = aligned.estimates[n];
        assert!(
            rel(got, value(&p, n)) < 0.15,
            "{n} = {got}, all {:?}",
            aligned.estimates
        );
    }
}

#[test]
fn unheated_record_is_degenerate() {
    let p = truth();
    let profile = CurrentProfile::constant(0.0, 3600.0, p.t_ref).unwrap();
    let times: Vec<f64> = (0..=360).map(|k| k as f64 * 10.0).collect();
    let data = record(&profile, &p, 0.5, &times, &design()).unwrap();
    let [a, b, c] = upstream(&p);
    let bounds = default_bounds();
    let fit = fit_thermal(&data, &p, &[&a, &b, &c], &bounds, &NlsOptions::default(), 0.1).unwrap();
    assert_eq!(fit.diagnostics["degenerate"], 1.0);
    assert!(!fit.converged && !fit.warnings.is_empty());
    for n in THERMAL_NAMES {
        assert_eq!(fit.estimates[n], bounds.get(n).unwrap().initial);
    }
}

fn electrolyte_fit(data: &Dataset, p: &ModelParams, bounds: &ParamBounds, grid: &KappaGrid) -> FitResult {
    let [a, b, c] = upstream(p);
    let th = truth_fit(GROUP_THERMAL, &THERMAL_NAMES, p);
    fit_electrolyte_arrhenius(data, p, &[&a, &b, &c, &th], bounds, grid, &NlsOptions::default(), 0.1).unwrap()
}

#[test]
fn electrolyte_round_trip_with_true_upstream() {
    let p = truth();
    let d = design();
    let data = constant_discharge(&p, d.electrolyte_c, 1.0, d.fast_sample_interval, &d).unwrap();
    let axis = vec![10.0, 15.0, 20.0, 30.0, 45.0, 70.0, 85.0, 100.0];
    let grid = KappaGrid {
        kappa1: axis.clone(),
        kappa2: axis,
    };
    let fit = electrolyte_fit(&data, &p, &default_bounds(), &grid);
    let e = |n: &str| fit.estimates[n];
    assert!(rel(e("beta1"), p.beta1) < 0.05, "beta1 = {}", e("beta1"));
    assert!(rel(e("r_e") * e("c_e"), p.r_e * p.c_e) < 0.05);
    assert!(rel(e("kappa1"), p.kappa1) < 1e-6 && rel(e("kappa2"), p.kappa2) < 1e-6);
    assert_eq!(fit.diagnostics["identifiable"], 1.0);
}

#[test]
fn electrolyte_without_arrhenius_fits_inner_model() {
    let p = ModelParams {
        kappa1: 0.0,
        kappa2: 0.0,
        ..truth()
    };
    let d = design();
    let data = constant_discharge(&p, d.electrolyte_c, 1.0, d.fast_sample_interval, &d).unwrap();
    let mut entries = default_bounds().entries().to_vec();
    for e in entries.iter_mut().filter(|e| e.name.starts_with("kappa")) {
        *e = ParamBound::new(&e.name, 0.0, 0.0, 100.0);
    }
    let bounds = ParamBounds::new(entries).unwrap();
    let grid = KappaGrid {
        kappa1: vec![0.0],
        kappa2: vec![0.0],
    };
    let fit = electrolyte_fit(&data, &p, &bounds, &grid);
    assert!(fit.residual_rms < 1e-3, "voltage RMS {} V", fit.residual_rms);
}

#[test]
fn low_rate_electrolyte_is_not_identifiable() {
    let p = truth();
    let d = design();
    let data = constant_discharge(&p, 0.5, 1.0, d.sample_interval, &d).unwrap();
    let grid = KappaGrid {
        kappa1: vec![30.0],
        kappa2: vec![70.0],
    };
    let fit = electrolyte_fit(&data, &p, &default_bounds(), &grid);
    assert_eq!(fit.diagnostics["identifiable"], 0.0);
    assert!(fit.diagnostics["peak_ue_v"] < UE_NOISE_FLOOR);
    assert!(fit.warnings.iter().any(|w| w.contains("not identifiable")));
}

#[test]
fn truth_is_a_fixed_point_of_refinement() {
    let p = truth();
    let data: Experiments = experiments(&p, &design()).unwrap();
    let bounds = default_bounds();
    let options = PipelineOptions::default();
    let pulses = PulseData::new(&data, &options).unwrap();
    let [ocv, ro, solid] = upstream(&p);
    let start = Fits {
        ocv,
        ro,
        solid,
        thermal: truth_fit(GROUP_THERMAL, &THERMAL_NAMES, &p),
        electrolyte: truth_fit(GROUP_ELECTROLYTE, &ELECTROLYTE_NAMES, &p),
    };
    let next = refine_round(&data, &pulses, &p, &bounds, &start, &options).unwrap();
    for (after, before) in next.all().into_iter().zip(start.all()).skip(1) {
        for (name, b) in &before.estimates {
            let a = after.estimates[name];
            assert!(rel(a, *b) < 1e-6, "{name}: {a} after refinement vs {b}");
        }
    }
    let alpha: Vec<f64> = (0..OCV_COEFFS).map(|k| next.ocv.estimates[&alpha_name(k)]).collect();
    assert!(ocv_curve_rms(&alpha, &p.alpha, 0.0, 1.0, 500) < 1e-9);
}
