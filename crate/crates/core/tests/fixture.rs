use std::path::PathBuf;

use battx::io::{load_params, write_params};
use battx::validation::{run_suite, Suite, ValidationOptions};
use battx::ModelParams;

fn shipped() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/params_inr18650_25r.json")
}

#[test]
fn shipped_fixture_matches_defaults() {
    let p = load_params(&shipped()).unwrap();
    assert_eq!(p, ModelParams::default());
}

#[test]
fn shipped_fixture_passes_fast_suite() {
    let p = load_params(&shipped()).unwrap();
    let reports = run_suite(&p, Suite::Fast, &ValidationOptions::default());
    let ids: Vec<u32> = reports.iter().map(|r| r.id).collect();
    assert_eq!(ids, [0, 1, 2, 3, 4, 7]);
    for r in &reports {
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn invalid_field_is_named_and_stops_the_suite() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let p = ModelParams {
        r_e: -0.01,
        ..ModelParams::default()
    };
    write_params(&p, &path).unwrap();
    assert!(load_params(&path).is_err());

    let reports = run_suite(&p, Suite::Full, &ValidationOptions::default());
    assert_eq!(reports.len(), 1);
    assert!(!reports[0].passed());
    assert!(reports[0].checks[0].detail.contains("r_e"), "{}", reports[0]);
}
