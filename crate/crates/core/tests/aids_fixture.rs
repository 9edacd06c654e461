use std::path::PathBuf;

use snijm::io::{load_dataset, write_aids, LoadOptions, Transform};
use snijm::mcmc::{self, McmcConfig, ModelChoice, RunSpec};
use snijm::simgen::{aids_like, aids_truth};

fn fixture() -> (PathBuf, PathBuf) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/aids");
    (dir.join("long.csv"), dir.join("surv.csv"))
}

fn sqrt_opts() -> LoadOptions {
    LoadOptions {
        transform: Transform::Sqrt,
        ..LoadOptions::default()
    }
}

#[test]
fn fixture_has_trial_shape() {
    let (l, s) = fixture();
    let d = load_dataset(&l, &s, &sqrt_opts()).unwrap();
    assert_eq!(d.subjects.len(), 467);
    assert_eq!(d.subjects.iter().map(|s| s.n()).max(), Some(5));
    assert_eq!(d.fixed_names, ["intercept", "obstime", "drug", "gender", "prevOI", "AZT"]);
    for s in &d.subjects {
        let visits = [0.0, 2.0, 6.0, 12.0, 18.0];
        assert_eq!(s.times, visits[..s.n()]);
    }
}

#[test]
fn fixture_regenerates_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (l, s) = (dir.path().join("long.csv"), dir.path().join("surv.csv"));
    write_aids(&aids_like(467, 467).unwrap(), &l, &s).unwrap();
    let (fl, fs_) = fixture();
    assert_eq!(std::fs::read(&l).unwrap(), std::fs::read(&fl).unwrap());
    assert_eq!(std::fs::read(&s).unwrap(), std::fs::read(&fs_).unwrap());
}

#[test]
fn skew_normal_fit_recovers_fixture_effects() {
    let (l, s) = fixture();
    let d = load_dataset(&l, &s, &sqrt_opts()).unwrap();
    let spec = RunSpec::new(
        ModelChoice::Sn,
        McmcConfig {
            burn_in: 1000,
            iterations: 1000,
            seed: 11,
            ..McmcConfig::default()
        },
    );
    let fit = mcmc::run(&d, &spec, None).unwrap();
    let truth = aids_truth();
    for (k, name) in d.fixed_names.iter().enumerate() {
        let p = fit.summary.get(&format!("beta.{name}")).unwrap();
        println!("{name}: {:.4} ({:.4}, {:.4}) truth {}", p.mean, p.lower, p.upper, truth.beta[k]);
    }
    // one realisation: every effect within 4 posterior SDs
    for (k, name) in d.fixed_names.iter().enumerate() {
        let p = fit.summary.get(&format!("beta.{name}")).unwrap();
        assert!((p.mean - truth.beta[k]).abs() < 4.0 * p.sd, "{name}: {p:?}");
    }
}
