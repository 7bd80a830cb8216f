use std::path::PathBuf;

use autolr::harness::config::LrPolicy;
use autolr::harness::ExperimentConfig;

fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn reference_file_matches_builtin() {
    let cfg = ExperimentConfig::load(config_dir().join("reference.json")).unwrap();
    assert_eq!(cfg, ExperimentConfig::reference());
}

#[test]
fn every_preset_loads() {
    let mut n = 0;
    for entry in std::fs::read_dir(config_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}

#[test]
fn compare_preset_selects_a_baseline() {
    let cfg = ExperimentConfig::load(config_dir().join("compare.json")).unwrap();
    assert!(matches!(cfg.policy().unwrap(), LrPolicy::Baseline(_)));
    assert!(cfg.pruning.unwrap().enabled);
}
