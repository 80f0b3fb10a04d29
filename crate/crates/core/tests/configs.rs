use std::path::Path;

use bevfuse::config::ExperimentConfig;

#[test]
fn checked_in_desk_config_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let cfg = ExperimentConfig::load(&path, &[]).unwrap();
    assert_eq!(cfg, ExperimentConfig::desk());
    assert_eq!(cfg.hash(), ExperimentConfig::desk().hash());
}
