//! The checked-in reference configuration must match the generated one.
//! Regenerate with `MOAN_BLESS=1 cargo test --test config_reference`.

use std::path::PathBuf;

use moan::harness::{reference_toml, ExperimentConfig};

fn reference_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/config-reference.toml")
}

#[test]
fn reference_file_is_current() {
    let generated = reference_toml();
    let path = reference_path();
    if std::env::var_os("MOAN_BLESS").is_some() {
        std::fs::write(&path, &generated).unwrap();
    }
    let on_disk = std::fs::read_to_string(&path).expect("docs/config-reference.toml exists");
    assert_eq!(on_disk, generated, "reference config is stale; rerun with MOAN_BLESS=1");
}

#[test]
fn reference_file_parses_to_the_defaults() {
    let text = std::fs::read_to_string(reference_path()).unwrap();
    let cfg = ExperimentConfig::from_toml(&text, "config-reference.toml").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}
