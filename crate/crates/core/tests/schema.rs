use std::path::PathBuf;

use fiberseg::io::ManifestEntry;
use fiberseg::synth::{generate_stack, write_dataset, SynthConfig};
use fiberseg::RunConfig;
use serde_json::Value;

fn docs(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs").join(name)
}

fn generated() -> [(&'static str, Value); 2] {
    [
        ("config.schema.json", serde_json::to_value(schemars::schema_for!(RunConfig)).unwrap()),
        ("manifest.schema.json", serde_json::to_value(schemars::schema_for!(Vec<ManifestEntry>)).unwrap()),
    ]
}

/// Set `FIBERSEG_WRITE_SCHEMA=1` to regenerate the shipped schemas.
#[test]
fn shipped_schemas_are_current() {
    for (name, schema) in generated() {
        let path = docs(name);
        if std::env::var_os("FIBERSEG_WRITE_SCHEMA").is_some() {
            std::fs::write(&path, serde_json::to_string_pretty(&schema).unwrap() + "\n").unwrap();
        }
        let shipped: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(shipped, schema, "{name} is stale; rerun with FIBERSEG_WRITE_SCHEMA=1");
    }
}

fn validator(name: &str) -> jsonschema::Validator {
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(docs(name)).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

#[test]
fn default_config_validates() {
    let v = validator("config.schema.json");
    assert!(v.is_valid(&serde_json::to_value(RunConfig::default()).unwrap()));
    assert!(v.is_valid(&serde_json::json!({"seed": 3, "train": {"te_epochs": 5}})));
    assert!(!v.is_valid(&serde_json::json!({"seeds": 3})));
    assert!(!v.is_valid(&serde_json::json!({"train": {"batch_size": "eight"}})));
}

#[test]
fn written_manifest_validates() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = SynthConfig::tiny(2, 3);
    sc.charted_stride = 2;
    let path = write_dataset(&generate_stack(&sc).unwrap(), dir.path()).unwrap();
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let v = validator("manifest.schema.json");
    assert!(v.is_valid(&manifest));
    assert!(!v.is_valid(&serde_json::json!([{"id": "x"}])));
}
