use std::path::{Path, PathBuf};

use dapt_core::preprocess::EmojiAliasTable;
use dapt_core::tasks::{load, validate, DatasetSpec, Label};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/datasets")
}

fn specs() -> Vec<DatasetSpec> {
    let text = std::fs::read_to_string(root().join("fixtures.toml")).unwrap();
    DatasetSpec::parse_many(&text).unwrap().iter().map(|s| s.resolved(&root())).collect()
}

#[test]
fn clean_fixtures_validate() {
    let clean: Vec<DatasetSpec> = specs().into_iter().filter(|s| !s.name.starts_with("perturbed")).collect();
    assert_eq!(clean.len(), 3);
    for spec in clean {
        let split = load(&spec, EmojiAliasTable::pinned()).unwrap();
        let report = validate(&split);
        assert!(report.passed(), "{report:?}");
        assert!(split.train.iter().chain(&split.test).all(|e| !e.text.contains("@user1")));
    }
}

#[test]
fn every_perturbation_is_flagged() {
    let perturbed: Vec<DatasetSpec> = specs().into_iter().filter(|s| s.name.starts_with("perturbed")).collect();
    assert_eq!(perturbed.len(), 7);
    for spec in perturbed {
        let flagged = match load(&spec, EmojiAliasTable::pinned()) {
            Err(_) => true,
            Ok(split) => !validate(&split).passed(),
        };
        assert!(flagged, "{} not flagged", spec.name);
    }
}

#[test]
fn abuse_subtypes_both_positive() {
    let spec = specs().into_iter().find(|s| s.name == "abuseval").unwrap();
    let split = load(&spec, EmojiAliasTable::pinned()).unwrap();
    let raw = std::fs::read_to_string(&spec.train).unwrap();
    let raw_pos = raw.lines().skip(1).filter(|l| l.ends_with("\tEXP") || l.ends_with("\tIMP")).count();
    assert_eq!(split.train.iter().filter(|e| e.label == Label::Positive).count(), raw_pos);
}
