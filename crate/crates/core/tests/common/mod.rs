// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use xconsist::arch::Arch;
use xconsist::pipeline::{Analysis, ExperimentConfig, ModelSource};
use xconsist::toymodel::{AdamOptions, FixtureSpec, FixtureTraining, ModelConfig};

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn mini_corpus() -> PathBuf {
    manifest_dir().join("data/mlama-mini")
}

pub fn mt0_shape_config() -> PathBuf {
    manifest_dir().join("configs/mt0_base_shape.json")
}

/// `(en subject, de subject, en object)` rows of a capital-of relation.
pub const CAPITALS: [(&str, &str, &str); 8] = [
    ("France", "Frankreich", "Paris"),
    ("Germany", "Deutschland", "Berlin"),
    ("Italy", "Italien", "Rome"),
    ("Spain", "Spanien", "Madrid"),
    ("Egypt", "Ägypten", "Cairo"),
    ("Russia", "Russland", "Moscow"),
    ("Greece", "Griechenland", "Athens"),
    ("Austria", "Österreich", "Vienna"),
];

/// Write an en/de corpus in the per-language directory layout.
pub fn write_capital_corpus(root: &Path) {
    for lang in ["en", "de"] {
        let dir = root.join(lang);
        std::fs::create_dir_all(&dir).unwrap();
        let mut text = String::new();
        for (i, (en, de, obj)) in CAPITALS.iter().enumerate() {
            let row = if lang == "en" {
                serde_json::json!({
                    "lineid": i, "predicate_id": "P36", "sub_label": en, "obj_label": obj,
                    "template": "The capital of [X] is [Y] ."
                })
            } else {
                serde_json::json!({"lineid": i, "predicate_id": "P36", "sub_label": de})
            };
            text.push_str(&row.to_string());
            text.push('\n');
        }
        std::fs::write(dir.join("P36.jsonl"), text).unwrap();
    }
}

pub fn fixture(arch: Arch, n_layers: usize, steps: usize, seed: u64) -> FixtureSpec {
    FixtureSpec {
        config: ModelConfig::new(arch, n_layers, 8, 12, 2, seed),
        train: FixtureTraining {
            adam: AdamOptions {
                steps,
                ..Default::default()
            },
            default_code_mixed_exposure: 0.3,
            ..Default::default()
        },
    }
}

/// A quick configuration over the shipped mini corpus.
pub fn small_config(output_dir: &Path, arch: Arch, analyses: &[Analysis]) -> ExperimentConfig {
    let value = serde_json::json!({
        "corpus": mini_corpus(),
        "matrix_lang": "en",
        "embedded_langs": ["de", "ta"],
        "model": ModelSource::Fixture(fixture(arch, 3, 60, 11)),
        "model_id": "tiny",
        "k": 3,
        "m": 4,
        "max_probes": 4,
        "analyses": analyses,
        "cka": {"baseline": true, "include_embeddings": true},
        "output_dir": output_dir,
    });
    ExperimentConfig::from_json(&value.to_string()).unwrap()
}
