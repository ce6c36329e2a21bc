#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use scenesketch::pipeline::PipelineConfig;

/// One QuickDraw-style record: 1–4 strokes of integer points in 0..=255.
pub fn quickdraw_record(word: &str, key: u64, rng: &mut ChaCha8Rng) -> serde_json::Value {
    let strokes = rng.random_range(1..=4);
    let drawing: Vec<[Vec<i64>; 2]> = (0..strokes)
        .map(|_| {
            let n = rng.random_range(2..=8);
            let xs = (0..n).map(|_| rng.random_range(0..=255)).collect();
            let ys = (0..n).map(|_| rng.random_range(0..=255)).collect();
            [xs, ys]
        })
        .collect();
    json!({"word": word, "countrycode": "US", "timestamp": "2017-03-01 00:00:00.0", "recognized": true, "key_id": key.to_string(), "drawing": drawing})
}

/// Writes `<word>.ndjson` files holding `per_word` records each.
pub fn write_sketch_dir(dir: &Path, words: &[&str], per_word: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut key = 5_000_000_000_000_000u64;
    for w in words {
        let lines: Vec<String> = (0..per_word)
            .map(|_| {
                key += 7919;
                quickdraw_record(w, key, &mut rng).to_string()
            })
            .collect();
        std::fs::write(dir.join(format!("{w}.ndjson")), lines.join("\n") + "\n").unwrap();
    }
}

pub const CORPUS: [&str; 4] = ["a kitchen with a wooden table", "a garden full of flowers", "a city street at night", "a beach under a cloudy sky"];

/// A 3 × 4 fixture (three sketches, four captions) and a small, fast
/// configuration rooted in `root`.
pub fn small_run(root: &Path) -> PipelineConfig {
    let sketches = root.join("sketches");
    write_sketch_dir(&sketches, &["cat", "apple", "tree"], 1, 11);
    let corpus = root.join("captions.txt");
    std::fs::write(&corpus, CORPUS.join("\n") + "\n").unwrap();
    let text = format!(
        r#"
input_dir = "{}"
corpus = "{}"
output_dir = "{}"
resolution = 32
stroke_width = 1
seed = 7

[captioner]
source = "train"
[captioner.model]
dim = 16
queries = 2
ffn_dim = 16
max_len = 6
[captioner.train]
epochs = 5
batch_size = 3

[generator.model]
channels = 4
blocks = 1
[generator.train]
epochs = 2
batch_size = 4
socp_resolution = 16
"#,
        sketches.display(),
        corpus.display(),
        out_dir(root).display()
    );
    PipelineConfig::from_toml_str(&text).unwrap()
}

pub fn out_dir(root: &Path) -> PathBuf {
    root.join("out")
}
