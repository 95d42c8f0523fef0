// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::Value;
use superscopes_core::model::{load_model, ModelBundle, TokenizerTables};

pub const GPT2_DIR_VAR: &str = "SUPERSCOPES_GPT2_DIR";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn toy_dir() -> PathBuf {
    fixtures().join("toy")
}

pub fn toy() -> ModelBundle {
    load_model(&toy_dir()).expect("toy fixture loads")
}

pub fn golden(name: &str) -> Value {
    let raw = std::fs::read_to_string(fixtures().join("golden").join(name)).unwrap();
    serde_json::from_str(&raw).unwrap()
}

pub fn gpt2_tokenizer() -> TokenizerTables {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/gpt2-tokenizer");
    TokenizerTables::from_dir(&dir).expect("bundled GPT-2 tokenizer tables")
}

/// GPT-2-small checkpoint directory, when one is configured.
pub fn gpt2_small() -> Option<ModelBundle> {
    let dir = std::env::var_os(GPT2_DIR_VAR)?;
    Some(load_model(Path::new(&dir)).expect("GPT-2-small checkpoint loads"))
}

pub fn ids(v: &Value) -> Vec<u32> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as u32).collect()
}

pub fn floats(v: &Value) -> Vec<f32> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap() as f32).collect()
}

/// Small deterministic generator of prompt-like strings.
pub fn random_prompts(seed: u64, n: usize, max_words: usize) -> Vec<String> {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    const WORDS: &[&str] = &[
        "the", "capital", "of", "France", "is", "Diana", "Princess", "Wales", "band", "from",
        "California", "a", "film", "about", "time", "travel", "king", "Macedon", "show", "live",
        "Night", "red", "hot", "machine", ",", ".", "1985", "X", "tower", "Paris",
    ];
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=max_words);
            (0..k).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect()
}
