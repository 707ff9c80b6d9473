//! Small models and corpora shared by the integration tests.
#![allow(dead_code)]

use elmo_core::bilm::{BiLm, BiLmConfig};
use elmo_core::charcnn::CharCnnConfig;
use elmo_core::data::{build_vocab, Sentence};

pub fn toks(s: &str) -> Sentence {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn tiny_charcnn() -> CharCnnConfig {
    CharCnnConfig {
        char_emb_dim: 3,
        filters: vec![(1, 2), (2, 3), (3, 2)],
        n_highway: 1,
        d_proj: 4,
        max_word_len: 8,
    }
}

pub fn tiny_bilm() -> BiLmConfig {
    BiLmConfig {
        layers: 2,
        d_cell: 6,
        d_proj: 4,
        cell_clip: Some(3.0),
        residual: true,
        dropout: 0.0,
    }
}

pub fn corpus() -> Vec<Sentence> {
    ["the cat sat on the mat", "a dog ran", "the dog sat", "cats and dogs ran on"]
        .iter()
        .map(|s| toks(s))
        .collect()
}

pub fn tiny_model(seed: u64) -> BiLm {
    let vocab = build_vocab(&corpus(), 1).unwrap();
    BiLm::new(tiny_bilm(), tiny_charcnn(), vocab, seed).unwrap()
}

pub fn data_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}
