//! Byte-level round trips of every file format, and the directional
//! independence of the biLM states.

mod common;

use elmo_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use elmo_core::data::{format_sense_example, format_tagged, load_corpus, parse_sense_corpus, parse_tagged_corpus, SenseExample, TaggedSentence};
use elmo_core::elmo::{decode_reps, encode_reps, export_reps, extract_reps, import_reps, reps_file_size};
use elmo_core::error::Error;
use elmo_core::rng::SeedRng;
use elmo_core::task::{decode_tagger, encode_tagger, train_task, ElmoLocation, TaskConfig};
use proptest::prelude::*;

use common::{corpus, data_path, tiny_model, toks};

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = tiny_model(1);
    model.round_to_f32();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&model, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.checksum(), model.checksum());
    assert_eq!(loaded.vocab(), model.vocab());
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.charcnn_config(), model.charcnn_config());
}

#[test]
fn unrounded_models_stabilise_after_one_trip() {
    let model = tiny_model(2);
    let first = encode_checkpoint(&model).unwrap();
    let again = encode_checkpoint(&decode_checkpoint(&first).unwrap()).unwrap();
    assert_eq!(first, again);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = encode_checkpoint(&tiny_model(3)).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[7] = b'9';
    assert!(matches!(decode_checkpoint(&bad_magic), Err(Error::Format(_))));
    for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut trailing = bytes;
    trailing.push(0);
    assert!(decode_checkpoint(&trailing).is_err());
}

#[test]
fn representation_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(4);
    let sentences = corpus();
    let reps = extract_reps(&model, &sentences).unwrap();
    let path = dir.path().join("reps.bin");
    export_reps(&reps, &sentences, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), reps_file_size(3, 8, &sentences));
    let file = import_reps(&path).unwrap();
    assert_eq!(file.sentences, sentences);
    assert_eq!(encode_reps(&file.reps, &file.sentences).unwrap(), bytes);
    for (a, b) in file.reps.iter().zip(&reps) {
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            // Stored as f32.
            assert!(la.max_abs_diff(lb) <= 1e-6 * lb.data().iter().fold(1.0_f64, |m, v| m.max(v.abs())));
        }
    }
    assert!(matches!(decode_reps(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
}

#[test]
fn tagger_file_round_trip_is_byte_identical() {
    let model = tiny_model(5);
    let train = vec![
        TaggedSentence { tokens: toks("the cat sat"), tags: toks("D N V") },
        TaggedSentence { tokens: toks("a dog ran on the mat"), tags: toks("D N V P D N") },
    ];
    for location in ElmoLocation::ALL {
        let cfg = TaskConfig {
            elmo_location: location,
            epochs: 2,
            use_layer_norm: location == ElmoLocation::Both,
            ..TaskConfig::default()
        };
        let outcome = train_task(&train, &train, Some(&model), &cfg).unwrap();
        let bytes = encode_tagger(&outcome.tagger).unwrap();
        let back = decode_tagger(&bytes).unwrap();
        assert_eq!(encode_tagger(&back).unwrap(), bytes, "{location}");
        assert_eq!(back.params().checksum(), outcome.tagger.params().checksum());
        let reps = extract_reps(&model, &[train[1].tokens.clone()]).unwrap();
        let r = location.uses_elmo().then(|| &reps[0]);
        assert_eq!(back.predict(&train[1].tokens, r).unwrap(), outcome.tagger.predict(&train[1].tokens, r).unwrap());
        assert!(matches!(decode_tagger(&bytes[..bytes.len() - 3]), Err(_)));
    }
}

proptest! {
    #[test]
    fn tagged_and_sense_lines_round_trip(
        words in proptest::collection::vec("[a-z_]{1,6}", 1..8),
        tag_seed in 0u64..1000,
        target in 0usize..8,
    ) {
        let mut rng = SeedRng::new(tag_seed);
        let tags: Vec<String> = words.iter().map(|_| ["N", "V", "ADJ"][rng.below(3)].to_string()).collect();
        // Pairs split on the last underscore, so tokens may contain one.
        let s = TaggedSentence { tokens: words.clone(), tags };
        let parsed = parse_tagged_corpus(&format_tagged(&s)).unwrap();
        prop_assert_eq!(parsed, vec![s]);

        let ex = SenseExample {
            target_index: target % words.len(),
            lemma: words[target % words.len()].clone(),
            sense: format!("{}%1", words[0]),
            tokens: words,
        };
        prop_assert_eq!(parse_sense_corpus(&format_sense_example(&ex)).unwrap(), vec![ex]);
    }
}

/// Changing the token at position `t` must leave forward states before `t`,
/// backward states after `t`, and every other token vector bit-identical.
#[test]
fn directional_states_ignore_the_other_side() {
    let model = tiny_model(6);
    let pretrain = load_corpus(data_path("pretrain.txt")).unwrap();
    let words: Vec<&String> = pretrain.iter().flatten().take(2000).collect();
    let mut rng = SeedRng::new(6).split("causality");
    let mut probes = 0;
    while probes < 50 {
        let sent = &pretrain[rng.below(pretrain.len())];
        if sent.len() < 2 {
            continue;
        }
        let t = rng.below(sent.len());
        let replacement = words[rng.below(words.len())];
        if replacement == &sent[t] {
            continue;
        }
        let mut changed = sent.clone();
        changed[t] = replacement.clone();
        let reps = model.layer_reps(&[sent.clone(), changed]).unwrap();
        let (a, b) = (&reps[0], &reps[1]);
        for k in 0..sent.len() {
            if k != t {
                assert_eq!(a.vector(0, k), b.vector(0, k));
            }
            for j in 1..a.n_layers() {
                if k < t {
                    assert_eq!(a.forward_half(j, k), b.forward_half(j, k), "forward layer {j} pos {k} < {t}");
                }
                if k > t {
                    assert_eq!(a.backward_half(j, k), b.backward_half(j, k), "backward layer {j} pos {k} > {t}");
                }
            }
        }
        // The probe is not vacuous: the perturbed position itself moved.
        assert_ne!(a.forward_half(1, t), b.forward_half(1, t));
        assert_ne!(a.backward_half(1, t), b.backward_half(1, t));
        probes += 1;
    }
}
