//! Encoding agreement with the reference GPT-2 tokenizer on a frozen corpus.

use std::path::PathBuf;
use std::sync::OnceLock;

use acronym_circuit::tokenizer::{gpt2_tokenizer, load_tokenizer, Tokenizer, GPT2_VOCAB_SIZE};
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Entry {
    text: String,
    ids: Vec<u32>,
}

fn tok() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(|| gpt2_tokenizer().unwrap())
}

#[test]
fn bundled_files_load_from_disk_too() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/gpt2");
    let t = load_tokenizer(&root.join("vocab.json"), &root.join("merges.txt")).unwrap();
    assert_eq!(t.vocab_size(), GPT2_VOCAB_SIZE);
    assert_eq!(t.merges().len(), 50000);
    assert_eq!(t.end_of_text(), Some(50256));
}

#[test]
fn corpus_matches_reference_ids() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tokenizer_corpus.json");
    let corpus: Vec<Entry> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(corpus.len(), 1000);
    let mismatches: Vec<_> = corpus
        .iter()
        .filter(|e| tok().encode(&e.text).unwrap() != e.ids)
        .map(|e| e.text.clone())
        .collect();
    assert!(mismatches.is_empty(), "{} mismatches, first {:?}", mismatches.len(), mismatches.first());
    for e in &corpus {
        assert_eq!(tok().decode(&e.ids).unwrap(), e.text);
    }
}

#[test]
fn known_encodings() {
    let t = tok();
    assert_eq!(
        t.encode("The Wreck Vibe Zipper (WVZ").unwrap(),
        vec![464, 370, 11402, 569, 32438, 1168, 14710, 357, 54, 53, 57]
    );
    assert_eq!(t.encode(" Cane").unwrap(), vec![327, 1531]);
    assert_eq!(t.encode("CKL").unwrap(), vec![34, 42, 43]);
    assert_eq!(t.encode("ABC").unwrap(), vec![24694]);
    assert_eq!(t.encode("").unwrap(), Vec::<u32>::new());
    assert_eq!(t.single_token(" ("), Some(357));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decode_inverts_encode(text in "\\PC{0,40}") {
        let ids = tok().encode(&text).unwrap();
        prop_assert_eq!(tok().decode(&ids).unwrap(), text);
    }

    #[test]
    fn ids_stay_in_vocabulary(text in ".{0,40}") {
        for id in tok().encode(&text).unwrap() {
            prop_assert!((id as usize) < GPT2_VOCAB_SIZE);
        }
    }
}
