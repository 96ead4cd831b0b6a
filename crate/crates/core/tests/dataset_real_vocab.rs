//! Dataset construction against the real GPT-2 vocabulary.

use std::path::PathBuf;
use std::sync::OnceLock;

use acronym_circuit::dataset::{
    bundled_noun_list, enumerate_acronyms, filter_nouns, read_manifest, read_word_list, write_manifest, AcronymSet, CorruptionKind,
    DatasetBuilder, NounPool,
};
use acronym_circuit::task::{letter_allowed, LetterIndex, Noun, PromptSample, TaskVocab, PROMPT_LEN};
use acronym_circuit::tokenizer::{gpt2_tokenizer, Tokenizer};
use acronym_circuit::Error;

fn tok() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(|| gpt2_tokenizer().unwrap())
}

fn acronyms() -> &'static AcronymSet {
    static SET: OnceLock<AcronymSet> = OnceLock::new();
    SET.get_or_init(|| enumerate_acronyms(tok()).unwrap())
}

fn pool() -> &'static NounPool {
    static POOL: OnceLock<NounPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/nouns_sample.txt");
        filter_nouns(&read_word_list(&path).unwrap(), tok()).unwrap()
    })
}

#[test]
fn acronym_counts() {
    let set = acronyms();
    assert_eq!(set.three_token_count, 2740);
    assert_eq!(set.len(), 1154);
    assert!(set.acronyms.iter().all(|a| a.chars().all(letter_allowed)));
    assert!(set.contains("CKL"));
    assert!(set.contains("WVZ"));
}

#[test]
fn single_token_acronym_is_excluded() {
    assert_eq!(tok().encode("ABC").unwrap().len(), 1);
    assert!(!acronyms().contains("ABC"));
}

#[test]
fn noun_filter_keeps_two_token_words() {
    let p = pool();
    assert_eq!(p.source_count, 74);
    assert_eq!(p.len(), 68);
    let cane = p.nouns.iter().find(|n| n.word == "Cane").unwrap();
    assert_eq!(cane.tokens, [327, 1531]);
    assert_eq!(cane.letter, 'C');
    for n in &p.nouns {
        assert_eq!(tok().encode(&format!(" {}", n.word)).unwrap(), n.tokens.to_vec());
        assert_eq!(tok().token_text(n.tokens[0]).unwrap(), format!(" {}", n.letter));
    }
    assert!(!p.nouns.iter().any(|n| n.word == "Apple" || n.word == "House"));
}

#[test]
fn bundled_noun_list_count() {
    // frozen from an independent BPE implementation over the same rank table
    let words = bundled_noun_list();
    assert_eq!(words.len(), 6782);
    let pool = filter_nouns(&words, tok()).unwrap();
    assert_eq!(pool.len(), 378);
    let letters = pool.by_letter();
    assert!(letters.keys().filter(|&&c| letter_allowed(c)).count() == 23);
}

#[test]
fn single_token_word_is_dropped() {
    // a capitalized word that is one whole token in the vocabulary
    let v = tok().vocab();
    let word = (0..v.len() as u32)
        .filter_map(|id| tok().token_text(id).ok())
        .find(|t| {
            let mut c = t.chars();
            c.next() == Some(' ')
                && c.next().is_some_and(|f| f.is_ascii_uppercase())
                && t.len() >= 4
                && t[2..].chars().all(|ch| ch.is_ascii_lowercase())
        })
        .unwrap();
    assert_eq!(tok().encode(&word).unwrap().len(), 1);
    let words = vec![word[1..].to_lowercase(), "cane".to_owned()];
    let p = filter_nouns(&words, tok()).unwrap();
    assert_eq!(p.len(), 1, "{word:?} should be dropped");
    assert_eq!(p.nouns[0].word, "Cane");
}

#[test]
fn empty_filter_result_is_an_error() {
    let err = filter_nouns(&["house".to_owned(), "water".to_owned()], tok()).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)));
    assert!(err.to_string().contains("different word list"));
}

#[test]
fn wreck_vibe_zipper_prompt() {
    let vocab = TaskVocab::from_tokenizer(tok()).unwrap();
    let p = filter_nouns(&["wreck".into(), "vibe".into(), "zipper".into()], tok()).unwrap();
    let nouns: Vec<&Noun> = p.nouns.iter().collect();
    let s = PromptSample::assemble(&vocab, [nouns[0], nouns[1], nouns[2]], "WVZ", 0).unwrap();
    assert_eq!(s.render(), "The Wreck Vibe Zipper (WVZ");
    assert_eq!(s.tokens, vec![50256, 464, 370, 11402, 569, 32438, 1168, 14710, 357, 54, 53, 57]);
    s.check_tokenization(tok()).unwrap();
}

#[test]
fn eight_hundred_valid_samples() {
    let b = DatasetBuilder::new(tok(), pool(), acronyms()).unwrap();
    let samples = b.build(800, 1234).unwrap();
    assert_eq!(samples.len(), 800);
    let vocab = b.vocab();
    for s in &samples {
        assert_eq!(s.tokens.len(), PROMPT_LEN);
        s.check_tokenization(tok()).unwrap();
        assert!(acronyms().contains(&s.acronym));
        for (k, c) in s.acronym.chars().enumerate() {
            let i = LetterIndex::new(k + 1).unwrap();
            assert_eq!(tok().token_text(s.tokens[i.word_pos()]).unwrap(), format!(" {c}"));
            assert_eq!(tok().token_text(s.tokens[i.answer_pos()]).unwrap(), c.to_string());
            assert_eq!(vocab.letter_of_token(s.answer(i)), Some(c));
        }
        let mut words = s.words.to_vec();
        words.sort();
        words.dedup();
        assert_eq!(words.len(), 3, "{:?}", s.words);
    }
    assert_eq!(samples, b.build(800, 1234).unwrap());
    assert_ne!(samples, b.build(800, 1235).unwrap());
    // prefix stability: sample k depends on (seed, k) only
    assert_eq!(&samples[..10], &b.build(10, 1234).unwrap()[..]);
}

#[test]
fn forced_sample_with_singleton_pools() {
    let p = filter_nouns(&["cane".into(), "knee".into(), "lender".into()], tok()).unwrap();
    let set = AcronymSet {
        acronyms: vec!["CKL".into()],
        three_token_count: 1,
    };
    let b = DatasetBuilder::new(tok(), &p, &set).unwrap();
    let s = b.build(1, 99).unwrap();
    assert_eq!(s[0].render(), "The Cane Knee Lender (CKL");
}

#[test]
fn uncoverable_acronym_fails_after_retries() {
    let p = filter_nouns(&["cane".into()], tok()).unwrap();
    let set = AcronymSet {
        acronyms: vec!["CKL".into()],
        three_token_count: 1,
    };
    let b = DatasetBuilder::new(tok(), &p, &set).unwrap();
    assert!(matches!(b.build(1, 0), Err(Error::Dataset(_))));
}

#[test]
fn corruptions_change_only_their_slots() {
    let b = DatasetBuilder::new(tok(), pool(), acronyms()).unwrap();
    let samples = b.build(100, 7).unwrap();
    for i in LetterIndex::ALL {
        for kind in CorruptionKind::ALL {
            if !kind.applies_to(i) {
                assert!(matches!(b.corrupt(&samples[0], i, kind, 0), Err(Error::Precondition(_))));
                continue;
            }
            let pairs = b.corrupted_pairs(&samples, i, kind, 5).unwrap();
            assert_eq!(pairs, b.corrupted_pairs(&samples, i, kind, 5).unwrap());
            assert!(pairs.skipped <= 15, "{kind:?} {i}: skipped {}", pairs.skipped);
            if kind != CorruptionKind::PreviousLetters {
                assert_eq!(pairs.skipped, 0);
            }
            for (clean, bad) in pairs.clean.iter().zip(&pairs.corrupted) {
                assert_eq!(bad.tokens.len(), PROMPT_LEN);
                assert_eq!(bad.answers, clean.answers);
                bad.check_tokenization(tok()).unwrap();
                let changed: Vec<usize> = (0..PROMPT_LEN).filter(|&p| clean.tokens[p] != bad.tokens[p]).collect();
                let allowed: Vec<usize> = match kind {
                    CorruptionKind::CurrentWord => vec![i.word_pos(), i.rest_pos()],
                    CorruptionKind::PreviousWords => (1..i.get()).flat_map(|k| [2 * k, 2 * k + 1]).collect(),
                    CorruptionKind::PreviousLetters => (1..i.get()).map(|k| 8 + k).collect(),
                };
                assert!(changed.iter().all(|p| allowed.contains(p)), "{kind:?} {i}: {changed:?}");
                // every targeted capital differs from the original
                let capitals: Vec<usize> = match kind {
                    CorruptionKind::CurrentWord => vec![i.word_pos()],
                    CorruptionKind::PreviousWords => (1..i.get()).map(|k| 2 * k).collect(),
                    CorruptionKind::PreviousLetters => (1..i.get()).map(|k| 8 + k).collect(),
                };
                for p in capitals {
                    assert_ne!(clean.tokens[p], bad.tokens[p], "{kind:?} {i} pos {p}");
                }
            }
        }
    }
}

#[test]
fn letters_without_a_valid_replacement_are_reported() {
    let b = DatasetBuilder::new(tok(), pool(), acronyms()).unwrap();
    let p = pool();
    let find = |w: &str| p.nouns.iter().find(|n| n.word == w).unwrap();
    // every "?SZ" with ? != Z merges "?S" into one token
    let s = PromptSample::assemble(b.vocab(), [find("Zipper"), find("Salsa"), find("Zebra")], "ZSZ", 0).unwrap();
    let err = b.corrupt(&s, LetterIndex::SECOND, CorruptionKind::PreviousLetters, 0).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)));
    let pairs = b.corrupted_pairs(&[s], LetterIndex::SECOND, CorruptionKind::PreviousLetters, 0).unwrap();
    assert_eq!(pairs.skipped, 1);
    assert!(pairs.clean.is_empty());
}

#[test]
fn table_one_shapes() {
    let p = filter_nouns(&read_word_list(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/nouns_sample.txt")).unwrap(), tok()).unwrap();
    let b = DatasetBuilder::new(tok(), &p, acronyms()).unwrap();
    let find = |w: &str| p.nouns.iter().find(|n| n.word == w).unwrap();
    let clean = PromptSample::assemble(b.vocab(), [find("Cane"), find("Knee"), find("Lender")], "CKL", 3).unwrap();
    let third = LetterIndex::THIRD;
    let cw = b.corrupt(&clean, third, CorruptionKind::CurrentWord, 1).unwrap();
    assert!(cw.render().starts_with("The Cane Knee "));
    assert!(cw.render().ends_with(" (CKL"));
    assert_ne!(cw.words[2].chars().next(), Some('L'));
    let pl = b.corrupt(&clean, third, CorruptionKind::PreviousLetters, 1).unwrap();
    assert!(pl.render().starts_with("The Cane Knee Lender ("));
    let letters: Vec<char> = pl.acronym.chars().collect();
    assert!(letters[0] != 'C' && letters[1] != 'K' && letters[2] == 'L');
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let b = DatasetBuilder::new(tok(), pool(), acronyms()).unwrap();
    let samples = b.build(20, 3).unwrap();
    let path = dir.path().join("dataset.jsonl");
    write_manifest(&path, &samples).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 20);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["positions"]["C1"], 2);
    assert_eq!(first["text"], samples[0].render());
    assert_eq!(read_manifest(&path).unwrap(), samples);
}
