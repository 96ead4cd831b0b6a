//! Noun filtering, acronym enumeration, prompt sampling and corruptions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{letter_allowed, position_map, LetterIndex, Noun, PromptSample, TaskVocab, CAPITALS, PROMPT_LEN};
use crate::tokenizer::Tokenizer;

const ACRONYM_RETRIES: usize = 1000;
const CORRUPTION_RETRIES: usize = 100;

/// Nouns that tokenize as `" X"` plus one remainder token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounPool {
    pub nouns: Vec<Noun>,
    pub source_count: usize,
}

impl NounPool {
    pub fn len(&self) -> usize {
        self.nouns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty()
    }

    /// Nouns grouped by capital letter.
    pub fn by_letter(&self) -> BTreeMap<char, Vec<&Noun>> {
        let mut map: BTreeMap<char, Vec<&Noun>> = BTreeMap::new();
        for n in &self.nouns {
            map.entry(n.letter).or_default().push(n);
        }
        map
    }
}

/// Reads a word list with one word per line; blank lines are skipped.
pub fn read_word_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(split_word_list(&text))
}

/// The 6782-word noun list bundled with the crate (wonderwords 3.0.1).
pub fn bundled_noun_list() -> Vec<String> {
    split_word_list(include_str!("../assets/nouns/nounlist.txt"))
}

fn split_word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

fn capitalize(word: &str) -> Option<String> {
    let mut chars = word.chars();
    let first = chars.next()?;
    if !first.is_ascii_alphabetic() {
        return None;
    }
    Some(first.to_ascii_uppercase().to_string() + chars.as_str())
}

/// Keeps the words whose capitalized, space-prefixed form is exactly
/// `[" X", remainder]`. Duplicates (after capitalization) are kept once.
pub fn filter_nouns(words: &[String], tok: &Tokenizer) -> Result<NounPool> {
    let vocab = TaskVocab::from_tokenizer(tok)?;
    let mut seen = std::collections::HashSet::new();
    let mut nouns = Vec::new();
    for w in words {
        let Some(word) = capitalize(w.trim()) else { continue };
        if !seen.insert(word.clone()) {
            continue;
        }
        let ids = match tok.encode(&format!(" {word}")) {
            Ok(ids) => ids,
            Err(Error::Unencodable(_)) => continue,
            Err(e) => return Err(e),
        };
        let [first, rest] = ids[..] else { continue };
        let letter = word.chars().next().expect("non-empty after capitalize");
        if vocab.spaced_letters[(letter as u8 - b'A') as usize] != first {
            continue;
        }
        nouns.push(Noun {
            word,
            letter,
            tokens: [first, rest],
        });
    }
    if nouns.is_empty() {
        return Err(Error::Dataset(format!(
            "none of the {} words tokenizes as a capital-letter token plus one remainder; try a different word list",
            words.len()
        )));
    }
    Ok(NounPool {
        nouns,
        source_count: words.len(),
    })
}

/// Three-letter acronyms that tokenize as three single-letter tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcronymSet {
    /// Allowed acronyms, without excluded letters, in lexicographic order.
    pub acronyms: Vec<String>,
    /// How many of the 26³ candidates split into three tokens before the
    /// letter exclusion.
    pub three_token_count: usize,
}

impl AcronymSet {
    pub fn len(&self) -> usize {
        self.acronyms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acronyms.is_empty()
    }

    pub fn contains(&self, acronym: &str) -> bool {
        self.acronyms.binary_search_by(|a| a.as_str().cmp(acronym)).is_ok()
    }
}

pub fn enumerate_acronyms(tok: &Tokenizer) -> Result<AcronymSet> {
    let mut three_token_count = 0;
    let mut acronyms = Vec::new();
    for &a in &CAPITALS {
        for &b in &CAPITALS {
            for &c in &CAPITALS {
                let s: String = [a, b, c].iter().collect();
                if tok.encode(&s)?.len() != 3 {
                    continue;
                }
                three_token_count += 1;
                if [a, b, c].iter().all(|&l| letter_allowed(l)) {
                    acronyms.push(s);
                }
            }
        }
    }
    Ok(AcronymSet {
        acronyms,
        three_token_count,
    })
}

/// Which part of the prompt a corruption replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Replace the word whose letter is being predicted.
    CurrentWord,
    /// Replace every word before the current one.
    PreviousWords,
    /// Replace the acronym letters already written.
    PreviousLetters,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [Self::CurrentWord, Self::PreviousWords, Self::PreviousLetters];

    pub fn name(self) -> &'static str {
        match self {
            Self::CurrentWord => "current_word",
            Self::PreviousWords => "previous_words",
            Self::PreviousLetters => "previous_letters",
        }
    }

    /// Whether the corruption is defined for predicting letter `i`.
    pub fn applies_to(self, i: LetterIndex) -> bool {
        self == Self::CurrentWord || i.get() >= 2
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption {s:?}")))
    }
}

/// Seed-driven sampler of prompts and corruptions.
#[derive(Debug, Clone)]
pub struct DatasetBuilder<'a> {
    tok: &'a Tokenizer,
    vocab: TaskVocab,
    acronyms: &'a AcronymSet,
    by_letter: BTreeMap<char, Vec<&'a Noun>>,
    /// Nouns with an allowed capital, for corruption draws.
    allowed: Vec<&'a Noun>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(a ^ b.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15);
    rng.gen()
}

impl<'a> DatasetBuilder<'a> {
    pub fn new(tok: &'a Tokenizer, pool: &'a NounPool, acronyms: &'a AcronymSet) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Dataset("noun pool is empty".into()));
        }
        if acronyms.is_empty() {
            return Err(Error::Dataset("acronym set is empty".into()));
        }
        Ok(Self {
            tok,
            vocab: TaskVocab::from_tokenizer(tok)?,
            acronyms,
            by_letter: pool.by_letter(),
            allowed: pool.nouns.iter().filter(|n| letter_allowed(n.letter)).collect(),
        })
    }

    pub fn vocab(&self) -> &TaskVocab {
        &self.vocab
    }

    /// Draws `n` prompts. Sample `k` depends only on `seed` and `k`.
    pub fn build(&self, n: usize, seed: u64) -> Result<Vec<PromptSample>> {
        if n == 0 {
            return Err(Error::Precondition("dataset size must be at least 1".into()));
        }
        (0..n as u64).map(|k| self.sample(mix(seed, k))).collect()
    }

    /// One prompt from its own seed.
    pub fn sample(&self, seed: u64) -> Result<PromptSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..ACRONYM_RETRIES {
            let acronym = self.acronyms.acronyms.choose(&mut rng).expect("non-empty");
            let Some(nouns) = self.pick_nouns(acronym, &mut rng) else { continue };
            let sample = PromptSample::assemble(&self.vocab, nouns, acronym, seed)?;
            if sample.check_tokenization(self.tok).is_ok() {
                return Ok(sample);
            }
        }
        Err(Error::Dataset(format!(
            "no valid prompt after {ACRONYM_RETRIES} draws; the noun pool may not cover the acronym letters"
        )))
    }

    fn pick_nouns(&self, acronym: &str, rng: &mut ChaCha8Rng) -> Option<[&'a Noun; 3]> {
        let mut picked: Vec<&'a Noun> = Vec::with_capacity(3);
        for c in acronym.chars() {
            let candidates: Vec<&&Noun> = self
                .by_letter
                .get(&c)?
                .iter()
                .filter(|n| !picked.iter().any(|p| p.word == n.word))
                .collect();
            picked.push(candidates.choose(rng)?);
        }
        Some([picked[0], picked[1], picked[2]])
    }

    /// Corrupts the context of letter `i`; the clean answers are kept.
    ///
    /// Replacements always differ from the original in their capital letter.
    pub fn corrupt(&self, sample: &PromptSample, i: LetterIndex, kind: CorruptionKind, seed: u64) -> Result<PromptSample> {
        if !kind.applies_to(i) {
            return Err(Error::Precondition(format!("{} corruption needs letter index ≥ 2, got {i}", kind.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots: Vec<usize> = match kind {
            CorruptionKind::CurrentWord => vec![i.offset()],
            _ => (0..i.offset()).collect(),
        };
        for _ in 0..CORRUPTION_RETRIES {
            let mut out = sample.clone();
            match kind {
                CorruptionKind::CurrentWord | CorruptionKind::PreviousWords => {
                    for &s in &slots {
                        let original = sample.words[s].chars().next().unwrap_or(' ');
                        let candidates: Vec<&&Noun> = self
                            .allowed
                            .iter()
                            .filter(|n| n.letter != original && !out.words.contains(&n.word))
                            .collect();
                        let noun = candidates
                            .choose(&mut rng)
                            .ok_or_else(|| Error::Dataset("no replacement noun with a different letter".into()))?;
                        let pos = LetterIndex::new(s + 1)?.word_pos();
                        out.tokens[pos..pos + 2].copy_from_slice(&noun.tokens);
                        out.words[s] = noun.word.clone();
                    }
                }
                CorruptionKind::PreviousLetters => {
                    let letters = self.pick_letters(sample, &slots, &mut rng).ok_or_else(|| {
                        Error::Dataset(format!(
                            "no letter replacement for {:?} keeps the acronym split into single letters",
                            sample.acronym
                        ))
                    })?;
                    for &s in &slots {
                        let pos = LetterIndex::new(s + 1)?.answer_pos();
                        out.tokens[pos] = self.vocab.letter_token(letters[s]).expect("capital letter");
                    }
                    out.acronym = letters.into_iter().collect();
                }
            }
            if out.tokens.len() == PROMPT_LEN && out.check_tokenization(self.tok).is_ok() {
                return Ok(out);
            }
        }
        Err(Error::Dataset(format!(
            "could not corrupt {:?} for letter {i} after {CORRUPTION_RETRIES} attempts",
            sample.render()
        )))
    }

    /// Uniform draw over the letter replacements that change every slot in
    /// `slots` and still tokenize as three single letters.
    fn pick_letters(&self, sample: &PromptSample, slots: &[usize], rng: &mut ChaCha8Rng) -> Option<Vec<char>> {
        let original: Vec<char> = sample.acronym.chars().collect();
        let mut candidates = vec![original.clone()];
        for &s in slots {
            let mut next = Vec::new();
            for c in &candidates {
                for &l in CAPITALS.iter().filter(|&&l| letter_allowed(l) && l != original[s]) {
                    let mut v = c.clone();
                    v[s] = l;
                    next.push(v);
                }
            }
            candidates = next;
        }
        candidates.retain(|c| {
            let text: String = c.iter().collect();
            self.tok.encode(&text).map(|ids| ids.len() == 3).unwrap_or(false)
        });
        candidates.choose(rng).cloned()
    }

    /// Corrupts every sample; sample `k` gets a seed derived from `seed` and its own seed.
    pub fn corrupt_all(
        &self,
        samples: &[PromptSample],
        i: LetterIndex,
        kind: CorruptionKind,
        seed: u64,
    ) -> Result<Vec<PromptSample>> {
        samples
            .iter()
            .map(|s| self.corrupt(s, i, kind, mix(seed, s.seed)))
            .collect()
    }
}

/// Aligned clean and corrupted prompts for one letter and corruption kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedPairs {
    pub clean: Vec<PromptSample>,
    pub corrupted: Vec<PromptSample>,
    /// Samples dropped because no valid corruption exists for them.
    pub skipped: usize,
}

impl DatasetBuilder<'_> {
    /// Like [`DatasetBuilder::corrupt_all`], but drops samples that admit no
    /// corruption instead of failing.
    pub fn corrupted_pairs(
        &self,
        samples: &[PromptSample],
        i: LetterIndex,
        kind: CorruptionKind,
        seed: u64,
    ) -> Result<CorruptedPairs> {
        let mut out = CorruptedPairs {
            clean: Vec::with_capacity(samples.len()),
            corrupted: Vec::with_capacity(samples.len()),
            skipped: 0,
        };
        for s in samples {
            match self.corrupt(s, i, kind, mix(seed, s.seed)) {
                Ok(c) => {
                    out.clean.push(s.clone());
                    out.corrupted.push(c);
                }
                Err(Error::Dataset(msg)) => {
                    log::debug!("skipping {:?}: {msg}", s.render());
                    out.skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if out.skipped > 0 {
            log::info!(
                "{} corruption of letter {i}: skipped {} of {} samples",
                kind.name(),
                out.skipped,
                samples.len()
            );
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    index: usize,
    text: String,
    words: [String; 3],
    acronym: String,
    tokens: Vec<u32>,
    answers: [u32; 3],
    positions: BTreeMap<String, usize>,
    seed: u64,
}

/// Writes one JSON object per sample.
pub fn write_manifest(path: &Path, samples: &[PromptSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let positions = position_map();
    for (index, s) in samples.iter().enumerate() {
        let rec = ManifestRecord {
            index,
            text: s.render(),
            words: s.words.clone(),
            acronym: s.acronym.clone(),
            tokens: s.tokens.clone(),
            answers: s.answers,
            positions: positions.clone(),
            seed: s.seed,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<PromptSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.tokens.len() != PROMPT_LEN {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {PROMPT_LEN} tokens, found {}", rec.tokens.len()),
            });
        }
        out.push(PromptSample {
            tokens: rec.tokens,
            words: rec.words,
            acronym: rec.acronym,
            answers: rec.answers,
            seed: rec.seed,
        });
    }
    Ok(out)
}
