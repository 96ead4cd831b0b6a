//! Byte-level BPE compatible with the GPT-2 `vocab.json` / `merges.txt` pair.
//!
//! Encoding follows the reference pipeline: regex pre-tokenization, mapping of
//! every UTF-8 byte onto the printable byte-level alphabet, then repeated
//! merging of the lowest-ranked adjacent pair inside each pre-token.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

/// Vocabulary size of the released GPT-2 tokenizer.
pub const GPT2_VOCAB_SIZE: usize = 50257;

pub const END_OF_TEXT: &str = "<|endoftext|>";

/// GPT-2 pre-tokenization: contractions, optionally space-prefixed letter /
/// digit / punctuation runs, and whitespace (trailing whitespace is held back
/// so it attaches to the next word).
const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Bijective token ↔ id map. Token strings are written in the byte-level alphabet.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Precondition(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
        })
    }

    fn from_map(path: &Path, map: HashMap<String, u32>) -> Result<Self> {
        let size = map.len();
        let mut id_to_token = vec![None; size];
        for (tok, id) in map.iter() {
            let slot = id_to_token.get_mut(*id as usize).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("id {id} for {tok:?} is outside 0..{size}"),
            })?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("id {id} assigned twice"),
                });
            }
        }
        Ok(Self {
            token_to_id: map,
            // every slot is filled: ids are distinct and bounded by the entry count
            id_to_token: id_to_token.into_iter().map(Option::unwrap).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }
}

/// Ordered merge list; a pair's rank is its index.
#[derive(Debug, Clone, Default)]
pub struct MergeRules {
    ranks: HashMap<(String, String), usize>,
    pairs: Vec<(String, String)>,
}

impl MergeRules {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(pairs.len());
        for (rank, pair) in pairs.iter().enumerate() {
            if ranks.insert(pair.clone(), rank).is_some() {
                return Err(Error::Precondition(format!("duplicate merge {pair:?}")));
            }
        }
        Ok(Self { ranks, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn rank(&self, a: &str, b: &str) -> Option<usize> {
        // lookups go through owned keys; pre-tokens are short so this stays cheap
        self.ranks.get(&(a.to_owned(), b.to_owned())).copied()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }
}

/// The reference byte → printable-char table: printable Latin-1 bytes map to
/// themselves, the rest are shifted to U+0100 and up in byte order.
pub fn byte_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut shifted = 0u32;
    for b in 0..=255u8 {
        let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
        table[b as usize] = if printable {
            b as char
        } else {
            let c = char::from_u32(256 + shifted).expect("valid code point");
            shifted += 1;
            c
        };
    }
    table
}

#[derive(Debug)]
pub struct Tokenizer {
    vocab: Vocab,
    merges: MergeRules,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

/// Loads a GPT-2 style tokenizer from `vocab.json` and `merges.txt`.
pub fn load_tokenizer(vocab_file: &Path, merges_file: &Path) -> Result<Tokenizer> {
    let vocab_text = fs::read_to_string(vocab_file).map_err(|e| Error::io(vocab_file, e))?;
    let merges_text = fs::read_to_string(merges_file).map_err(|e| Error::io(merges_file, e))?;
    parse_tokenizer(vocab_file, &vocab_text, merges_file, &merges_text)
}

/// The GPT-2 tokenizer files bundled with the crate.
pub fn gpt2_tokenizer() -> Result<Tokenizer> {
    parse_tokenizer(
        Path::new("assets/gpt2/vocab.json"),
        include_str!("../assets/gpt2/vocab.json"),
        Path::new("assets/gpt2/merges.txt"),
        include_str!("../assets/gpt2/merges.txt"),
    )
}

fn parse_tokenizer(vocab_file: &Path, vocab_text: &str, merges_file: &Path, merges_text: &str) -> Result<Tokenizer> {
    let map: HashMap<String, u32> = serde_json::from_str(vocab_text).map_err(|e| Error::Parse {
        path: vocab_file.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let vocab = Vocab::from_map(vocab_file, map)?;
    if vocab.len() != GPT2_VOCAB_SIZE {
        log::warn!(
            "{}: vocabulary has {} entries, GPT-2 has {GPT2_VOCAB_SIZE}",
            vocab_file.display(),
            vocab.len()
        );
    }
    let merges = parse_merges(merges_file, merges_text)?;
    Tokenizer::new(vocab, merges)
}

fn parse_merges(path: &Path, text: &str) -> Result<MergeRules> {
    let mut pairs = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if (i == 0 && line.starts_with("#version")) || line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected two space-separated symbols, got {line:?}"),
            });
        };
        if a.is_empty() || b.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("empty merge symbol in {line:?}"),
            });
        }
        let pair = (a.to_owned(), b.to_owned());
        if let Some(first) = seen.insert(pair.clone(), lineno) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("merge {line:?} duplicates line {first}"),
            });
        }
        pairs.push(pair);
    }
    MergeRules::new(pairs)
}

impl Tokenizer {
    pub fn new(vocab: Vocab, merges: MergeRules) -> Result<Self> {
        let byte_encoder = byte_to_unicode();
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let pattern = Regex::new(GPT2_PATTERN).expect("pre-tokenization pattern compiles");
        Ok(Self {
            vocab,
            merges,
            byte_encoder,
            byte_decoder,
            pattern,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeRules {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Id of `<|endoftext|>`, which also serves as BOS.
    pub fn end_of_text(&self) -> Option<u32> {
        self.vocab.id(END_OF_TEXT)
    }

    /// Splits text into pre-tokens with the GPT-2 pattern.
    pub fn pre_tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        self.pattern
            .find_iter(text)
            .map(|m| m.expect("pattern has bounded backtracking").as_str())
            .collect()
    }

    /// Encodes UTF-8 text. Special-token strings are treated as plain text.
    ///
    /// Fails only when the vocabulary lacks a byte-level symbol, which cannot
    /// happen with a complete byte-level vocabulary such as GPT-2's.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for piece in self.pre_tokenize(text) {
            for sym in self.bpe(piece) {
                match self.vocab.id(&sym) {
                    Some(id) => ids.push(id),
                    None => return Err(Error::Unencodable(piece.to_owned())),
                }
            }
        }
        Ok(ids)
    }

    fn bpe(&self, piece: &str) -> Vec<String> {
        let mut word: Vec<String> = piece
            .bytes()
            .map(|b| self.byte_encoder[b as usize].to_string())
            .collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| self.merges.rank(&w[0], &w[1]))
                .min();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges.pairs[rank];
            // merge every non-overlapping occurrence, scanning left to right
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == *a && word[i + 1] == *b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// Raw bytes of a token sequence.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(Error::TokenId(id))?;
            if tok == END_OF_TEXT {
                out.extend_from_slice(tok.as_bytes());
                continue;
            }
            for c in tok.chars() {
                match self.byte_decoder.get(&c) {
                    Some(&b) => out.push(b),
                    // not part of the byte alphabet (toy vocab fillers): keep as UTF-8
                    None => out.extend_from_slice(c.encode_utf8(&mut [0; 4]).as_bytes()),
                }
            }
        }
        Ok(out)
    }

    /// Decodes ids back to text; invalid UTF-8 (split multi-byte chars) is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// The text a single token renders as.
    pub fn token_text(&self, id: u32) -> Result<String> {
        self.decode(&[id])
    }

    /// Id of the token whose rendered text is exactly `text`, if any.
    pub fn single_token(&self, text: &str) -> Option<u32> {
        let sym: String = text.bytes().map(|b| self.byte_encoder[b as usize]).collect();
        self.vocab.id(&sym)
    }
}
