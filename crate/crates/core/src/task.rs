//! The acronym prompt template and its fixed position layout.
//!
//! Every prompt is twelve tokens:
//!
//! ```text
//! pos   0    1    2   3   4   5   6   7    8    9  10  11
//!      BOS  The  C1  T1  C2  T2  C3  T3   " (" A1  A2  A3
//! ```
//!
//! `Ci` is the word-initial token (space plus capital letter), `Ti` the rest of
//! the word and `Ai` the acronym letter. Letter `i` is predicted from the
//! position just before `Ai`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Tokenizer, END_OF_TEXT};

pub const PROMPT_LEN: usize = 12;
pub const BOS_POS: usize = 0;
pub const THE_POS: usize = 1;
pub const LPAREN_POS: usize = 8;

/// Letters never used in acronyms: they rarely tokenize as separate letters.
pub const EXCLUDED_LETTERS: [char; 3] = ['X', 'Q', 'U'];

pub const CAPITALS: [char; 26] = [
    'A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J', 'K', 'L', 'M', 'N', 'O', 'P', 'Q', 'R', 'S', 'T', 'U', 'V',
    'W', 'X', 'Y', 'Z',
];

pub fn letter_allowed(c: char) -> bool {
    c.is_ascii_uppercase() && !EXCLUDED_LETTERS.contains(&c)
}

/// Which acronym letter (1, 2 or 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct LetterIndex(usize);

impl LetterIndex {
    pub const FIRST: LetterIndex = LetterIndex(1);
    pub const SECOND: LetterIndex = LetterIndex(2);
    pub const THIRD: LetterIndex = LetterIndex(3);
    pub const ALL: [LetterIndex; 3] = [Self::FIRST, Self::SECOND, Self::THIRD];

    pub fn new(i: usize) -> Result<Self> {
        if (1..=3).contains(&i) {
            Ok(Self(i))
        } else {
            Err(Error::Precondition(format!("letter index {i} is not in 1..=3")))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Zero-based index into per-letter arrays.
    pub fn offset(self) -> usize {
        self.0 - 1
    }

    pub fn word_pos(self) -> usize {
        2 * self.0
    }

    pub fn rest_pos(self) -> usize {
        2 * self.0 + 1
    }

    pub fn answer_pos(self) -> usize {
        LPAREN_POS + self.0
    }

    /// Position whose logits predict this letter.
    pub fn pred_pos(self) -> usize {
        self.answer_pos() - 1
    }

    pub fn previous(self) -> Option<LetterIndex> {
        (self.0 > 1).then(|| LetterIndex(self.0 - 1))
    }
}

impl TryFrom<usize> for LetterIndex {
    type Error = Error;
    fn try_from(i: usize) -> Result<Self> {
        Self::new(i)
    }
}

impl From<LetterIndex> for usize {
    fn from(i: LetterIndex) -> usize {
        i.0
    }
}

impl fmt::Display for LetterIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A named slot of the template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Bos,
    The,
    Word(LetterIndex),
    Rest(LetterIndex),
    LParen,
    Answer(LetterIndex),
}

impl Slot {
    pub fn position(self) -> usize {
        match self {
            Slot::Bos => BOS_POS,
            Slot::The => THE_POS,
            Slot::Word(i) => i.word_pos(),
            Slot::Rest(i) => i.rest_pos(),
            Slot::LParen => LPAREN_POS,
            Slot::Answer(i) => i.answer_pos(),
        }
    }

    pub fn all() -> [Slot; PROMPT_LEN] {
        use LetterIndex as L;
        [
            Slot::Bos,
            Slot::The,
            Slot::Word(L::FIRST),
            Slot::Rest(L::FIRST),
            Slot::Word(L::SECOND),
            Slot::Rest(L::SECOND),
            Slot::Word(L::THIRD),
            Slot::Rest(L::THIRD),
            Slot::LParen,
            Slot::Answer(L::FIRST),
            Slot::Answer(L::SECOND),
            Slot::Answer(L::THIRD),
        ]
    }

    pub fn at(pos: usize) -> Option<Slot> {
        Self::all().get(pos).copied()
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Bos => write!(f, "BOS"),
            Slot::The => write!(f, "The"),
            Slot::Word(i) => write!(f, "C{i}"),
            Slot::Rest(i) => write!(f, "T{i}"),
            Slot::LParen => write!(f, "("),
            Slot::Answer(i) => write!(f, "A{i}"),
        }
    }
}

/// Slot label → position, as written to manifests.
pub fn position_map() -> BTreeMap<String, usize> {
    Slot::all().iter().map(|s| (s.to_string(), s.position())).collect()
}

/// Token ids the template needs from the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskVocab {
    pub bos: u32,
    pub the: u32,
    pub lparen: u32,
    /// `"A"`..`"Z"`.
    pub letters: [u32; 26],
    /// `" A"`..`" Z"`.
    pub spaced_letters: [u32; 26],
}

impl TaskVocab {
    pub fn from_tokenizer(tok: &Tokenizer) -> Result<Self> {
        let need = |text: &str| {
            tok.single_token(text)
                .ok_or_else(|| Error::Dataset(format!("{text:?} is not a single token in this vocabulary")))
        };
        let mut letters = [0; 26];
        let mut spaced_letters = [0; 26];
        for (i, c) in CAPITALS.iter().enumerate() {
            letters[i] = need(&c.to_string())?;
            spaced_letters[i] = need(&format!(" {c}"))?;
        }
        Ok(Self {
            bos: tok
                .vocab()
                .id(END_OF_TEXT)
                .ok_or_else(|| Error::Dataset(format!("vocabulary lacks {END_OF_TEXT}")))?,
            the: need("The")?,
            lparen: need(" (")?,
            letters,
            spaced_letters,
        })
    }

    pub fn letter_token(&self, c: char) -> Option<u32> {
        c.is_ascii_uppercase().then(|| self.letters[(c as u8 - b'A') as usize])
    }

    pub fn letter_of_token(&self, id: u32) -> Option<char> {
        self.letters.iter().position(|&t| t == id).map(|i| CAPITALS[i])
    }
}

/// A noun usable in prompts: two tokens, `" X"` then the remainder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Noun {
    /// Capitalized spelling without the leading space.
    pub word: String,
    pub letter: char,
    pub tokens: [u32; 2],
}

/// One twelve-token acronym prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSample {
    pub tokens: Vec<u32>,
    pub words: [String; 3],
    /// Letters at the `A1..A3` positions of this prompt.
    pub acronym: String,
    /// Gold letter tokens. Corruptions keep the clean answers.
    pub answers: [u32; 3],
    pub seed: u64,
}

impl AsRef<[u32]> for PromptSample {
    fn as_ref(&self) -> &[u32] {
        &self.tokens
    }
}

impl PromptSample {
    /// Builds a prompt from three nouns and the letters to place at `A1..A3`.
    pub fn assemble(vocab: &TaskVocab, nouns: [&Noun; 3], acronym: &str, seed: u64) -> Result<Self> {
        let letters: Vec<char> = acronym.chars().collect();
        if letters.len() != 3 {
            return Err(Error::Dataset(format!("acronym {acronym:?} is not three letters")));
        }
        let answer_ids = letters
            .iter()
            .map(|&c| vocab.letter_token(c).ok_or_else(|| Error::Dataset(format!("{c:?} is not a capital letter"))))
            .collect::<Result<Vec<_>>>()?;
        let mut tokens = Vec::with_capacity(PROMPT_LEN);
        tokens.extend([vocab.bos, vocab.the]);
        for n in nouns {
            tokens.extend(n.tokens);
        }
        tokens.push(vocab.lparen);
        tokens.extend(&answer_ids);
        Ok(Self {
            tokens,
            words: nouns.map(|n| n.word.clone()),
            acronym: acronym.to_owned(),
            answers: [answer_ids[0], answer_ids[1], answer_ids[2]],
            seed,
        })
    }

    pub fn answer(&self, i: LetterIndex) -> u32 {
        self.answers[i.offset()]
    }

    /// The prompt text without BOS, e.g. `The Wreck Vibe Zipper (WVZ`.
    pub fn render(&self) -> String {
        format!("The {} {} {} ({}", self.words[0], self.words[1], self.words[2], self.acronym)
    }

    /// Confirms that tokenizing the rendered text reproduces the assembled ids.
    pub fn check_tokenization(&self, tok: &Tokenizer) -> Result<()> {
        let ids = tok.encode(&self.render())?;
        if self.tokens.len() != PROMPT_LEN || ids != self.tokens[1..] {
            return Err(Error::Dataset(format!(
                "{:?} tokenizes to {ids:?}, assembled {:?}",
                self.render(),
                &self.tokens[1..]
            )));
        }
        Ok(())
    }
}
