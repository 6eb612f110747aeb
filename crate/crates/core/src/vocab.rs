//! Whole-word vocabularies with the four reserved ids shared by both encoders and the
//! decoder.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::microworld::CaptionText;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const SPECIALS: [&str; 4] = ["[pad]", "[unk]", "[cls]", "[sep]"];

/// Word ↔ id map: the four specials first, then words in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = words.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return Err(Error::Empty("vocabulary needs at least one word".into()));
        }
        if let Some(w) = set.iter().find(|w| SPECIALS.contains(&w.as_str()) || w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(Error::InvalidSpec(format!("`{w}` cannot be a vocabulary word")));
        }
        let words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { words, index })
    }

    pub fn build(corpus: &[CaptionText]) -> Result<Self> {
        Self::from_words(corpus.iter().flat_map(|c| c.tokens.iter().cloned()))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or [`UNK`].
    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Strict encoding: unknown words are an error.
    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t).ok_or_else(|| Error::UnknownToken(t.clone()))).collect()
    }

    /// Words for `ids`, skipping every special id.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().filter(|&&i| !Self::is_special(i)).filter_map(|&i| self.word(i).map(String::from)).collect()
    }

    /// Non-special words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[SPECIALS.len()..]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words().join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let words: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let v = Self::from_words(words.iter().copied())?;
        if v.words() != words {
            return Err(Error::Parse(format!("{}: words not sorted and unique", path.display())));
        }
        Ok(v)
    }
}

/// Where a checkpoint at `path` keeps its vocabulary (`<path>.vocab`).
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab");
    s.into()
}
