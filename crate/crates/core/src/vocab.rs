//! Toy vocabulary and caption token sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const NULL: usize = 1;
/// Number of reserved learnable-token slots `<S1>..<S4>`.
pub const MAX_SLOTS: usize = 4;
const FIRST_SLOT: usize = 2;

const WORDS: &[&str] = &[
    "<pad>", "<null>", "<S1>", "<S2>", "<S3>", "<S4>",
    // colours
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange",
    // shapes
    "circle", "square", "bar",
    // motion
    "moving", "static", "up", "down", "left", "right",
    // scene and filler
    "on", "plain", "textured", "a", "the", "video",
    // quality words used to initialise learnable tokens
    "authentic", "real", "clear", "smooth", "natural", "realistic",
];

pub fn vocab_size() -> usize {
    WORDS.len()
}

pub fn word(id: usize) -> Option<&'static str> {
    WORDS.get(id).copied()
}

pub fn id_of(w: &str) -> Result<usize> {
    WORDS
        .iter()
        .position(|x| *x == w)
        .ok_or_else(|| Error::UnknownToken(w.to_string()))
}

pub fn slot_id(k: usize) -> usize {
    assert!(k < MAX_SLOTS, "slot index out of range");
    FIRST_SLOT + k
}

pub fn is_slot(id: usize) -> bool {
    (FIRST_SLOT..FIRST_SLOT + MAX_SLOTS).contains(&id)
}

/// A caption as token ids. Reserved slots may only form a contiguous suffix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CaptionTokens {
    ids: Vec<usize>,
}

impl TryFrom<Vec<usize>> for CaptionTokens {
    type Error = Error;

    fn try_from(ids: Vec<usize>) -> Result<Self> {
        Self::new(ids)
    }
}

impl From<CaptionTokens> for Vec<usize> {
    fn from(c: CaptionTokens) -> Self {
        c.ids
    }
}

impl CaptionTokens {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size()) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        if let Some(first) = ids.iter().position(|&id| is_slot(id)) {
            if !ids[first..].iter().all(|&id| is_slot(id)) {
                return Err(Error::InvalidArgument(
                    "learnable slots must form a contiguous suffix".into(),
                ));
            }
        }
        Ok(Self { ids })
    }

    /// Parses space-separated words.
    pub fn parse(text: &str) -> Result<Self> {
        let ids = text
            .split_whitespace()
            .map(|w| id_of(&w.to_lowercase()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids)
    }

    pub fn null() -> Self {
        Self { ids: vec![NULL] }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_null(&self) -> bool {
        self.ids.iter().all(|&id| id == NULL)
    }

    pub fn n_slots(&self) -> usize {
        self.ids.iter().filter(|&&id| is_slot(id)).count()
    }

    /// The caption without any learnable slots.
    pub fn base(&self) -> CaptionTokens {
        Self {
            ids: self.ids.iter().copied().filter(|&id| !is_slot(id)).collect(),
        }
    }

    /// `P + S`: the base caption followed by `n` learnable slots.
    pub fn with_slots(&self, n: usize) -> Result<CaptionTokens> {
        if n > MAX_SLOTS {
            return Err(Error::InvalidArgument(format!(
                "at most {MAX_SLOTS} learnable tokens"
            )));
        }
        let mut ids = self.base().ids;
        ids.extend((0..n).map(slot_id));
        Ok(Self { ids })
    }

    pub fn words(&self) -> Vec<&'static str> {
        self.ids.iter().map(|&id| WORDS[id]).collect()
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    pub fn contains_word(&self, w: &str) -> bool {
        id_of(w).map(|id| self.ids.contains(&id)).unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_small() {
        assert!(vocab_size() <= 64);
    }

    #[test]
    fn slots_must_be_a_suffix() {
        let red = id_of("red").unwrap();
        assert!(CaptionTokens::new(vec![red, slot_id(0), slot_id(1)]).is_ok());
        assert!(CaptionTokens::new(vec![slot_id(0), red]).is_err());
        assert!(CaptionTokens::new(vec![999]).is_err());
    }

    #[test]
    fn parse_and_slots() {
        let c = CaptionTokens::parse("red circle moving right").unwrap();
        assert_eq!(c.text(), "red circle moving right");
        let s = c.with_slots(2).unwrap();
        assert_eq!(s.n_slots(), 2);
        assert_eq!(s.base(), c);
        assert!(CaptionTokens::parse("purple").is_err());
    }
}
