//! Closed caption vocabulary.
//!
//! Id 0 is padding; words take ids from 1 in list order. Serialized as a JSON
//! word-to-id map.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CoreError, Result};

pub const PAD_ID: u32 = 0;
pub const PAD_TOKEN: &str = "<pad>";

const WORDS: &[&str] = &[
    // Template vocabulary.
    "a",
    "person",
    "someone",
    "walks",
    "forward",
    "backward",
    "slowly",
    "quickly",
    "in",
    "clockwise",
    "counterclockwise",
    "half",
    "full",
    "circle",
    "figure",
    "8",
    "and",
    "turns",
    "left",
    "right",
    "45",
    "90",
    "135",
    "180",
    "degrees",
    "raises",
    "the",
    "arm",
    "once",
    "twice",
    "three",
    "times",
    "kicks",
    "with",
    "leg",
    "jumps",
    "place",
    "steps",
    "sideways",
    "to",
    // Base forms and close variants accepted in free-form prompts.
    "walk",
    "walking",
    "turn",
    "turning",
    "raise",
    "raising",
    "kick",
    "kicking",
    "jump",
    "jumping",
    "step",
    "stepping",
    "man",
    "woman",
    "they",
    "he",
    "she",
    "arms",
    "legs",
    "hand",
    "hands",
    "foot",
    "then",
    "slow",
    "fast",
    "quick",
    "circles",
    "around",
    "of",
    "up",
    "his",
    "her",
    "their",
    "an",
    "one",
    "two",
    "x",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

/// Lowercases and splits on non-alphanumeric characters.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_string).collect()
}

impl Vocabulary {
    pub fn desk() -> Self {
        Self::from_words(WORDS.iter().map(|w| w.to_string()).collect()).expect("builtin words are unique")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut all = vec![PAD_TOKEN.to_string()];
        all.extend(words);
        let mut index = BTreeMap::new();
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(CoreError::Vocab(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words: all, index })
    }

    /// Size including the padding token.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let ids = tokenize_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or_else(|| CoreError::Vocab(format!("unknown word {w:?} in {text:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(CoreError::Vocab(format!("caption {text:?} has no tokens")));
        }
        Ok(ids)
    }

    /// Encodes and pads to `len`; returns ids and the attention mask.
    pub fn encode_padded(&self, text: &str, len: usize) -> Result<(Vec<u32>, Vec<bool>)> {
        let mut ids = self.encode(text)?;
        if ids.len() > len {
            return Err(CoreError::Vocab(format!("caption has {} tokens, limit {len}", ids.len())));
        }
        let mut mask = vec![true; ids.len()];
        ids.resize(len, PAD_ID);
        mask.resize(len, false);
        Ok((ids, mask))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.index).expect("map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text)?;
        let mut words = vec![String::new(); map.len()];
        for (w, &i) in &map {
            let slot = words.get_mut(i as usize).ok_or_else(|| CoreError::Vocab(format!("id {i} out of range for {} words", map.len())))?;
            *slot = w.clone();
        }
        if words.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(CoreError::Vocab("id 0 must be the padding token".into()));
        }
        Self::from_words(words.into_iter().skip(1).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| CoreError::io(path, e))
    }
}
