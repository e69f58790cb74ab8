//! Word-level vocabulary and tokenizer.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Words used by the synthetic expression templates.
pub const WORDS: &[&str] = &[
    "red", "green", "blue", "yellow", "circle", "square", "triangle", "small", "large", "on",
    "the", "top", "bottom", "left", "right", "center",
];

/// Token table; the line index of a vocabulary file is the token id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub const SPECIALS: usize = SPECIAL_TOKENS.len();

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::SPECIALS
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::Input(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Special tokens followed by the template words.
    pub fn builtin() -> Self {
        let tokens = SPECIAL_TOKENS.iter().chain(WORDS).map(|s| s.to_string()).collect();
        Self::from_tokens(tokens).expect("builtin vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[SOS, words…, EOS, PAD…]` of exactly `max_len` ids.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() + 2 > max_len {
            return Err(Error::Input(format!(
                "expression {text:?} needs {} tokens but max_len is {max_len}",
                words.len() + 2
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(SOS);
        ids.extend(words.iter().map(|w| self.id(&w.to_lowercase())));
        ids.push(EOS);
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i >= UNK)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Index of the single EOS token after a leading SOS, validating the layout
/// `[SOS, …, EOS, PAD…]`.
pub fn eos_position(tokens: &[u32], max_len: usize) -> Result<usize> {
    if tokens.len() > max_len {
        return Err(Error::Input(format!(
            "token sequence of length {} exceeds max_len {max_len}",
            tokens.len()
        )));
    }
    if tokens.len() != max_len {
        return Err(Error::Input(format!(
            "token sequence of length {} is not padded to {max_len}",
            tokens.len()
        )));
    }
    if tokens.first() != Some(&SOS) {
        return Err(Error::Input("token sequence must begin with SOS".into()));
    }
    let mut eos = tokens.iter().enumerate().filter(|(_, &t)| t == EOS).map(|(i, _)| i);
    match (eos.next(), eos.next()) {
        (Some(i), None) => Ok(i),
        (None, _) => Err(Error::Input("token sequence has no EOS".into())),
        (Some(_), Some(_)) => Err(Error::Input("token sequence has more than one EOS".into())),
    }
}
