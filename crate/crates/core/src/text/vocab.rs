use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::text::dataset::Example;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Joins evidence sentences when contexts are concatenated.
pub const SEPARATOR_TOKEN: &str = "</s>";

/// Token/id map. Id 0 is PAD and id 1 is UNK; content tokens start at 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            ids: HashMap::new(),
        }
    }

    /// Rebuilds from an id-ordered token list whose first two entries are
    /// the reserved PAD and UNK names.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Contract("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut v = Vocabulary::new();
        for t in &tokens[2..] {
            if v.ids.contains_key(t) || t == PAD_TOKEN || t == UNK_TOKEN {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
            v.push(t.clone());
        }
        Ok(v)
    }

    fn push(&mut self, token: String) -> usize {
        let id = self.tokens.len();
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Adds `token` if absent and returns its id.
    /// Reserved names are never added; they map to UNK.
    pub fn insert(&mut self, token: &str) -> usize {
        if token == PAD_TOKEN || token == UNK_TOKEN {
            return UNK;
        }
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        self.push(token.to_string())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a content token, `UNK` otherwise. Reserved names never map to
    /// PAD or UNK through this path.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    pub fn separator(&self) -> Option<usize> {
        self.ids.get(SEPARATOR_TOKEN).copied()
    }

    pub fn ensure_separator(&mut self) -> usize {
        self.insert(SEPARATOR_TOKEN)
    }
}

/// Vocabulary over every text and context token of `corpus`, extending
/// `pretrained` (whose ids are kept) when given.
pub fn build_vocab(corpus: &[Example], pretrained: Option<&Vocabulary>) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut v = pretrained.cloned().unwrap_or_default();
    for ex in corpus {
        for t in ex.text.iter().chain(ex.contexts.iter().flatten()) {
            v.insert(t);
        }
    }
    Ok(v)
}
