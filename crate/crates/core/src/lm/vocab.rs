//! Word-level vocabulary. Item titles dominate the corpus at this scale, so
//! a lowercased, punctuation-split tokenizer keeps things deterministic and
//! dependency-free.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOK: u32 = 0;
pub const MASK_TOK: u32 = 1;
pub const ANSWER_SEP: u32 = 2;
pub const UNK_TOK: u32 = 3;

/// Display forms for the reserved ids. `<pad_item>` doubles as the PAD
/// item's rendered title, so the same lexeme round-trips through prompts.
pub const RESERVED: [&str; 4] = ["<pad_item>", "<mask>", "<answer>", "<unk>"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, u32>,
}

/// Lowercase alphanumeric runs; reserved lexemes (`<pad_item>`, `<mask>`,
/// ...) survive as single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '<' {
            if let Some(reserved) = RESERVED.iter().find(|r| {
                chars[i..].iter().take(r.chars().count()).collect::<String>() == **r
            }) {
                out.push(reserved.to_string());
                i += reserved.chars().count();
                continue;
            }
        }
        if chars[i].is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
        } else {
            i += 1;
        }
    }
    out
}

/// Most-frequent-first word vocabulary over `corpus`, reserved ids
/// prepended. Frequency ties break lexicographically, so construction is
/// deterministic. Words beyond `max_size` map to UNK at encode time.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Data("empty vocabulary corpus".to_string()));
    }
    assert!(max_size > RESERVED.len(), "max_size must exceed reserved ids");
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in corpus {
        for tok in tokenize(text.as_ref()) {
            if RESERVED.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut words: Vec<(String, u64)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    words.truncate(max_size - RESERVED.len());

    let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(words.into_iter().map(|(w, _)| w));
    Ok(Vocab::from_tokens(id_to_token))
}

impl Vocab {
    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    /// Rebuild the lookup map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .into_iter()
            .map(|tok| self.token_to_id.get(&tok).copied().unwrap_or(UNK_TOK))
            .collect()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
