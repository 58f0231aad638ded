use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{placeholder, Schema};
use super::Dialog;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const GO: &str = "<go>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const DONTCARE: &str = "dontcare";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const GO_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const SEP_ID: u32 = 4;

/// Slot-specific end-of-value symbol for a `domain.slot` key.
pub fn eov_token(key: &str) -> String {
    format!("<eov:{key}>")
}

/// Dense token <-> id map. Specials occupy the lowest ids and survive any cutoff.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    num_specials: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    num_specials: usize,
    tokens: Vec<String>,
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VocabFile {
            num_specials: self.num_specials,
            tokens: self.tokens.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = VocabFile::deserialize(d)?;
        Vocabulary::from_tokens(f.tokens, f.num_specials).map_err(serde::de::Error::custom)
    }
}

impl Vocabulary {
    /// Reserved tokens for a schema: fixed specials, one end-of-value symbol per
    /// informable slot, `[v.slot]` placeholders, domain and slot names, `dontcare`.
    pub fn specials(schema: &Schema) -> Vec<String> {
        let mut out: Vec<String> = [PAD, UNK, GO, EOS, SEP].iter().map(|s| s.to_string()).collect();
        for key in schema.slots() {
            out.push(eov_token(&key.to_string()));
        }
        let push = |t: String, out: &mut Vec<String>| {
            if !out.contains(&t) {
                out.push(t);
            }
        };
        for s in schema.placeholder_slots() {
            push(placeholder(&s), &mut out);
        }
        for d in schema.domains() {
            push(d.name.clone(), &mut out);
            for s in &d.informable {
                push(s.clone(), &mut out);
            }
        }
        push(DONTCARE.to_string(), &mut out);
        out
    }

    /// Most frequent corpus tokens (ties lexicographic) up to `max_size` total,
    /// after the schema specials. Belief values count as corpus tokens.
    pub fn build<'a>(dialogs: impl IntoIterator<Item = &'a Dialog>, schema: &Schema, max_size: usize) -> Vocabulary {
        let specials = Self::specials(schema);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in dialogs {
            for t in &d.turns {
                for tok in t.user.iter().chain(&t.response_delex) {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
                if let Some(b) = &t.gold_belief {
                    for v in b.values() {
                        for tok in v {
                            *counts.entry(tok.as_str()).or_default() += 1;
                        }
                    }
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !specials.iter().any(|s| s == t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let room = max_size.saturating_sub(specials.len());
        let num_specials = specials.len();
        let mut tokens = specials;
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t.to_string()));
        Vocabulary::from_tokens(tokens, num_specials).expect("tokens are distinct by construction")
    }

    pub fn from_tokens(tokens: Vec<String>, num_specials: usize) -> Result<Vocabulary> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        if tokens.len() < 5 || tokens[..5] != [PAD, UNK, GO, EOS, SEP] {
            return Err(Error::Config("vocabulary must start with the fixed specials".into()));
        }
        Ok(Vocabulary {
            tokens,
            index,
            num_specials,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_specials(&self) -> usize {
        self.num_specials
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("vocabulary", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}
