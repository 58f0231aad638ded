use std::collections::BTreeMap;

use super::schema::Schema;
use super::tokenize::{join, tokenize};
use super::vocab::eov_token;
use crate::error::{Error, Result};

/// Belief state b_t: one value token sequence per informable slot, in schema order.
/// An empty sequence means the slot is unfilled.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct BeliefState {
    values: Vec<Vec<String>>,
}

impl BeliefState {
    /// The empty state b_0.
    pub fn empty(schema: &Schema) -> BeliefState {
        BeliefState {
            values: vec![Vec::new(); schema.num_slots()],
        }
    }

    pub fn from_values(values: Vec<Vec<String>>) -> BeliefState {
        BeliefState { values }
    }

    /// Build from `domain.slot -> "value text"` pairs. Empty strings mean unfilled.
    pub fn from_map<'a>(
        schema: &Schema,
        entries: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<BeliefState> {
        let mut b = BeliefState::empty(schema);
        for (k, v) in entries {
            let i = schema.resolve_key(k)?;
            b.values[i] = tokenize(v);
        }
        Ok(b)
    }

    pub fn to_map(&self, schema: &Schema) -> BTreeMap<String, String> {
        schema
            .slots()
            .iter()
            .zip(&self.values)
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.to_string(), join(v)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|v| v.is_empty())
    }

    pub fn values(&self) -> &[Vec<String>] {
        &self.values
    }

    pub fn get(&self, slot: usize) -> &[String] {
        &self.values[slot]
    }

    pub fn set(&mut self, slot: usize, value: Vec<String>) {
        self.values[slot] = value;
    }

    /// Indices of filled slots.
    pub fn filled(&self) -> impl Iterator<Item = usize> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(i, _)| i)
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.values.len() != schema.num_slots() {
            return Err(Error::SchemaMismatch(vec![format!(
                "belief has {} slots, schema has {}",
                self.values.len(),
                schema.num_slots()
            )]));
        }
        Ok(())
    }
}

/// Canonical text-span form: each slot's value followed by its end-of-value symbol.
pub fn serialize_belief(b: &BeliefState, schema: &Schema) -> Vec<String> {
    let mut out = Vec::new();
    for (key, v) in schema.slots().iter().zip(b.values()) {
        out.extend(v.iter().cloned());
        out.push(eov_token(&key.to_string()));
    }
    out
}

pub fn parse_belief(tokens: &[String], schema: &Schema) -> Result<BeliefState> {
    let eovs: Vec<String> = schema.slots().iter().map(|k| eov_token(&k.to_string())).collect();
    let mut b = BeliefState::empty(schema);
    let mut pos = 0;
    for (i, eov) in eovs.iter().enumerate() {
        let mut value = Vec::new();
        loop {
            match tokens.get(pos) {
                Some(t) if t == eov => {
                    pos += 1;
                    break;
                }
                Some(t) if !eovs.contains(t) => {
                    value.push(t.clone());
                    pos += 1;
                }
                _ => return Err(Error::MissingTerminator(schema.slots()[i].to_string())),
            }
        }
        b.values[i] = value;
    }
    if pos != tokens.len() {
        return Err(Error::MalformedRecord {
            dialog: "-".into(),
            field: "belief".into(),
            reason: format!("{} trailing tokens after the last slot", tokens.len() - pos),
        });
    }
    Ok(b)
}
