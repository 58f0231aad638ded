use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One domain's slot inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub name: String,
    pub informable: Vec<String>,
    pub requestable: Vec<String>,
    /// Known surface values per slot name.
    #[serde(default)]
    pub values: BTreeMap<String, Vec<String>>,
}

/// A (domain, slot) pair; displayed as `domain.slot`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotKey {
    pub domain: String,
    pub slot: String,
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.domain, self.slot)
    }
}

impl SlotKey {
    pub fn parse(key: &str) -> Option<SlotKey> {
        let (domain, slot) = key.split_once('.')?;
        Some(SlotKey {
            domain: domain.to_string(),
            slot: slot.to_string(),
        })
    }
}

/// Ontology shared by corpus, database and model.
///
/// The flattened informable slot list (declaration order, domain by domain) fixes
/// the canonical belief ordering everywhere else in the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    domains: Vec<DomainSchema>,
    slots: Vec<SlotKey>,
    slot_index: HashMap<SlotKey, usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    domains: Vec<DomainSchema>,
}

impl Serialize for Schema {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SchemaFile {
            domains: self.domains.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = SchemaFile::deserialize(d)?;
        Schema::new(file.domains).map_err(serde::de::Error::custom)
    }
}

impl Schema {
    pub fn new(domains: Vec<DomainSchema>) -> Result<Schema> {
        let mut seen_domains = BTreeSet::new();
        let mut slots = Vec::new();
        let mut slot_index = HashMap::new();
        for d in &domains {
            if !seen_domains.insert(d.name.clone()) {
                return Err(Error::InvalidSchema(format!("duplicate domain `{}`", d.name)));
            }
            if d.name.contains('.') {
                return Err(Error::InvalidSchema(format!("domain name `{}` contains '.'", d.name)));
            }
            if d.informable.is_empty() || d.requestable.is_empty() {
                return Err(Error::InvalidSchema(format!(
                    "domain `{}` needs non-empty informable and requestable slot lists",
                    d.name
                )));
            }
            let mut seen = BTreeSet::new();
            for s in &d.informable {
                if !seen.insert(s) {
                    return Err(Error::InvalidSchema(format!(
                        "duplicate informable slot `{}.{}`",
                        d.name, s
                    )));
                }
                let key = SlotKey {
                    domain: d.name.clone(),
                    slot: s.clone(),
                };
                slot_index.insert(key.clone(), slots.len());
                slots.push(key);
            }
            let mut seen = BTreeSet::new();
            for s in &d.requestable {
                if !seen.insert(s) {
                    return Err(Error::InvalidSchema(format!(
                        "duplicate requestable slot `{}.{}`",
                        d.name, s
                    )));
                }
            }
        }
        Ok(Schema {
            domains,
            slots,
            slot_index,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Schema> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("schema", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn domains(&self) -> &[DomainSchema] {
        &self.domains
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSchema> {
        self.domains.iter().find(|d| d.name == name)
    }

    /// All informable (domain, slot) pairs in canonical order.
    pub fn slots(&self) -> &[SlotKey] {
        &self.slots
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_index(&self, domain: &str, slot: &str) -> Option<usize> {
        self.slot_index.get(&SlotKey {
            domain: domain.to_string(),
            slot: slot.to_string(),
        })
        .copied()
    }

    /// Resolve a `domain.slot` key, or a bare slot name when it is unambiguous.
    pub fn resolve_key(&self, key: &str) -> Result<usize> {
        if let Some(k) = SlotKey::parse(key) {
            if self.domain(&k.domain).is_none() {
                return Err(Error::UnknownDomain(k.domain));
            }
            return self
                .slot_index
                .get(&k)
                .copied()
                .ok_or_else(|| Error::UnknownSlot(key.to_string()));
        }
        let mut hits = self.slots.iter().enumerate().filter(|(_, s)| s.slot == key);
        match (hits.next(), hits.next()) {
            (Some((i, _)), None) => Ok(i),
            _ => Err(Error::UnknownSlot(key.to_string())),
        }
    }

    /// Slot indices belonging to `domain`.
    pub fn domain_slots(&self, domain: &str) -> impl Iterator<Item = usize> + '_ {
        let domain = domain.to_string();
        self.slots
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.domain == domain)
            .map(|(i, _)| i)
    }

    pub fn is_requestable(&self, domain: &str, slot: &str) -> bool {
        self.domain(domain)
            .map(|d| d.requestable.iter().any(|s| s == slot))
            .unwrap_or(false)
    }

    /// Distinct slot names across all domains (informable first, then requestable),
    /// used for `[v.<slot>]` placeholders.
    pub fn placeholder_slots(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for d in &self.domains {
            for s in d.informable.iter().chain(&d.requestable) {
                if !out.contains(s) {
                    out.push(s.clone());
                }
            }
        }
        out
    }

    /// Distinct value count across all slot inventories.
    pub fn value_count(&self) -> usize {
        self.domains
            .iter()
            .flat_map(|d| d.values.iter().flat_map(|(s, vs)| vs.iter().map(move |v| (s, v))))
            .collect::<BTreeSet<_>>()
            .len()
    }
}

pub fn placeholder(slot: &str) -> String {
    format!("[v.{slot}]")
}

/// Returns the slot name of a `[v.<slot>]` placeholder token.
pub fn placeholder_slot(token: &str) -> Option<&str> {
    token.strip_prefix("[v.")?.strip_suffix(']')
}

#[cfg(test)]
pub(crate) fn camrest_schema() -> Schema {
    let values = BTreeMap::from([
        (
            "food".to_string(),
            vec!["british".into(), "russian".into(), "italian".into()],
        ),
        (
            "pricerange".to_string(),
            vec!["cheap".into(), "moderate".into(), "expensive".into()],
        ),
        (
            "area".to_string(),
            vec!["north".into(), "south".into(), "centre".into()],
        ),
    ]);
    Schema::new(vec![DomainSchema {
        name: "restaurant".into(),
        informable: vec!["food".into(), "pricerange".into(), "area".into()],
        requestable: vec![
            "name".into(),
            "addr".into(),
            "phone".into(),
            "postcode".into(),
        ],
        values,
    }])
    .unwrap()
}
