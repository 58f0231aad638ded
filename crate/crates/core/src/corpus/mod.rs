//! Dialog corpora: loading, normalization, delexicalization, label splitting,
//! vocabulary, and the text-span form of belief states.

pub mod adapters;
mod belief;
mod delex;
mod schema;
mod tokenize;
mod vocab;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use belief::{parse_belief, serialize_belief, BeliefState};
pub use delex::{candidates, delexicalize, delexicalize_with, fill_from_entity, relexicalize, SpanMap};
pub use schema::{placeholder, placeholder_slot, DomainSchema, Schema, SlotKey};
pub use tokenize::{join, tokenize};
pub use vocab::*;

use crate::error::{Error, Result};
use crate::kb::EntityDb;

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub user: Vec<String>,
    pub response_delex: Vec<String>,
    pub response_raw: Vec<String>,
    pub gold_belief: Option<BeliefState>,
    pub span_map: SpanMap,
    pub entity_id: Option<String>,
    /// Active domain of the turn when the source annotates it.
    pub domain: Option<String>,
}

impl Turn {
    /// A turn whose response has nothing to delexicalize.
    pub fn unlabeled(user: Vec<String>, response: Vec<String>) -> Turn {
        Turn {
            user,
            response_delex: response.clone(),
            response_raw: response,
            gold_belief: None,
            span_map: Vec::new(),
            entity_id: None,
            domain: None,
        }
    }
}

/// Per-domain user goal used by the Inform/Success and SuccF1 metrics.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DomainGoal {
    #[serde(default)]
    pub inform: BTreeMap<String, String>,
    #[serde(default)]
    pub request: Vec<String>,
}

pub type Goal = BTreeMap<String, DomainGoal>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dialog {
    pub id: String,
    pub domains: Vec<String>,
    pub turns: Vec<Turn>,
    /// Explicit goal annotation from the source file, if any.
    pub goal: Option<Goal>,
}

impl Dialog {
    pub fn is_labeled(&self) -> bool {
        !self.turns.is_empty() && self.turns.iter().all(|t| t.gold_belief.is_some())
    }

    /// The explicit goal, or one derived from the final gold belief (inform
    /// constraints) and the requestable placeholders other than `name` found in
    /// gold responses (requests).
    pub fn goal_or_derived(&self, schema: &Schema) -> Goal {
        if let Some(g) = &self.goal {
            return g.clone();
        }
        let mut goal = Goal::new();
        let final_belief = self.turns.last().and_then(|t| t.gold_belief.as_ref());
        for dom in &self.domains {
            let mut dg = DomainGoal::default();
            if let Some(b) = final_belief {
                for i in schema.domain_slots(dom) {
                    if !b.get(i).is_empty() {
                        dg.inform.insert(schema.slots()[i].slot.clone(), join(b.get(i)));
                    }
                }
            }
            for t in &self.turns {
                for tok in &t.response_delex {
                    if let Some(slot) = placeholder_slot(tok) {
                        if slot != "name" && schema.is_requestable(dom, slot) && !dg.request.iter().any(|r| r == slot) {
                            dg.request.push(slot.to_string());
                        }
                    }
                }
            }
            goal.insert(dom.clone(), dg);
        }
        goal
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DialogCorpus {
    pub dialogs: Vec<Dialog>,
}

/// Table-6-style summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub dialogs: usize,
    pub avg_turns: f64,
    pub turns: usize,
    pub labeled_dialogs: usize,
    pub domains: usize,
    pub informable_slots: usize,
    pub requestable_slots: usize,
    pub values: usize,
}

impl std::fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "#Dialog {}, avg turns {:.1}", self.dialogs, self.avg_turns)?;
        writeln!(f, "#Domain {}", self.domains)?;
        writeln!(f, "#Info. Slot {}", self.informable_slots)?;
        writeln!(f, "#Req. Slot {}", self.requestable_slots)?;
        write!(f, "#Values {}", self.values)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct TurnRecord {
    pub(crate) user: String,
    pub(crate) response: String,
    pub(crate) belief: Option<BTreeMap<String, String>>,
    pub(crate) entity_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) domain: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct DialogRecord {
    pub(crate) id: String,
    pub(crate) domains: Vec<String>,
    pub(crate) turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) goal: Option<Goal>,
}

impl DialogCorpus {
    pub fn new(dialogs: Vec<Dialog>) -> DialogCorpus {
        DialogCorpus { dialogs }
    }

    pub fn len(&self) -> usize {
        self.dialogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogs.is_empty()
    }

    pub fn num_turns(&self) -> usize {
        self.dialogs.iter().map(|d| d.turns.len()).sum()
    }

    pub fn stats(&self, schema: &Schema) -> CorpusStats {
        let turns = self.num_turns();
        CorpusStats {
            dialogs: self.len(),
            avg_turns: if self.is_empty() { 0.0 } else { turns as f64 / self.len() as f64 },
            turns,
            labeled_dialogs: self.dialogs.iter().filter(|d| d.is_labeled()).count(),
            domains: schema.domains().len(),
            informable_slots: schema.num_slots(),
            requestable_slots: schema.domains().iter().map(|d| d.requestable.len()).sum(),
            values: schema.value_count(),
        }
    }

    /// Parse the corpus JSON format. `db` supplies entity records for
    /// delexicalization when turns carry an `entity_id`.
    pub fn from_json(text: &str, schema: &Schema, db: Option<&EntityDb>) -> Result<DialogCorpus> {
        let raw: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| Error::json("corpus", e))?;
        let mut dialogs = Vec::with_capacity(raw.len());
        for (i, value) in raw.into_iter().enumerate() {
            let id = value
                .get("id")
                .and_then(|v| v.as_str())
                .map(String::from)
                .unwrap_or_else(|| format!("#{i}"));
            let rec: DialogRecord = serde_json::from_value(value).map_err(|e| Error::MalformedRecord {
                dialog: id.clone(),
                field: field_of(&e),
                reason: e.to_string(),
            })?;
            dialogs.push(dialog_from_record(rec, schema, db)?);
        }
        Ok(DialogCorpus { dialogs })
    }

    pub(crate) fn from_records(recs: Vec<DialogRecord>, schema: &Schema, db: Option<&EntityDb>) -> Result<DialogCorpus> {
        let dialogs = recs
            .into_iter()
            .map(|r| dialog_from_record(r, schema, db))
            .collect::<Result<_>>()?;
        Ok(DialogCorpus { dialogs })
    }

    pub fn to_json(&self, schema: &Schema) -> String {
        let recs: Vec<DialogRecord> = self
            .dialogs
            .iter()
            .map(|d| DialogRecord {
                id: d.id.clone(),
                domains: d.domains.clone(),
                goal: d.goal.clone(),
                turns: d
                    .turns
                    .iter()
                    .map(|t| TurnRecord {
                        user: join(&t.user),
                        response: join(&t.response_raw),
                        belief: t.gold_belief.as_ref().map(|b| b.to_map(schema)),
                        entity_id: t.entity_id.clone(),
                        domain: t.domain.clone(),
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_string_pretty(&recs).expect("corpus records serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>, schema: &Schema) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json(schema)).map_err(|e| Error::io(path, e))
    }

    /// Dialog-level split: `floor(fraction * n)` dialogs keep their labels; the
    /// rest lose `gold_belief` but keep responses and entity annotations.
    /// Both partitions preserve corpus order.
    pub fn split_labels(&self, fraction: f64, seed: u64) -> (DialogCorpus, DialogCorpus) {
        let fraction = fraction.clamp(0.0, 1.0);
        let n = self.len();
        let n_labeled = ((fraction * n as f64) + 1e-9).floor() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut is_labeled = vec![false; n];
        for &i in &order[..n_labeled.min(n)] {
            is_labeled[i] = true;
        }
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for (d, lab) in self.dialogs.iter().zip(is_labeled) {
            if lab {
                labeled.push(d.clone());
            } else {
                let mut d = d.clone();
                for t in &mut d.turns {
                    t.gold_belief = None;
                }
                unlabeled.push(d);
            }
        }
        (DialogCorpus::new(labeled), DialogCorpus::new(unlabeled))
    }
}

fn field_of(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for key in ["missing field `", "unknown field `", "invalid type"] {
        if let Some(pos) = msg.find(key) {
            if key.ends_with('`') {
                let rest = &msg[pos + key.len()..];
                return rest.split('`').next().unwrap_or("?").to_string();
            }
            return "value".to_string();
        }
    }
    "record".to_string()
}

fn dialog_from_record(rec: DialogRecord, schema: &Schema, db: Option<&EntityDb>) -> Result<Dialog> {
    if rec.turns.is_empty() {
        return Err(Error::MalformedRecord {
            dialog: rec.id,
            field: "turns".into(),
            reason: "dialog has no turns".into(),
        });
    }
    for d in &rec.domains {
        if schema.domain(d).is_none() {
            return Err(Error::UnknownDomain(d.clone()));
        }
    }
    let mut turns = Vec::with_capacity(rec.turns.len());
    for (ti, t) in rec.turns.into_iter().enumerate() {
        let gold_belief = match &t.belief {
            None => None,
            Some(map) => Some(
                BeliefState::from_map(schema, map.iter().map(|(k, v)| (k.as_str(), v.as_str()))).map_err(|e| match e {
                    Error::UnknownSlot(_) | Error::UnknownDomain(_) => e,
                    other => Error::MalformedRecord {
                        dialog: rec.id.clone(),
                        field: format!("turns[{ti}].belief"),
                        reason: other.to_string(),
                    },
                })?,
            ),
        };
        if let Some(d) = &t.domain {
            if schema.domain(d).is_none() {
                return Err(Error::UnknownDomain(d.clone()));
            }
        }
        let entity = match (&t.entity_id, db) {
            (Some(id), Some(db)) => Some(db.entity(id).ok_or_else(|| Error::MalformedRecord {
                dialog: rec.id.clone(),
                field: format!("turns[{ti}].entity_id"),
                reason: format!("entity `{id}` not in database"),
            })?),
            _ => None,
        };
        let response_raw = tokenize(&t.response);
        let (response_delex, span_map) = delexicalize(&response_raw, entity, schema);
        turns.push(Turn {
            user: tokenize(&t.user),
            response_delex,
            response_raw,
            gold_belief,
            span_map,
            entity_id: t.entity_id,
            domain: t.domain,
        });
    }
    Ok(Dialog {
        id: rec.id,
        domains: rec.domains,
        turns,
        goal: rec.goal,
    })
}

pub fn load_corpus(path: impl AsRef<Path>, schema: &Schema, db: Option<&EntityDb>) -> Result<DialogCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DialogCorpus::from_json(&text, schema, db)
}
