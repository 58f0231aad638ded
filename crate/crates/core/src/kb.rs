//! Entity database and the discretized match-count vector d_t.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{join, tokenize, BeliefState, Schema, DONTCARE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub domain: String,
    pub fields: BTreeMap<String, String>,
}

/// Immutable per-domain entity tables with an index over informable-slot values.
#[derive(Debug, Clone, Default)]
pub struct EntityDb {
    tables: BTreeMap<String, Vec<Entity>>,
    // domain -> (slot, normalized value) -> sorted entity positions
    index: HashMap<String, HashMap<(String, String), Vec<usize>>>,
    by_id: HashMap<String, (String, usize)>,
}

fn normalize(v: &str) -> String {
    join(&tokenize(v))
}

impl EntityDb {
    pub fn new(mut tables: BTreeMap<String, Vec<Entity>>, schema: &Schema) -> Result<EntityDb> {
        let mut index = HashMap::new();
        let mut by_id = HashMap::new();
        for (domain, rows) in tables.iter_mut() {
            let ds = schema
                .domain(domain)
                .ok_or_else(|| Error::UnknownDomain(domain.clone()))?;
            rows.sort_by(|a, b| a.id.cmp(&b.id));
            let mut idx: HashMap<(String, String), Vec<usize>> = HashMap::new();
            for (pos, e) in rows.iter().enumerate() {
                for slot in e.fields.keys() {
                    if !ds.informable.contains(slot) && !ds.requestable.contains(slot) {
                        return Err(Error::UnknownSlot(format!("{domain}.{slot}")));
                    }
                }
                for slot in &ds.informable {
                    if let Some(v) = e.fields.get(slot) {
                        idx.entry((slot.clone(), normalize(v))).or_default().push(pos);
                    }
                }
                if by_id.insert(e.id.clone(), (domain.clone(), pos)).is_some() {
                    return Err(Error::InvalidSchema(format!("duplicate entity id `{}`", e.id)));
                }
            }
            index.insert(domain.clone(), idx);
        }
        Ok(EntityDb { tables, index, by_id })
    }

    /// Database JSON: `{ domain: [ {slot: value, ...}, ... ] }`. An `id` field is
    /// used as the entity id when present, else `domain-<row>`. Non-string scalars
    /// are stringified.
    pub fn from_json(text: &str, schema: &Schema) -> Result<EntityDb> {
        let raw: BTreeMap<String, Vec<serde_json::Map<String, serde_json::Value>>> =
            serde_json::from_str(text).map_err(|e| Error::json("database", e))?;
        let mut tables = BTreeMap::new();
        for (domain, rows) in raw {
            let mut out = Vec::with_capacity(rows.len());
            for (i, row) in rows.into_iter().enumerate() {
                let mut id = format!("{domain}-{i:05}");
                let mut fields = BTreeMap::new();
                for (k, v) in row {
                    let s = match v {
                        serde_json::Value::String(s) => s,
                        serde_json::Value::Null => continue,
                        serde_json::Value::Number(_) | serde_json::Value::Bool(_) => v.to_string(),
                        _ => continue,
                    };
                    if k == "id" {
                        id = s;
                    } else {
                        fields.insert(k, s);
                    }
                }
                out.push(Entity {
                    id,
                    domain: domain.clone(),
                    fields,
                });
            }
            tables.insert(domain, out);
        }
        EntityDb::new(tables, schema)
    }

    pub fn to_json(&self) -> String {
        let out: BTreeMap<&String, Vec<BTreeMap<String, String>>> = self
            .tables
            .iter()
            .map(|(d, rows)| {
                let rows = rows
                    .iter()
                    .map(|e| {
                        let mut m = e.fields.clone();
                        m.insert("id".into(), e.id.clone());
                        m
                    })
                    .collect();
                (d, rows)
            })
            .collect();
        serde_json::to_string_pretty(&out).expect("db serializes")
    }

    pub fn load(path: impl AsRef<Path>, schema: &Schema) -> Result<EntityDb> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        let (d, pos) = self.by_id.get(id)?;
        self.tables.get(d).map(|rows| &rows[*pos])
    }

    pub fn table(&self, domain: &str) -> &[Entity] {
        self.tables.get(domain).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    /// Entities of `domain` whose informable values equal every filled,
    /// non-`dontcare` slot of `b` in that domain. Results are sorted by id.
    pub fn query(&self, schema: &Schema, b: &BeliefState, domain: &str) -> Vec<&Entity> {
        let rows = self.table(domain);
        let Some(idx) = self.index.get(domain) else {
            return Vec::new();
        };
        let mut current: Option<Vec<usize>> = None;
        for i in schema.domain_slots(domain) {
            let v = b.get(i);
            if v.is_empty() || (v.len() == 1 && v[0] == DONTCARE) {
                continue;
            }
            let key = (schema.slots()[i].slot.clone(), join(v));
            let hits = idx.get(&key).map(Vec::as_slice).unwrap_or(&[]);
            current = Some(match current {
                None => hits.to_vec(),
                Some(prev) => prev.into_iter().filter(|p| hits.binary_search(p).is_ok()).collect(),
            });
        }
        match current {
            None => rows.iter().collect(),
            Some(pos) => pos.into_iter().map(|p| &rows[p]).collect(),
        }
    }

    pub fn count(&self, schema: &Schema, b: &BeliefState, domain: &str) -> usize {
        self.query(schema, b, domain).len()
    }
}

/// Free-function form of [`EntityDb::query`].
pub fn query<'a>(db: &'a EntityDb, schema: &Schema, b: &BeliefState, domain: &str) -> Vec<&'a Entity> {
    db.query(schema, b, domain)
}

pub const DB_BUCKETS: usize = 5;

/// One-hot over match counts {0, 1, 2, 3, >3}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DbMatchVector {
    bucket: u8,
}

impl DbMatchVector {
    pub fn bucket(&self) -> usize {
        self.bucket as usize
    }

    pub fn from_bucket(bucket: usize) -> DbMatchVector {
        DbMatchVector {
            bucket: bucket.min(DB_BUCKETS - 1) as u8,
        }
    }

    pub fn one_hot(&self) -> [f64; DB_BUCKETS] {
        let mut v = [0.0; DB_BUCKETS];
        v[self.bucket()] = 1.0;
        v
    }
}

pub fn match_vector(count: usize) -> DbMatchVector {
    DbMatchVector::from_bucket(count.min(4))
}

/// The domain a turn's database lookup runs against: the annotated turn domain,
/// else the dialog's only domain, else the domain of the last slot that changed
/// from `prev`, else the dialog's first domain.
pub fn active_domain(
    schema: &Schema,
    dialog_domains: &[String],
    turn_domain: Option<&str>,
    prev: &BeliefState,
    current: &BeliefState,
) -> Option<String> {
    if let Some(d) = turn_domain {
        return Some(d.to_string());
    }
    if dialog_domains.len() == 1 {
        return Some(dialog_domains[0].clone());
    }
    let changed = (0..schema.num_slots())
        .rev()
        .find(|&i| current.get(i) != prev.get(i) && !current.get(i).is_empty());
    if let Some(i) = changed {
        return Some(schema.slots()[i].domain.clone());
    }
    dialog_domains
        .first()
        .cloned()
        .or_else(|| schema.domains().first().map(|d| d.name.clone()))
}
