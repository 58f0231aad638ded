//! Source-format adapters. Each turns a public release into the normalized
//! corpus/schema/database triple.
//!
//! Normalization shared by all adapters:
//! - text is lowercased and tokenized by [`tokenize`](super::tokenize);
//! - `dont care`, `don't care`, `do n't care`, `any` become `dontcare`;
//!   `not mentioned`, `none` and empty strings mean "slot not set";
//! - belief labels are cumulative: a turn's belief is the union of every
//!   value informed so far, later values overwriting earlier ones;
//! - database columns outside the schema are dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde_json::Value;

use super::{join, tokenize, DialogCorpus, DialogRecord, DomainGoal, DomainSchema, Goal, Schema, TurnRecord, DONTCARE};
use crate::error::{Error, Result};
use crate::kb::{Entity, EntityDb};

/// A normalized dataset: schema, database and named splits (`train`, `dev`, `test`).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub schema: Schema,
    pub db: EntityDb,
    pub splits: Vec<(String, DialogCorpus)>,
}

impl Prepared {
    pub fn split(&self, name: &str) -> Option<&DialogCorpus> {
        self.splits.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }
}

fn adapter_err(adapter: &str, reason: impl Into<String>) -> Error {
    Error::Adapter {
        adapter: adapter.into(),
        reason: reason.into(),
    }
}

fn read_json(adapter: &str, path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| adapter_err(adapter, format!("{}: {e}", path.display())))
}

/// Normalized slot value, `None` when the slot is unset.
pub fn normalize_value(v: &str) -> Option<String> {
    let v = join(&tokenize(v));
    match v.as_str() {
        "" | "not mentioned" | "none" => None,
        "dont care" | "don't care" | "do n't care" | "dontcare" | "any" => Some(DONTCARE.to_string()),
        _ => Some(v),
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn field(v: &Value, key: &str) -> Value {
    v.get(key).cloned().unwrap_or(Value::Null)
}

/// Sorted unique value lists per slot.
#[derive(Default)]
struct Inventory(BTreeMap<String, BTreeMap<String, BTreeSet<String>>>);

impl Inventory {
    fn add(&mut self, domain: &str, slot: &str, value: &str) {
        if value != DONTCARE && !value.is_empty() {
            self.0
                .entry(domain.into())
                .or_default()
                .entry(slot.into())
                .or_default()
                .insert(value.into());
        }
    }

    fn values(&self, domain: &str) -> BTreeMap<String, Vec<String>> {
        self.0
            .get(domain)
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.iter().cloned().collect())).collect())
            .unwrap_or_default()
    }
}

fn domain_schema(name: &str, informable: &[&str], requestable: &[&str], inv: &Inventory) -> DomainSchema {
    let mut values = inv.values(name);
    let keep: BTreeSet<&str> = informable.iter().chain(requestable).copied().collect();
    values.retain(|k, _| keep.contains(k.as_str()));
    DomainSchema {
        name: name.into(),
        informable: informable.iter().map(|s| s.to_string()).collect(),
        requestable: requestable.iter().map(|s| s.to_string()).collect(),
        values,
    }
}

/// Split `recs` by position into consecutive train/dev/test blocks of ratio 3:1:1.
fn split_311(recs: Vec<DialogRecord>) -> Vec<(String, Vec<DialogRecord>)> {
    let n = recs.len();
    let n_train = n * 3 / 5;
    let n_dev = n / 5;
    let mut it = recs.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let dev: Vec<_> = it.by_ref().take(n_dev).collect();
    let test: Vec<_> = it.collect();
    vec![("train".into(), train), ("dev".into(), dev), ("test".into(), test)]
}

fn finish(schema: Schema, db: EntityDb, splits: Vec<(String, Vec<DialogRecord>)>) -> Result<Prepared> {
    let splits = splits
        .into_iter()
        .map(|(name, recs)| Ok((name, DialogCorpus::from_records(recs, &schema, Some(&db))?)))
        .collect::<Result<_>>()?;
    Ok(Prepared { schema, db, splits })
}

fn belief_map(domain: &str, state: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    state.iter().map(|(k, v)| (format!("{domain}.{k}"), v.clone())).collect()
}

// ---------------------------------------------------------------- CamRest676

const CAMREST: &str = "camrest676";
const CAMREST_INF: [&str; 3] = ["food", "pricerange", "area"];
const CAMREST_REQ: [&str; 4] = ["name", "addr", "phone", "postcode"];

fn camrest_slot(s: &str) -> &str {
    match s {
        "address" => "addr",
        "price range" | "price" => "pricerange",
        other => other,
    }
}

/// `CamRest676.json` (dialog list with `dial[].usr.slu` inform acts and
/// `goal.constraints` / `goal.request-slots`) plus `CamRestDB.json`. Splits are
/// consecutive 3:1:1 blocks in file order. A turn's entity is the first database
/// restaurant whose name occurs in the system response.
pub fn camrest676(dialogs_path: &Path, db_path: &Path) -> Result<Prepared> {
    camrest676_from_values(read_json(CAMREST, dialogs_path)?, read_json(CAMREST, db_path)?)
}

pub fn camrest676_from_values(dialogs: Value, db: Value) -> Result<Prepared> {
    let rows = db.as_array().ok_or_else(|| adapter_err(CAMREST, "database must be a list"))?;
    let mut inv = Inventory::default();
    let mut entities = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let obj = row.as_object().ok_or_else(|| adapter_err(CAMREST, format!("db row {i} not an object")))?;
        let mut fields = BTreeMap::new();
        for (k, v) in obj {
            let slot = camrest_slot(k);
            if !CAMREST_INF.contains(&slot) && !CAMREST_REQ.contains(&slot) {
                continue;
            }
            if let Some(v) = scalar(v).and_then(|v| normalize_value(&v)) {
                inv.add("restaurant", slot, &v);
                fields.insert(slot.to_string(), v);
            }
        }
        let id = obj.get("id").and_then(scalar).unwrap_or_else(|| format!("{i}"));
        entities.push(Entity {
            id: format!("restaurant-{id}"),
            domain: "restaurant".into(),
            fields,
        });
    }
    let dialogs = dialogs.as_array().ok_or_else(|| adapter_err(CAMREST, "dialog file must be a list"))?;
    let mut recs = Vec::with_capacity(dialogs.len());
    for (di, d) in dialogs.iter().enumerate() {
        let id = d.get("dialogue_id").and_then(scalar).unwrap_or_else(|| di.to_string());
        let dial = d
            .get("dial")
            .and_then(Value::as_array)
            .ok_or_else(|| adapter_err(CAMREST, format!("dialog {id}: missing `dial`")))?;
        let mut state = BTreeMap::new();
        let mut turns = Vec::with_capacity(dial.len());
        for t in dial {
            let usr = field(t, "usr");
            for act in usr.get("slu").and_then(Value::as_array).into_iter().flatten() {
                if act.get("act").and_then(Value::as_str) != Some("inform") {
                    continue;
                }
                for pair in act.get("slots").and_then(Value::as_array).into_iter().flatten() {
                    let (Some(k), Some(v)) = (pair.get(0).and_then(scalar), pair.get(1).and_then(scalar)) else {
                        continue;
                    };
                    let slot = camrest_slot(&k).to_string();
                    if !CAMREST_INF.contains(&slot.as_str()) {
                        continue;
                    }
                    if let Some(v) = normalize_value(&v) {
                        inv.add("restaurant", &slot, &v);
                        state.insert(slot, v);
                    }
                }
            }
            let user = usr.get("transcript").and_then(scalar).unwrap_or_default();
            let response = field(t, "sys").get("sent").and_then(scalar).unwrap_or_default();
            let resp_norm = format!(" {} ", join(&tokenize(&response)));
            let entity_id = entities
                .iter()
                .find(|e| e.fields.get("name").is_some_and(|n| resp_norm.contains(&format!(" {n} "))))
                .map(|e| e.id.clone());
            turns.push(TurnRecord {
                user,
                response,
                belief: Some(belief_map("restaurant", &state)),
                entity_id,
                domain: Some("restaurant".into()),
            });
        }
        let goal = d.get("goal").map(|g| {
            let mut dg = DomainGoal::default();
            for pair in g.get("constraints").and_then(Value::as_array).into_iter().flatten() {
                if let (Some(k), Some(v)) = (pair.get(0).and_then(scalar), pair.get(1).and_then(scalar)) {
                    if let Some(v) = normalize_value(&v) {
                        dg.inform.insert(camrest_slot(&k).to_string(), v);
                    }
                }
            }
            for r in g.get("request-slots").and_then(Value::as_array).into_iter().flatten() {
                if let Some(r) = scalar(r) {
                    let r = camrest_slot(&r).to_string();
                    if CAMREST_REQ.contains(&r.as_str()) && !dg.request.contains(&r) {
                        dg.request.push(r);
                    }
                }
            }
            Goal::from([("restaurant".to_string(), dg)])
        });
        recs.push(DialogRecord {
            id,
            domains: vec!["restaurant".into()],
            turns,
            goal,
        });
    }
    let schema = Schema::new(vec![domain_schema("restaurant", &CAMREST_INF, &CAMREST_REQ, &inv)])?;
    let db = EntityDb::new(BTreeMap::from([("restaurant".to_string(), entities)]), &schema)?;
    finish(schema, db, split_311(recs))
}

// ------------------------------------------------------------------- In-Car

const INCAR: &str = "incar";

fn incar_domains() -> [(&'static str, &'static [&'static str], &'static [&'static str]); 3] {
    [
        (
            "schedule",
            &["event", "date", "time", "party", "room", "agenda"],
            &["event", "date", "time", "party", "room", "agenda"],
        ),
        ("weather", &["location", "weather_attribute", "date"], &["weather_attribute"]),
        ("navigate", &["poi_type", "distance", "traffic_info", "poi"], &["poi", "address", "distance", "traffic_info"]),
    ]
}

/// Stanford In-Car (`kvret_{train,dev,test}_public.json`). The task intent gives
/// the domain; assistant-turn `slots` annotations give the belief of the
/// preceding user turn. Per-dialog knowledge bases are pooled into one table per
/// domain, deduplicated by row content; turns carry no entity id.
pub fn incar(train: &Path, dev: &Path, test: &Path) -> Result<Prepared> {
    incar_from_values(vec![
        ("train".into(), read_json(INCAR, train)?),
        ("dev".into(), read_json(INCAR, dev)?),
        ("test".into(), read_json(INCAR, test)?),
    ])
}

pub fn incar_from_values(files: Vec<(String, Value)>) -> Result<Prepared> {
    let domains = incar_domains();
    let known = |d: &str, s: &str| {
        domains
            .iter()
            .any(|(n, inf, req)| *n == d && (inf.contains(&s) || req.contains(&s)))
    };
    let is_informable = |d: &str, s: &str| domains.iter().any(|(n, inf, _)| *n == d && inf.contains(&s));
    let mut inv = Inventory::default();
    let mut tables: BTreeMap<String, BTreeSet<BTreeMap<String, String>>> = BTreeMap::new();
    let mut splits = Vec::new();
    for (split, value) in files {
        let dialogs = value
            .as_array()
            .ok_or_else(|| adapter_err(INCAR, format!("{split}: must be a list")))?;
        let mut recs = Vec::new();
        for (di, d) in dialogs.iter().enumerate() {
            let id = format!("{split}-{di}");
            let scenario = field(d, "scenario");
            let domain = field(&scenario, "task")
                .get("intent")
                .and_then(scalar)
                .ok_or_else(|| adapter_err(INCAR, format!("dialog {id}: missing scenario.task.intent")))?;
            if !domains.iter().any(|(n, _, _)| *n == domain) {
                return Err(Error::UnknownDomain(domain));
            }
            for item in field(&scenario, "kb").get("items").and_then(Value::as_array).into_iter().flatten() {
                let mut row = BTreeMap::new();
                for (k, v) in item.as_object().into_iter().flatten() {
                    if !known(&domain, k) {
                        continue;
                    }
                    if let Some(v) = scalar(v).and_then(|v| normalize_value(&v)) {
                        inv.add(&domain, k, &v);
                        row.insert(k.clone(), v);
                    }
                }
                if !row.is_empty() {
                    tables.entry(domain.clone()).or_default().insert(row);
                }
            }
            let mut state = BTreeMap::new();
            let mut turns = Vec::new();
            let mut pending_user: Option<String> = None;
            for t in field(d, "dialogue").as_array().into_iter().flatten() {
                let data = field(t, "data");
                let utt = data.get("utterance").and_then(scalar).unwrap_or_default();
                match t.get("turn").and_then(Value::as_str) {
                    Some("driver") => {
                        pending_user = Some(match pending_user.take() {
                            Some(prev) => format!("{prev} {utt}"),
                            None => utt,
                        });
                    }
                    Some("assistant") => {
                        for (k, v) in data.get("slots").and_then(Value::as_object).into_iter().flatten() {
                            if !is_informable(&domain, k) {
                                continue;
                            }
                            if let Some(v) = scalar(v).and_then(|v| normalize_value(&v)) {
                                inv.add(&domain, k, &v);
                                state.insert(k.clone(), v);
                            }
                        }
                        turns.push(TurnRecord {
                            user: pending_user.take().unwrap_or_default(),
                            response: utt,
                            belief: Some(belief_map(&domain, &state)),
                            entity_id: None,
                            domain: Some(domain.clone()),
                        });
                    }
                    _ => {}
                }
            }
            if turns.is_empty() {
                continue;
            }
            recs.push(DialogRecord {
                id,
                domains: vec![domain],
                turns,
                goal: None,
            });
        }
        splits.push((split, recs));
    }
    let schema = Schema::new(
        domains
            .iter()
            .map(|(n, inf, req)| domain_schema(n, inf, req, &inv))
            .collect(),
    )?;
    let tables = tables
        .into_iter()
        .map(|(d, rows)| {
            let ents = rows
                .into_iter()
                .enumerate()
                .map(|(i, fields)| Entity {
                    id: format!("{d}-{i:05}"),
                    domain: d.clone(),
                    fields,
                })
                .collect();
            (d, ents)
        })
        .collect();
    let db = EntityDb::new(tables, &schema)?;
    finish(schema, db, splits)
}

// ---------------------------------------------------------------- MultiWOZ

const MULTIWOZ: &str = "multiwoz21";

type DomainSpec = (&'static str, &'static [&'static str], &'static [&'static str]);

const MULTIWOZ_DOMAINS: [DomainSpec; 7] = [
    ("attraction", &["area", "name", "type"], &["name", "address", "phone", "postcode", "fee"]),
    (
        "hotel",
        &["area", "internet", "name", "parking", "pricerange", "stars", "type", "day", "people", "stay"],
        &["name", "address", "phone", "postcode", "reference"],
    ),
    (
        "restaurant",
        &["area", "food", "name", "pricerange", "day", "people", "time"],
        &["name", "address", "phone", "postcode", "reference"],
    ),
    (
        "train",
        &["arriveby", "day", "departure", "destination", "leaveat", "people"],
        &["trainid", "price", "duration", "reference"],
    ),
    ("taxi", &["arriveby", "departure", "destination", "leaveat"], &["car", "phone"]),
    ("hospital", &["department"], &["address", "phone", "postcode"]),
    ("police", &["name"], &["address", "phone", "postcode"]),
];

fn multiwoz_slot(s: &str) -> String {
    match s.to_lowercase().as_str() {
        "price range" | "price_range" => "pricerange".into(),
        "entrance fee" => "fee".into(),
        "car type" => "car".into(),
        "arrive by" => "arriveby".into(),
        "leave at" => "leaveat".into(),
        "ref" => "reference".into(),
        "addr" => "address".into(),
        "post" => "postcode".into(),
        other => other.replace(' ', ""),
    }
}

/// MultiWOZ 2.1 `data.json` (dialog id → `{goal, log}`), the per-domain
/// `<domain>_db.json` tables, and the official dev/test id lists. Beliefs come
/// from the `semi` and `book` metadata of each system turn; the turn domain is the
/// domain whose constraints changed, else the previous turn's. Turns carry no
/// entity id; responses are delexicalized against database value inventories.
pub fn multiwoz21(data: &Path, db_dir: &Path, dev_list: &Path, test_list: &Path) -> Result<Prepared> {
    let mut dbs = BTreeMap::new();
    for (d, _, _) in MULTIWOZ_DOMAINS {
        let p = db_dir.join(format!("{d}_db.json"));
        if p.exists() {
            dbs.insert(d.to_string(), read_json(MULTIWOZ, &p)?);
        }
    }
    let list = |p: &Path| -> Result<BTreeSet<String>> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    };
    multiwoz21_from_values(read_json(MULTIWOZ, data)?, dbs, &list(dev_list)?, &list(test_list)?)
}

pub fn multiwoz21_from_values(
    data: Value,
    dbs: BTreeMap<String, Value>,
    dev_ids: &BTreeSet<String>,
    test_ids: &BTreeSet<String>,
) -> Result<Prepared> {
    let spec = |d: &str| MULTIWOZ_DOMAINS.iter().find(|(n, _, _)| *n == d);
    let mut inv = Inventory::default();
    let mut tables = BTreeMap::new();
    for (domain, rows) in &dbs {
        let Some((_, inf, req)) = spec(domain) else {
            return Err(Error::UnknownDomain(domain.clone()));
        };
        let mut ents = Vec::new();
        for (i, row) in rows.as_array().into_iter().flatten().enumerate() {
            let mut fields = BTreeMap::new();
            for (k, v) in row.as_object().into_iter().flatten() {
                let slot = multiwoz_slot(k);
                if !inf.contains(&slot.as_str()) && !req.contains(&slot.as_str()) {
                    continue;
                }
                if let Some(v) = scalar(v).and_then(|v| normalize_value(&v)) {
                    inv.add(domain, &slot, &v);
                    fields.insert(slot, v);
                }
            }
            ents.push(Entity {
                id: format!("{domain}-{i:05}"),
                domain: domain.clone(),
                fields,
            });
        }
        tables.insert(domain.clone(), ents);
    }
    let dialogs = data
        .as_object()
        .ok_or_else(|| adapter_err(MULTIWOZ, "data file must map dialog ids to dialogs"))?;
    let mut splits: BTreeMap<&str, Vec<DialogRecord>> = BTreeMap::new();
    for (id, d) in dialogs {
        let log = d
            .get("log")
            .and_then(Value::as_array)
            .ok_or_else(|| adapter_err(MULTIWOZ, format!("dialog {id}: missing `log`")))?;
        let mut goal = Goal::new();
        for (dom, g) in field(d, "goal").as_object().into_iter().flatten() {
            let Some((_, inf, req)) = spec(dom) else { continue };
            if g.as_object().is_none_or(|o| o.is_empty()) {
                continue;
            }
            let mut dg = DomainGoal::default();
            for part in ["info", "book"] {
                for (k, v) in field(g, part).as_object().into_iter().flatten() {
                    let slot = multiwoz_slot(k);
                    if inf.contains(&slot.as_str()) {
                        if let Some(v) = scalar(v).and_then(|v| normalize_value(&v)) {
                            dg.inform.insert(slot, v);
                        }
                    }
                }
            }
            for r in field(g, "reqt").as_array().into_iter().flatten() {
                if let Some(r) = scalar(r).map(|r| multiwoz_slot(&r)) {
                    if req.contains(&r.as_str()) && !dg.request.contains(&r) {
                        dg.request.push(r);
                    }
                }
            }
            goal.insert(dom.clone(), dg);
        }
        let mut turns = Vec::new();
        let mut prev: BTreeMap<String, String> = BTreeMap::new();
        let mut turn_domain: Option<String> = None;
        for pair in log.chunks(2) {
            let user = pair[0].get("text").and_then(scalar).unwrap_or_default();
            let Some(sys) = pair.get(1) else { break };
            let response = sys.get("text").and_then(scalar).unwrap_or_default();
            let mut belief = BTreeMap::new();
            for (dom, meta) in field(sys, "metadata").as_object().into_iter().flatten() {
                let Some((_, inf, _)) = spec(dom) else { continue };
                for part in ["semi", "book"] {
                    for (k, v) in field(meta, part).as_object().into_iter().flatten() {
                        let slot = multiwoz_slot(k);
                        if !inf.contains(&slot.as_str()) {
                            continue;
                        }
                        if let Some(v) = scalar(v).and_then(|v| normalize_value(&v)) {
                            inv.add(dom, &slot, &v);
                            belief.insert(format!("{dom}.{slot}"), v);
                        }
                    }
                }
            }
            let changed = belief
                .iter()
                .filter(|(k, v)| prev.get(*k) != Some(*v))
                .filter_map(|(k, _)| k.split('.').next())
                .next()
                .map(String::from);
            if changed.is_some() {
                turn_domain = changed;
            }
            prev = belief.clone();
            turns.push(TurnRecord {
                user,
                response,
                belief: Some(belief),
                entity_id: None,
                domain: turn_domain.clone(),
            });
        }
        if turns.is_empty() {
            continue;
        }
        let key = id.trim_end_matches(".json");
        let split = if dev_ids.contains(id) || dev_ids.contains(key) {
            "dev"
        } else if test_ids.contains(id) || test_ids.contains(key) {
            "test"
        } else {
            "train"
        };
        let mut domains: Vec<String> = goal.keys().cloned().collect();
        for t in &turns {
            if let Some(d) = &t.domain {
                if !domains.contains(d) {
                    domains.push(d.clone());
                }
            }
        }
        splits.entry(split).or_default().push(DialogRecord {
            id: id.clone(),
            domains,
            turns,
            goal: Some(goal),
        });
    }
    let schema = Schema::new(
        MULTIWOZ_DOMAINS
            .iter()
            .map(|(n, inf, req)| domain_schema(n, inf, req, &inv))
            .collect(),
    )?;
    let db = EntityDb::new(tables, &schema)?;
    let order = ["train", "dev", "test"];
    let splits = order
        .iter()
        .map(|s| (s.to_string(), splits.remove(s).unwrap_or_default()))
        .collect();
    finish(schema, db, splits)
}
