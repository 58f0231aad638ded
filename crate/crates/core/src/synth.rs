//! Synthetic dialogs with exactly known belief states, a template-inversion
//! oracle, and brute-force marginalization over the belief space of small models.
//!
//! Every informable value has a canonical token and an alias token. Users mention
//! values by either form; system responses confirm the canonical form and then
//! report the database bucket. Belief labels therefore have to be learned from
//! alias/canonical co-occurrence, which unlabeled responses also reveal.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{placeholder, placeholder_slot, tokenize, BeliefState, Dialog, DialogCorpus, DomainSchema, Schema, Turn, DONTCARE};
use crate::error::{Error, Result};
use crate::kb::{match_vector, EntityDb};
use crate::model::{BeliefMode, Labes, ModelConfig, Network, ResponseMode};
use crate::training::TrainConfig;

const DOMAIN: &str = "shop";
const SLOT_NAMES: [&str; 6] = ["color", "size", "brand", "style", "fit", "tone"];
const CANON: [char; 6] = ['k', 'm', 'b', 's', 'f', 't'];
const ALIAS: [char; 6] = ['q', 'z', 'x', 'w', 'j', 'y'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub slots: usize,
    pub values_per_slot: usize,
    pub dialogs: usize,
    pub turns: usize,
    pub db_size: usize,
    /// Exponent of the Zipf-like value distribution; 0 is uniform.
    pub zipf: f64,
    /// Values `0..alias_values` of every slot also have an alias token.
    pub alias_values: usize,
    /// Probability a mention of an aliased value uses the alias token.
    pub alias_rate: f64,
    pub dontcare_rate: f64,
    /// Probability a later turn revises an already filled slot.
    pub change_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            slots: 2,
            values_per_slot: 20,
            dialogs: 500,
            turns: 3,
            db_size: 60,
            zipf: 0.0,
            alias_values: 4,
            alias_rate: 0.8,
            dontcare_rate: 0.05,
            change_rate: 0.6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.slots > SLOT_NAMES.len() {
            return Err(Error::Config(format!("slots must be in 1..={}", SLOT_NAMES.len())));
        }
        if self.values_per_slot == 0 || self.values_per_slot > 100 {
            return Err(Error::Config("values_per_slot must be in 1..=100".into()));
        }
        if self.alias_values > self.values_per_slot {
            return Err(Error::Config("alias_values exceeds values_per_slot".into()));
        }
        if self.dialogs == 0 || self.turns == 0 || self.db_size == 0 {
            return Err(Error::Config("dialogs, turns and db_size must be > 0".into()));
        }
        for (k, p) in [
            ("alias_rate", self.alias_rate),
            ("dontcare_rate", self.dontcare_rate),
            ("change_rate", self.change_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{k} {p} not in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn canonical(&self, slot: usize, value: usize) -> String {
        format!("{}{value:02}", CANON[slot])
    }

    pub fn alias(&self, slot: usize, value: usize) -> String {
        format!("{}{value:02}", ALIAS[slot])
    }

    pub fn schema(&self) -> Schema {
        let mut values = BTreeMap::new();
        for s in 0..self.slots {
            values.insert(
                SLOT_NAMES[s].to_string(),
                (0..self.values_per_slot).map(|v| self.canonical(s, v)).collect(),
            );
        }
        Schema::new(vec![DomainSchema {
            name: DOMAIN.into(),
            informable: SLOT_NAMES[..self.slots].iter().map(|s| s.to_string()).collect(),
            requestable: vec!["name".into(), "price".into()],
            values,
        }])
        .expect("synthetic schema is valid")
    }

    /// (slot, value) for a mention token.
    fn lookup(&self, tok: &str) -> Option<(usize, usize)> {
        let mut cs = tok.chars();
        let head = cs.next()?;
        let rest: String = cs.collect();
        if rest.len() != 2 {
            return None;
        }
        let v: usize = rest.parse().ok()?;
        if let Some(s) = CANON[..self.slots].iter().position(|&c| c == head) {
            return (v < self.values_per_slot).then_some((s, v));
        }
        let s = ALIAS[..self.slots].iter().position(|&c| c == head)?;
        (v < self.values_per_slot.min(self.alias_values)).then_some((s, v))
    }
}

/// A generated corpus with its schema and database.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub schema: Schema,
    pub db: EntityDb,
    pub corpus: DialogCorpus,
}

impl SynthData {
    /// Positional train/dev/test split with the given dev and test fractions.
    /// The desk-scale experiments use `split(0.1, 0.1)`.
    pub fn split(&self, dev: f64, test: f64) -> (DialogCorpus, DialogCorpus, DialogCorpus) {
        let n = self.corpus.len();
        let n_dev = (n as f64 * dev).round() as usize;
        let n_test = (n as f64 * test).round() as usize;
        let n_train = n.saturating_sub(n_dev + n_test);
        let d = &self.corpus.dialogs;
        (
            DialogCorpus::new(d[..n_train].to_vec()),
            DialogCorpus::new(d[n_train..n_train + n_dev].to_vec()),
            DialogCorpus::new(d[n_train + n_dev..].to_vec()),
        )
    }
}

#[derive(Clone, Copy)]
enum Mention {
    Value(usize, usize),
    DontCare(usize),
}

impl Mention {
    fn slot(self) -> usize {
        match self {
            Mention::Value(s, _) | Mention::DontCare(s) => s,
        }
    }
}

fn mention_tokens(spec: &SynthSpec, m: Mention, rng: &mut ChaCha8Rng) -> Vec<String> {
    match m {
        Mention::Value(s, v) => {
            if v < spec.alias_values && rng.gen_bool(spec.alias_rate) {
                vec![spec.alias(s, v)]
            } else {
                vec![spec.canonical(s, v)]
            }
        }
        Mention::DontCare(s) => vec!["any".into(), SLOT_NAMES[s].into(), "is".into(), "fine".into()],
    }
}

fn user_utterance(spec: &SynthSpec, ms: &[Mention], request: bool, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let words = |s: &str| tokenize(s);
    match ms {
        [] if request => out.extend(words("what is the price ?")),
        [] => out.extend(words(["thanks", "that is all", "ok thanks"].choose(rng).unwrap())),
        [m] => {
            let t = mention_tokens(spec, *m, rng);
            match (m, rng.gen_range(0..4)) {
                (Mention::DontCare(_), _) => out.extend(t),
                (_, 0) => {
                    out.extend(words("i want"));
                    out.extend(t);
                }
                (Mention::Value(s, _), 1) => {
                    out.extend(t);
                    out.push(SLOT_NAMES[*s].into());
                    out.push("please".into());
                }
                (_, 2) => {
                    out.extend(words("do you have"));
                    out.extend(t);
                    out.push("?".into());
                }
                _ => {
                    out.extend(words("make it"));
                    out.extend(t);
                }
            }
        }
        [a, b, ..] => {
            let (ta, tb) = (mention_tokens(spec, *a, rng), mention_tokens(spec, *b, rng));
            match rng.gen_range(0..3) {
                0 => {
                    out.extend(words("i want"));
                    out.extend(ta);
                    out.push("and".into());
                    out.extend(tb);
                }
                1 => {
                    out.extend(words("looking for"));
                    out.extend(ta);
                    out.push("with".into());
                    out.extend(tb);
                }
                _ => {
                    out.extend(ta);
                    out.push(",".into());
                    out.extend(tb);
                    out.push("please".into());
                }
            }
        }
    }
    if request && !ms.is_empty() {
        out.extend(words(", and the price ?"));
    }
    out
}

fn system_response(spec: &SynthSpec, ms: &[Mention], count: usize, request: bool) -> Vec<String> {
    let mut out = Vec::new();
    for m in ms {
        match *m {
            Mention::Value(s, v) => {
                out.extend(["ok", ","].map(String::from));
                out.push(spec.canonical(s, v));
                out.push(SLOT_NAMES[s].into());
            }
            Mention::DontCare(s) => {
                out.extend(["ok", ",", "any"].map(String::from));
                out.push(SLOT_NAMES[s].into());
            }
        }
        out.push(".".into());
    }
    let name = placeholder("name");
    let sentence = match match_vector(count).bucket() {
        0 => "sorry , nothing matches .".to_string(),
        1 => format!("{name} is the only match ."),
        2 => format!("there are two , like {name} ."),
        3 => format!("there are three , like {name} ."),
        _ => format!("{name} is one of many ."),
    };
    out.extend(tokenize(&sentence));
    if request && count > 0 {
        out.extend(tokenize(&format!("it costs {} .", placeholder("price"))));
    }
    out
}

/// Generate a corpus; identical specs give identical output.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let schema = spec.schema();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights: Vec<f64> = (0..spec.values_per_slot).map(|j| 1.0 / ((j + 1) as f64).powf(spec.zipf)).collect();
    let zipf = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("value weights: {e}")))?;

    let mut rows = Vec::with_capacity(spec.db_size);
    for k in 0..spec.db_size {
        let mut row = serde_json::Map::new();
        row.insert("id".into(), format!("e{k:03}").into());
        row.insert("name".into(), format!("shop{k}").into());
        row.insert("price".into(), format!("{} dollars", 5 + rng.gen_range(0..20) * 5).into());
        for s in 0..spec.slots {
            row.insert(SLOT_NAMES[s].into(), spec.canonical(s, zipf.sample(&mut rng)).into());
        }
        rows.push(serde_json::Value::Object(row));
    }
    let db = EntityDb::from_json(&serde_json::json!({ DOMAIN: rows }).to_string(), &schema)?;

    let mut dialogs = Vec::with_capacity(spec.dialogs);
    for di in 0..spec.dialogs {
        let mut belief = BeliefState::empty(&schema);
        let mut pending: Vec<usize> = (0..spec.slots).collect();
        pending.shuffle(&mut rng);
        let mut turns = Vec::with_capacity(spec.turns);
        let mut requested = false;
        for ti in 0..spec.turns {
            let mut ms = Vec::new();
            let last = ti + 1 == spec.turns;
            let take = if pending.is_empty() {
                0
            } else if ti == 0 || last {
                rng.gen_range(1..=pending.len().min(2))
            } else {
                rng.gen_range(0..=pending.len().min(2))
            };
            let pick = |s: usize, rng: &mut ChaCha8Rng| {
                if rng.gen_bool(spec.dontcare_rate) {
                    Mention::DontCare(s)
                } else {
                    Mention::Value(s, zipf.sample(rng))
                }
            };
            for _ in 0..take {
                let s = pending.pop().expect("take <= pending");
                ms.push(pick(s, &mut rng));
            }
            if ms.len() < 2 && ti > 0 && rng.gen_bool(spec.change_rate) {
                // change of mind on a slot not mentioned this turn
                let free: Vec<usize> = (0..spec.slots)
                    .filter(|s| !pending.contains(s) && !ms.iter().any(|m| m.slot() == *s))
                    .collect();
                if let Some(&s) = free.choose(&mut rng) {
                    ms.push(pick(s, &mut rng));
                }
            }
            let request = !requested && ms.len() < 2 && ti > 0 && rng.gen_bool(0.5);
            requested |= request;
            for m in &ms {
                match *m {
                    Mention::Value(s, v) => belief.set(s, vec![spec.canonical(s, v)]),
                    Mention::DontCare(s) => belief.set(s, vec![DONTCARE.into()]),
                }
            }
            let user = user_utterance(spec, &ms, request, &mut rng);
            let matches = db.query(&schema, &belief, DOMAIN);
            let count = matches.len();
            let entity = matches.first().copied().cloned();
            let delex = system_response(spec, &ms, count, request);
            let mut raw = Vec::with_capacity(delex.len());
            let mut span_map = Vec::new();
            for tok in &delex {
                match (placeholder_slot(tok), &entity) {
                    (Some(slot), Some(e)) => {
                        let span = tokenize(&e.fields[slot]);
                        raw.extend(span.iter().cloned());
                        span_map.push((tok.clone(), span));
                    }
                    _ => raw.push(tok.clone()),
                }
            }
            turns.push(Turn {
                user,
                response_delex: delex,
                response_raw: raw,
                gold_belief: Some(belief.clone()),
                span_map,
                entity_id: entity.map(|e| e.id),
                domain: Some(DOMAIN.into()),
            });
        }
        dialogs.push(Dialog {
            id: format!("synth-{di:04}"),
            domains: vec![DOMAIN.into()],
            turns,
            goal: None,
        });
    }
    Ok(SynthData {
        spec: spec.clone(),
        schema,
        db,
        corpus: DialogCorpus::new(dialogs),
    })
}

/// Recover the belief after `user` from the previous belief by inverting the
/// user templates.
pub fn invert_templates(spec: &SynthSpec, schema: &Schema, prev: &BeliefState, user: &[String]) -> BeliefState {
    let mut b = prev.clone();
    let mut i = 0;
    while i < user.len() {
        if user[i] == "any" && i + 3 < user.len() && user[i + 2] == "is" && user[i + 3] == "fine" {
            if let Some(s) = schema.slot_index(DOMAIN, &user[i + 1]) {
                b.set(s, vec![DONTCARE.into()]);
                i += 4;
                continue;
            }
        }
        if let Some((s, v)) = spec.lookup(&user[i]) {
            b.set(s, vec![spec.canonical(s, v)]);
        }
        i += 1;
    }
    b
}

/// Every terminated per-slot token path of the model's belief space, in a fixed
/// order. Fails when the space exceeds `bound` sequences.
pub fn enumerate_beliefs(model: &Labes, bound: usize) -> Result<Vec<Vec<Vec<u32>>>> {
    let cap = model.config.max_value_len;
    let mut per_slot = Vec::with_capacity(model.num_slots());
    let mut total: usize = 1;
    for s in 0..model.num_slots() {
        let eov = model.eov_id(s);
        let toks: Vec<u32> = model.belief_support(s).into_iter().filter(|&t| t != eov).collect();
        let mut count: usize = 0;
        let mut layer: usize = 1;
        for _ in 0..=cap {
            count = count.saturating_add(layer);
            layer = layer.saturating_mul(toks.len());
        }
        total = total.saturating_mul(count);
        if total > bound {
            return Err(Error::EnumerationBound { needed: total as u128, limit: bound as u128 });
        }
        let mut paths: Vec<Vec<u32>> = vec![vec![]];
        let mut frontier: Vec<Vec<u32>> = vec![vec![]];
        for _ in 0..cap {
            let mut next = Vec::new();
            for p in &frontier {
                for &t in &toks {
                    let mut q = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            paths.extend(next.iter().cloned());
            frontier = next;
        }
        per_slot.push(
            paths
                .into_iter()
                .map(|mut p| {
                    p.push(eov);
                    p
                })
                .collect::<Vec<_>>(),
        );
    }
    let mut out: Vec<Vec<Vec<u32>>> = vec![vec![]];
    for slot_paths in per_slot {
        let mut next = Vec::with_capacity(out.len() * slot_paths.len());
        for prefix in &out {
            for p in &slot_paths {
                let mut q = prefix.clone();
                q.push(p.clone());
                next.push(q);
            }
        }
        out = next;
    }
    Ok(out)
}

/// One belief's contribution at a turn.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTerm {
    pub path: Vec<Vec<u32>>,
    pub log_prior: f64,
    pub log_likelihood: f64,
}

/// log p(b|b_prev, c_t) and log p(r_t|c_t, b, d_b) for every enumerated belief b,
/// with the context built from the gold previous response.
pub fn turn_terms(
    model: &Labes,
    dialog: &Dialog,
    db: &EntityDb,
    turn: usize,
    prev: &BeliefState,
    paths: &[Vec<Vec<u32>>],
) -> Result<Vec<JointTerm>> {
    let t = dialog.turns.get(turn).ok_or(Error::EmptySequence)?;
    let prev_resp: &[String] = if turn == 0 { &[] } else { &dialog.turns[turn - 1].response_delex };
    let ctx = model.context(prev_resp, &t.user);
    let resp = model.response_ids(&t.response_delex);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let s = model.decode_belief(Network::Prior, prev, &ctx, None, BeliefMode::Force(p), &mut rng)?;
        let (d, _) = model.db_lookup(db, &dialog.domains, t.domain.as_deref(), prev, &s.belief);
        let r = model.decode_response(&ctx, &s.belief, d, ResponseMode::Force(&resp))?;
        out.push(JointTerm {
            path: p.clone(),
            log_prior: s.log_prob,
            log_likelihood: r.log_prob,
        });
    }
    Ok(out)
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact per-turn log p(r_t | u_{1:t}, r_{1:t-1}), marginalizing the belief chain
/// by forward recursion over the enumerated belief space.
pub fn exact_marginal(model: &Labes, dialog: &Dialog, db: &EntityDb, bound: usize) -> Result<Vec<f64>> {
    if dialog.turns.is_empty() {
        return Err(Error::EmptySequence);
    }
    let paths = enumerate_beliefs(model, bound)?;
    exact_marginal_over(model, dialog, db, &paths)
}

/// [`exact_marginal`] over an explicit belief list, which must cover the
/// support of the prior.
pub fn exact_marginal_over(model: &Labes, dialog: &Dialog, db: &EntityDb, paths: &[Vec<Vec<u32>>]) -> Result<Vec<f64>> {
    if dialog.turns.is_empty() {
        return Err(Error::EmptySequence);
    }
    let beliefs: Vec<BeliefState> = paths.iter().map(|p| model.path_belief(p)).collect();
    // alpha over previous beliefs, starting from the empty state
    let mut alpha: Vec<(BeliefState, f64)> = vec![(BeliefState::empty(&model.schema), 0.0)];
    let mut out = Vec::with_capacity(dialog.turns.len());
    let mut prev_total = 0.0;
    for ti in 0..dialog.turns.len() {
        let mut next = vec![f64::NEG_INFINITY; paths.len()];
        for (prev, la) in &alpha {
            let terms = turn_terms(model, dialog, db, ti, prev, paths)?;
            for (k, t) in terms.iter().enumerate() {
                next[k] = log_sum_exp([next[k], la + t.log_prior + t.log_likelihood]);
            }
        }
        let total = log_sum_exp(next.iter().copied());
        out.push(total - prev_total);
        prev_total = total;
        alpha = beliefs.iter().cloned().zip(next).filter(|(_, l)| *l > f64::NEG_INFINITY).collect();
    }
    Ok(out)
}

/// Model settings used for the synthetic desk-scale experiments.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        hidden_size: 16,
        embedding_size: 16,
        attention_size: 16,
        dropout_rate: 0.35,
        max_value_len: 2,
        max_response_len: 24,
        init_scale: 0.1,
        ..ModelConfig::default()
    }
}

/// Training settings used for the synthetic desk-scale experiments.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 8,
        max_epochs: 60,
        seed,
        ..TrainConfig::default()
    }
}

#[cfg(test)]
pub(crate) mod tests;
