//! Benchmark metrics over end-to-end decodes: joint goal accuracy, corpus BLEU,
//! Match/SuccF1, Inform/Success and the combined score.
//!
//! Conventions fixed here:
//! - Values are compared after lowercasing and dropping punctuation tokens and
//!   the articles `a`, `an`, `the`.
//! - Match: per dialog, the first entity (by id) satisfying the final predicted
//!   belief in the dialog's first domain must also satisfy the goal constraints;
//!   an empty goal matches only an empty prediction.
//! - SuccF1: corpus F1 between requestable placeholders (other than `name`)
//!   emitted in a dialog and the goal's requested slots.
//! - Inform: every goal domain with constraints has an offer turn (a response in
//!   that domain carrying a placeholder) whose entity, taken from the predicted
//!   belief at the last offer, satisfies the goal. Domains without a database
//!   table count as informed. Success additionally needs every requested slot
//!   emitted as a placeholder in that domain's responses.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{placeholder_slot, BeliefState, Dialog, DialogCorpus, Goal, Schema};
use crate::error::{Error, Result};
use crate::kb::EntityDb;
use crate::model::{DecodeRecord, Labes};

/// Decoded turn as seen by the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutput {
    pub belief: BeliefState,
    /// Delexicalized response tokens.
    pub response: Vec<String>,
    pub domain: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogOutput {
    pub dialog_id: String,
    pub turns: Vec<TurnOutput>,
}

fn is_punct(t: &str) -> bool {
    !t.is_empty() && t.chars().all(|c| c.is_ascii_punctuation())
}

/// Canonical comparison form of a value.
pub fn normalize_tokens(v: &[String]) -> String {
    v.iter()
        .map(|t| t.to_lowercase())
        .filter(|t| !is_punct(t) && !matches!(t.as_str(), "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn beliefs_match(a: &BeliefState, b: &BeliefState) -> bool {
    a.len() == b.len() && (0..a.len()).all(|i| normalize_tokens(a.get(i)) == normalize_tokens(b.get(i)))
}

pub fn joint_goal_accuracy(pred: &[BeliefState], gold: &[BeliefState]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(gold.len(), pred.len()));
    }
    if gold.is_empty() {
        return Err(Error::EmptySequence);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| beliefs_match(p, g)).count();
    Ok(hits as f64 / gold.len() as f64)
}

fn ngrams(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus 4-gram BLEU with brevity penalty, no smoothing, as a percentage.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(references.len(), candidates.len()));
    }
    if candidates.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, k) in ngrams(c, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

pub fn combined(inform: f64, success: f64, bleu: f64) -> f64 {
    (inform + success) * 0.5 + bleu
}

fn goal_belief(schema: &Schema, goal: &Goal, domain: &str) -> BeliefState {
    let mut b = BeliefState::empty(schema);
    if let Some(g) = goal.get(domain) {
        for (slot, value) in &g.inform {
            if let Some(i) = schema.slot_index(domain, slot) {
                b.set(i, crate::corpus::tokenize(value));
            }
        }
    }
    b
}

fn domain_constraints(schema: &Schema, b: &BeliefState, domain: &str) -> Vec<String> {
    schema
        .domain_slots(domain)
        .map(|i| normalize_tokens(b.get(i)))
        .collect()
}

fn check_aligned(outputs: &[DialogOutput], gold: &[Dialog]) -> Result<()> {
    if outputs.len() != gold.len() {
        return Err(Error::LengthMismatch(gold.len(), outputs.len()));
    }
    for (o, g) in outputs.iter().zip(gold) {
        if o.dialog_id != g.id || o.turns.len() != g.turns.len() {
            return Err(Error::MalformedRecord {
                dialog: g.id.clone(),
                field: "outputs".into(),
                reason: "not aligned with the gold dialog".into(),
            });
        }
    }
    Ok(())
}

fn dialog_matched(out: &DialogOutput, gold: &Dialog, schema: &Schema, db: &EntityDb) -> Option<bool> {
    let domain = gold.domains.first()?;
    let goal = gold.goal_or_derived(schema);
    let g = goal_belief(schema, &goal, domain);
    let p = &out.turns.last()?.belief;
    let g_empty = domain_constraints(schema, &g, domain).iter().all(|v| v.is_empty());
    let p_empty = domain_constraints(schema, p, domain).iter().all(|v| v.is_empty());
    if g_empty {
        return Some(p_empty);
    }
    let gold_set: BTreeSet<&str> = db.query(schema, &g, domain).iter().map(|e| e.id.as_str()).collect();
    if gold_set.is_empty() {
        return Some(domain_constraints(schema, p, domain) == domain_constraints(schema, &g, domain));
    }
    Some(
        db.query(schema, p, domain)
            .first()
            .map(|e| gold_set.contains(e.id.as_str()))
            .unwrap_or(false),
    )
}

pub fn match_rate(outputs: &[DialogOutput], gold: &[Dialog], schema: &Schema, db: &EntityDb) -> Result<f64> {
    check_aligned(outputs, gold)?;
    let scored: Vec<bool> = outputs
        .iter()
        .zip(gold)
        .filter_map(|(o, g)| dialog_matched(o, g, schema, db))
        .collect();
    if scored.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(scored.iter().filter(|&&m| m).count() as f64 / scored.len() as f64)
}

fn emitted_requests(out: &DialogOutput, gold: &Dialog, schema: &Schema) -> BTreeSet<String> {
    out.turns
        .iter()
        .flat_map(|t| &t.response)
        .filter_map(|tok| placeholder_slot(tok))
        .filter(|s| *s != "name" && gold.domains.iter().any(|d| schema.is_requestable(d, s)))
        .map(String::from)
        .collect()
}

fn goal_requests(goal: &Goal) -> BTreeSet<String> {
    goal.values().flat_map(|g| g.request.iter().cloned()).collect()
}

fn f1_counts(out: &DialogOutput, gold: &Dialog, schema: &Schema) -> (usize, usize, usize) {
    let pred = emitted_requests(out, gold, schema);
    let want = goal_requests(&gold.goal_or_derived(schema));
    let tp = pred.intersection(&want).count();
    (tp, pred.len() - tp, want.len() - tp)
}

pub fn succ_f1(outputs: &[DialogOutput], gold: &[Dialog], schema: &Schema) -> Result<f64> {
    check_aligned(outputs, gold)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (o, g) in outputs.iter().zip(gold) {
        let (a, b, c) = f1_counts(o, g, schema);
        tp += a;
        fp += b;
        fn_ += c;
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

fn dialog_inform_success(out: &DialogOutput, gold: &Dialog, schema: &Schema, db: &EntityDb) -> (bool, bool) {
    let goal = gold.goal_or_derived(schema);
    let mut informed = true;
    let mut succeeded = true;
    for (domain, dg) in &goal {
        let in_domain: Vec<&TurnOutput> = out
            .turns
            .iter()
            .filter(|t| t.domain.as_deref() == Some(domain.as_str()))
            .collect();
        if !dg.inform.is_empty() && !db.table(domain).is_empty() {
            let offer = in_domain
                .iter()
                .rev()
                .find(|t| t.response.iter().any(|w| placeholder_slot(w).is_some()));
            let g = goal_belief(schema, &goal, domain);
            let ok = offer
                .and_then(|t| db.query(schema, &t.belief, domain).first().map(|e| e.id.clone()))
                .map(|id| db.query(schema, &g, domain).iter().any(|e| e.id == id))
                .unwrap_or(false);
            informed &= ok;
        }
        let said: BTreeSet<&str> = in_domain
            .iter()
            .flat_map(|t| &t.response)
            .filter_map(|w| placeholder_slot(w))
            .collect();
        succeeded &= dg.request.iter().all(|r| said.contains(r.as_str()));
    }
    (informed, informed && succeeded)
}

/// (Inform %, Success %).
pub fn inform_success(outputs: &[DialogOutput], gold: &[Dialog], schema: &Schema, db: &EntityDb) -> Result<(f64, f64)> {
    check_aligned(outputs, gold)?;
    if gold.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (mut inf, mut suc) = (0usize, 0usize);
    for (o, g) in outputs.iter().zip(gold) {
        let (i, s) = dialog_inform_success(o, g, schema, db);
        inf += i as usize;
        suc += s as usize;
    }
    let n = gold.len() as f64;
    Ok((100.0 * inf as f64 / n, 100.0 * suc as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogMetrics {
    pub dialog_id: String,
    pub turns: usize,
    /// Over labeled turns; absent when none are labeled.
    pub joint_goal: Option<f64>,
    pub matched: Option<bool>,
    pub informed: bool,
    pub succeeded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dialogs: usize,
    pub turns: usize,
    pub labeled_turns: usize,
    pub joint_goal: f64,
    pub bleu: f64,
    #[serde(rename = "match")]
    pub match_rate: f64,
    pub succ_f1: f64,
    pub inform: f64,
    pub success: f64,
    pub combined: f64,
    pub per_dialog: Vec<DialogMetrics>,
}

impl MetricsReport {
    pub fn from_outputs(outputs: &[DialogOutput], gold: &[Dialog], schema: &Schema, db: &EntityDb) -> Result<MetricsReport> {
        check_aligned(outputs, gold)?;
        if gold.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (mut pred_b, mut gold_b) = (Vec::new(), Vec::new());
        let (mut cands, mut refs) = (Vec::new(), Vec::new());
        let mut per_dialog = Vec::with_capacity(gold.len());
        for (o, g) in outputs.iter().zip(gold) {
            let mut hits = 0;
            let mut labeled = 0;
            for (t, gt) in o.turns.iter().zip(&g.turns) {
                if let Some(b) = &gt.gold_belief {
                    labeled += 1;
                    hits += beliefs_match(&t.belief, b) as usize;
                    pred_b.push(t.belief.clone());
                    gold_b.push(b.clone());
                }
                cands.push(t.response.clone());
                refs.push(gt.response_delex.clone());
            }
            let (informed, succeeded) = dialog_inform_success(o, g, schema, db);
            per_dialog.push(DialogMetrics {
                dialog_id: g.id.clone(),
                turns: g.turns.len(),
                joint_goal: (labeled > 0).then(|| hits as f64 / labeled as f64),
                matched: dialog_matched(o, g, schema, db),
                informed,
                succeeded,
            });
        }
        let joint_goal = if gold_b.is_empty() {
            0.0
        } else {
            joint_goal_accuracy(&pred_b, &gold_b)?
        };
        let bleu = bleu(&cands, &refs)?;
        let match_rate = match_rate(outputs, gold, schema, db).unwrap_or(0.0);
        let succ_f1 = succ_f1(outputs, gold, schema)?;
        let (inform, success) = inform_success(outputs, gold, schema, db)?;
        Ok(MetricsReport {
            dialogs: gold.len(),
            turns: cands.len(),
            labeled_turns: gold_b.len(),
            joint_goal,
            bleu,
            match_rate,
            succ_f1,
            inform,
            success,
            combined: combined(inform, success, bleu),
            per_dialog,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table; `per_dialog` appends one row per dialog.
    pub fn to_table(&self, per_dialog: bool) -> String {
        let rows = [
            ("dialogs", self.dialogs.to_string()),
            ("turns", self.turns.to_string()),
            ("joint_goal", format!("{:.4}", self.joint_goal)),
            ("bleu", format!("{:.2}", self.bleu)),
            ("match", format!("{:.4}", self.match_rate)),
            ("succ_f1", format!("{:.4}", self.succ_f1)),
            ("inform", format!("{:.2}", self.inform)),
            ("success", format!("{:.2}", self.success)),
            ("combined", format!("{:.2}", self.combined)),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<12}{v:>12}");
        }
        if per_dialog {
            let w = self.per_dialog.iter().map(|d| d.dialog_id.len()).max().unwrap_or(6).max(6);
            let _ = writeln!(s, "\n{:<w$}  {:>5}  {:>10}  {:>7}  {:>8}  {:>7}", "dialog", "turns", "joint_goal", "match", "inform", "success");
            for d in &self.per_dialog {
                let jg = d.joint_goal.map(|j| format!("{j:.4}")).unwrap_or_else(|| "-".into());
                let m = d.matched.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    s,
                    "{:<w$}  {:>5}  {:>10}  {:>7}  {:>8}  {:>7}",
                    d.dialog_id, d.turns, jg, m, d.informed, d.succeeded
                );
            }
        }
        s
    }
}

/// Model outputs and decode records for a corpus.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub outputs: Vec<DialogOutput>,
    pub records: Vec<DecodeRecord>,
}

/// Decode every dialog end to end from the model's own beliefs.
pub fn decode_corpus(model: &Labes, corpus: &DialogCorpus, db: &EntityDb) -> Result<(Vec<DialogOutput>, Vec<DecodeRecord>)> {
    let mut outputs = Vec::with_capacity(corpus.len());
    let mut records = Vec::new();
    for d in &corpus.dialogs {
        let turns = model.unroll_eval(d, db)?;
        records.extend(model.decode_records(d, db, &turns));
        outputs.push(DialogOutput {
            dialog_id: d.id.clone(),
            turns: turns
                .into_iter()
                .map(|t| TurnOutput {
                    response: model.vocab.decode(&t.response),
                    belief: t.belief,
                    domain: t.domain,
                })
                .collect(),
        });
    }
    Ok((outputs, records))
}

pub fn evaluate(model: &Labes, corpus: &DialogCorpus, db: &EntityDb) -> Result<Evaluation> {
    let (outputs, records) = decode_corpus(model, corpus, db)?;
    let report = MetricsReport::from_outputs(&outputs, &corpus.dialogs, &model.schema, db)?;
    Ok(Evaluation {
        report,
        outputs,
        records,
    })
}

/// Joint goal accuracy of end-to-end belief predictions over labeled turns.
pub fn dev_joint_goal(model: &Labes, corpus: &DialogCorpus, db: &EntityDb) -> Result<f64> {
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for d in &corpus.dialogs {
        let turns = model.unroll_eval(d, db)?;
        for (t, gt) in turns.into_iter().zip(&d.turns) {
            if let Some(b) = &gt.gold_belief {
                p.push(t.belief);
                g.push(b.clone());
            }
        }
    }
    joint_goal_accuracy(&p, &g)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

#[cfg(test)]
mod tests;
