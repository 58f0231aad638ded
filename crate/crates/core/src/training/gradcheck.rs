//! Finite-difference verification of the training objectives on a tiny model.

use std::collections::BTreeMap;

use serde::Serialize;

use super::batch_objective;
use crate::corpus::{BeliefState, Dialog, DomainSchema, Schema, Turn, Vocabulary};
use crate::error::Result;
use crate::kb::EntityDb;
use crate::model::{Labes, ModelConfig, Objective};
use crate::neural::{grad_check, GradCheckReport};

/// Tiny one-slot model (12-token vocabulary), database and dialogs.
pub fn tiny_fixture(hidden_size: usize, seed: u64) -> Result<(Labes, EntityDb, Vec<Dialog>)> {
    let mut values = BTreeMap::new();
    values.insert("color".to_string(), vec!["red".to_string(), "blue".to_string()]);
    let schema = Schema::new(vec![DomainSchema {
        name: "shop".into(),
        informable: vec!["color".into()],
        requestable: vec!["color".into()],
        values,
    }])?;
    let mut tokens = Vocabulary::specials(&schema);
    let n = tokens.len();
    tokens.extend(["red", "blue"].map(String::from));
    let vocab = Vocabulary::from_tokens(tokens, n)?;
    let cfg = ModelConfig {
        hidden_size,
        embedding_size: hidden_size,
        attention_size: hidden_size,
        dropout_rate: 0.0,
        kl_weight: 1.0,
        max_value_len: 2,
        max_response_len: 8,
        init_scale: 0.3,
        ..ModelConfig::default()
    };
    let db = EntityDb::from_json(
        r#"{"shop": [{"id": "e0", "color": "red"}, {"id": "e1", "color": "blue"}]}"#,
        &schema,
    )?;
    let model = Labes::new(cfg, schema, vocab, seed)?;
    let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let mk = |id: &str, turns: &[(&str, &str, &str)]| -> Result<Dialog> {
        let turns = turns
            .iter()
            .map(|(u, r, v)| {
                let mut t = Turn::unlabeled(toks(u), toks(r));
                let pairs: Vec<(&str, &str)> = if v.is_empty() { vec![] } else { vec![("color", *v)] };
                t.gold_belief = Some(BeliefState::from_map(&model.schema, pairs)?);
                t.domain = Some("shop".into());
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dialog {
            id: id.into(),
            domains: vec!["shop".into()],
            turns,
            goal: None,
        })
    };
    let dialogs = vec![
        mk("g0", &[("red", "[v.color] color", "red"), ("shop", "[v.color]", "red")])?,
        mk("g1", &[("color blue", "blue [v.color]", "blue"), ("dontcare color", "shop", "dontcare")])?,
    ];
    Ok((model, db, dialogs))
}

#[derive(Debug, Clone, Serialize)]
pub struct ObjectiveCheck {
    pub objective: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_param: Option<String>,
}

impl From<(&'static str, GradCheckReport)> for ObjectiveCheck {
    fn from((objective, r): (&'static str, GradCheckReport)) -> Self {
        ObjectiveCheck {
            objective,
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            worst_param: r.worst.first().map(|e| format!("{}[{}]", e.param, e.index)),
        }
    }
}

/// Check the supervised loss and the relaxed unsupervised surrogate (sample
/// fixed, straight-through probabilities frozen). `corrupt` is added to every
/// analytic gradient entry of the first parameter.
pub fn check_objectives(model: &Labes, dialogs: &[Dialog], db: &EntityDb, epsilon: f64, corrupt: Option<f64>) -> Result<Vec<ObjectiveCheck>> {
    let refs: Vec<&Dialog> = dialogs.iter().collect();
    let seeds: Vec<u64> = (0..refs.len() as u64).collect();
    let base = batch_objective(model, &model.params, &refs, db, Objective::Unsupervised, false, &seeds, None, None)?;
    let relax = base.relaxations;
    let mut out = Vec::new();
    for (name, objective, relax) in [("supervised", Objective::Supervised, None), ("unsupervised", Objective::Unsupervised, Some(relax.as_slice()))] {
        let report = grad_check(&model.params, epsilon, |_, _| true, |ps, grads| {
            let corrupting = grads.is_some();
            let mut g = grads;
            let loss = batch_objective(model, ps, &refs, db, objective, false, &seeds, relax, g.as_deref_mut())?.loss;
            if let (true, Some(c), Some(g)) = (corrupting, corrupt, g) {
                let (id, p) = ps.iter().next().expect("model has parameters");
                g.buf(id, p.data.len()).iter_mut().for_each(|x| *x += c);
            }
            Ok(loss)
        })?;
        out.push(ObjectiveCheck::from((name, report)));
    }
    Ok(out)
}
