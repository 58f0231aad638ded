use super::*;
use crate::corpus::{relexicalize, Vocabulary};
use crate::model::ModelConfig;

fn small_spec() -> SynthSpec {
    SynthSpec {
        dialogs: 60,
        ..SynthSpec::default()
    }
}

pub(crate) fn tiny_setup() -> (SynthData, Labes) {
    let spec = SynthSpec {
        slots: 2,
        values_per_slot: 2,
        alias_values: 2,
        dialogs: 8,
        turns: 2,
        db_size: 6,
        dontcare_rate: 0.2,
        seed: 3,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let vocab = Vocabulary::build(&data.corpus.dialogs, &data.schema, 1000);
    let cfg = ModelConfig {
        hidden_size: 4,
        embedding_size: 4,
        attention_size: 3,
        dropout_rate: 0.0,
        max_value_len: 1,
        max_response_len: 30,
        restrict_belief_tokens: true,
        init_scale: 0.5,
        ..ModelConfig::default()
    };
    let model = Labes::new(cfg, data.schema.clone(), vocab, 5).unwrap();
    (data, model)
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&small_spec()).unwrap();
    let b = generate(&small_spec()).unwrap();
    assert_eq!(a.corpus, b.corpus);
    assert_eq!(a.db.to_json(), b.db.to_json());
    let c = generate(&SynthSpec { seed: 9, ..small_spec() }).unwrap();
    assert_ne!(a.corpus, c.corpus);
}

#[test]
fn template_inversion_recovers_every_label() {
    let data = generate(&small_spec()).unwrap();
    let mut checked = 0;
    for d in &data.corpus.dialogs {
        let mut prev = BeliefState::empty(&data.schema);
        for t in &d.turns {
            let b = invert_templates(&data.spec, &data.schema, &prev, &t.user);
            assert_eq!(Some(&b), t.gold_belief.as_ref(), "dialog {}", d.id);
            prev = b;
            checked += 1;
        }
    }
    assert_eq!(checked, 60 * 3);
}

#[test]
fn aliases_appear_only_when_enabled() {
    let none = generate(&SynthSpec { alias_rate: 0.0, ..small_spec() }).unwrap();
    let alias = |t: &str| ALIAS.iter().any(|&c| t.starts_with(c)) && t.len() == 3 && t[1..].chars().all(|c| c.is_ascii_digit());
    assert!(none.corpus.dialogs.iter().flat_map(|d| &d.turns).all(|t| !t.user.iter().any(|w| alias(w))));
    let some = generate(&small_spec()).unwrap();
    assert!(some.corpus.dialogs.iter().flat_map(|d| &d.turns).any(|t| t.user.iter().any(|w| alias(w))));
    // responses always use canonical forms
    assert!(some.corpus.dialogs.iter().flat_map(|d| &d.turns).all(|t| !t.response_delex.iter().any(|w| alias(w))));
}

#[test]
fn responses_relexicalize_to_raw() {
    let data = generate(&small_spec()).unwrap();
    for t in data.corpus.dialogs.iter().flat_map(|d| &d.turns) {
        assert_eq!(relexicalize(&t.response_delex, &t.span_map), t.response_raw);
        if let Some(id) = &t.entity_id {
            let e = data.db.entity(id).unwrap();
            let b = t.gold_belief.as_ref().unwrap();
            assert!(data.db.query(&data.schema, b, DOMAIN).iter().any(|m| m.id == e.id));
        }
    }
}

#[test]
fn split_is_positional() {
    let data = generate(&small_spec()).unwrap();
    let (tr, dv, te) = data.split(0.1, 0.2);
    assert_eq!((tr.len(), dv.len(), te.len()), (42, 6, 12));
    assert_eq!(tr.dialogs[0].id, "synth-0000");
    assert_eq!(te.dialogs[11].id, "synth-0059");
}

#[test]
fn invalid_specs_are_rejected() {
    for s in [
        SynthSpec { slots: 0, ..SynthSpec::default() },
        SynthSpec { slots: 7, ..SynthSpec::default() },
        SynthSpec { alias_rate: 1.5, ..SynthSpec::default() },
        SynthSpec { dialogs: 0, ..SynthSpec::default() },
    ] {
        assert!(matches!(generate(&s), Err(Error::Config(_))));
    }
}

#[test]
fn enumeration_respects_bound() {
    let (_, model) = tiny_setup();
    let per_slot: Vec<usize> = (0..2).map(|s| model.belief_support(s).len()).collect();
    let paths = enumerate_beliefs(&model, 10_000).unwrap();
    assert_eq!(paths.len(), per_slot.iter().product::<usize>());
    match enumerate_beliefs(&model, 3) {
        Err(Error::EnumerationBound { limit, .. }) => assert_eq!(limit, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn prior_over_enumerated_beliefs_sums_to_one() {
    let (data, model) = tiny_setup();
    let paths = enumerate_beliefs(&model, 10_000).unwrap();
    let d = &data.corpus.dialogs[0];
    let prev = d.turns[0].gold_belief.clone().unwrap();
    let terms = turn_terms(&model, d, &data.db, 1, &prev, &paths).unwrap();
    let z: f64 = terms.iter().map(|t| t.log_prior.exp()).sum();
    assert!((z - 1.0).abs() < 1e-9, "{z}");
}

#[test]
fn forward_recursion_matches_brute_force_over_chains() {
    let (data, model) = tiny_setup();
    let paths = enumerate_beliefs(&model, 10_000).unwrap();
    let d = &data.corpus.dialogs[1];
    assert_eq!(d.turns.len(), 2);
    let exact = exact_marginal(&model, d, &data.db, 10_000).unwrap();

    let empty = BeliefState::empty(&data.schema);
    let first = turn_terms(&model, d, &data.db, 0, &empty, &paths).unwrap();
    let mut joint = Vec::new();
    for a in &first {
        let b1 = model.path_belief(&a.path);
        for b in turn_terms(&model, d, &data.db, 1, &b1, &paths).unwrap() {
            joint.push(a.log_prior + a.log_likelihood + b.log_prior + b.log_likelihood);
        }
    }
    let l1 = log_sum_exp(first.iter().map(|t| t.log_prior + t.log_likelihood));
    let l12 = log_sum_exp(joint);
    assert!((exact[0] - l1).abs() < 1e-9);
    assert!((exact[0] + exact[1] - l12).abs() < 1e-9);
    assert!(exact.iter().all(|&x| x < 0.0));
}

#[test]
fn marginal_of_empty_dialog_is_an_error() {
    let (data, model) = tiny_setup();
    let mut d = data.corpus.dialogs[0].clone();
    d.turns.clear();
    assert!(matches!(exact_marginal(&model, &d, &data.db, 100), Err(Error::EmptySequence)));
}

#[test]
fn single_turn_single_slot_fills_at_most_one_slot() {
    let spec = SynthSpec {
        slots: 1,
        turns: 1,
        dialogs: 50,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    for t in data.corpus.dialogs.iter().flat_map(|d| &d.turns) {
        assert!(t.gold_belief.as_ref().unwrap().len() <= 1);
    }
}

#[test]
fn marginal_is_invariant_to_enumeration_order() {
    let (data, model) = tiny_setup();
    let d = &data.corpus.dialogs[2];
    let mut paths = enumerate_beliefs(&model, 10_000).unwrap();
    let a = exact_marginal_over(&model, d, &data.db, &paths).unwrap();
    paths.reverse();
    paths.swap(0, 3);
    let b = exact_marginal_over(&model, d, &data.db, &paths).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn marginal_dominates_best_joint_term() {
    let (data, model) = tiny_setup();
    let d = &data.corpus.dialogs[3];
    let paths = enumerate_beliefs(&model, 10_000).unwrap();
    let exact = exact_marginal(&model, d, &data.db, 10_000).unwrap();
    let empty = BeliefState::empty(&data.schema);
    let best = turn_terms(&model, d, &data.db, 0, &empty, &paths)
        .unwrap()
        .iter()
        .map(|t| t.log_prior + t.log_likelihood)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(exact[0] >= best);
}

#[test]
fn degenerate_mixture_reduces_to_single_term() {
    let terms = [0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
    assert_eq!(log_sum_exp(terms.iter().map(|p| p + -2.5)), -2.5);
    assert_eq!(log_sum_exp([f64::NEG_INFINITY]), f64::NEG_INFINITY);
}

#[test]
fn desk_configs_are_valid() {
    assert!(desk_model_config().validate().is_ok());
    assert!(desk_train_config(0).validate().is_ok());
    assert_eq!(SynthSpec::default().schema().slots().len(), 2);
}
