use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{BeliefState, Dialog, DomainSchema, Turn, EOS_ID};
use crate::kb::{match_vector, EntityDb};
use crate::neural::{grad_check, Gradients, StTrace, Tape, Var};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub(crate) fn tiny_schema(slots: &[(&str, &[&str])]) -> Schema {
    let mut values = BTreeMap::new();
    for (s, vs) in slots {
        values.insert(s.to_string(), vs.iter().map(|v| v.to_string()).collect());
    }
    Schema::new(vec![DomainSchema {
        name: "shop".into(),
        informable: slots.iter().map(|(s, _)| s.to_string()).collect(),
        requestable: vec!["name".into()],
        values,
    }])
    .unwrap()
}

pub(crate) fn tiny_model(slots: &[(&str, &[&str])], extra: &[&str], cfg: ModelConfig, seed: u64) -> Labes {
    let schema = tiny_schema(slots);
    let mut tokens = Vocabulary::specials(&schema);
    let n = tokens.len();
    for (_, vs) in slots {
        for v in *vs {
            if !tokens.iter().any(|t| t == v) {
                tokens.push(v.to_string());
            }
        }
    }
    for t in extra {
        tokens.push(t.to_string());
    }
    let vocab = Vocabulary::from_tokens(tokens, n).unwrap();
    Labes::new(cfg, schema, vocab, seed).unwrap()
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        hidden_size: 6,
        embedding_size: 5,
        attention_size: 4,
        dropout_rate: 0.0,
        init_scale: 0.6,
        ..ModelConfig::default()
    }
}

fn one_slot() -> Labes {
    let cfg = ModelConfig {
        max_value_len: 2,
        restrict_belief_tokens: true,
        ..small_cfg()
    };
    tiny_model(&[("color", &["red", "blue", "green", "pink"])], &["hi", "want", "ok"], cfg, 7)
}

fn two_slot() -> Labes {
    tiny_model(
        &[("color", &["red", "blue"]), ("size", &["big", "small"])],
        &["hi", "want", "ok"],
        small_cfg(),
        11,
    )
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn db_for(m: &Labes) -> EntityDb {
    let rows = serde_json::json!({"shop": [
        {"id": "e0", "name": "alpha", "color": "red", "size": "big"},
        {"id": "e1", "name": "beta", "color": "blue", "size": "small"},
    ]});
    EntityDb::from_json(&rows.to_string(), &m.schema).unwrap()
}

fn dialog(m: &Labes, labeled: bool) -> Dialog {
    let turns = [("hi want red", "ok"), ("want big", "ok [v.name]"), ("ok", "ok")];
    let gold = [
        vec![("color", "red")],
        vec![("color", "red"), ("size", "big")],
        vec![("color", "red"), ("size", "big")],
    ];
    Dialog {
        id: "d0".into(),
        domains: vec!["shop".into()],
        goal: None,
        turns: turns
            .iter()
            .zip(&gold)
            .map(|((u, r), g)| {
                let mut t = Turn::unlabeled(toks(u), toks(r));
                if labeled {
                    t.gold_belief = Some(BeliefState::from_map(&m.schema, g.iter().copied()).unwrap());
                }
                t
            })
            .collect(),
    }
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig {
        dropout_rate: 1.0,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        kl_weight: -0.1,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        hidden_size: 0,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn restricted_support_has_six_tokens() {
    let m = one_slot();
    assert_eq!(m.belief_support(0).len(), 6);
}

/// Every terminated value string of length <= 2 over the 6-token support.
fn all_paths(m: &Labes) -> Vec<Vec<u32>> {
    let eov = m.eov_id(0);
    let vals: Vec<u32> = m.belief_support(0).into_iter().filter(|&t| t != eov).collect();
    let mut out = vec![vec![eov]];
    for &a in &vals {
        out.push(vec![a, eov]);
        for &b in &vals {
            out.push(vec![a, b, eov]);
        }
    }
    out
}

#[test]
fn belief_distribution_enumerates_to_one() {
    let m = one_slot();
    let ctx = m.context(&[], &toks("hi want red"));
    let prev = BeliefState::empty(&m.schema);
    let resp = m.response_ids(&toks("ok"));
    for (net, r) in [(Network::Prior, None), (Network::Posterior, Some(resp.as_slice()))] {
        let mut total = 0.0;
        for p in all_paths(&m) {
            let s = m
                .decode_belief(net, &prev, &ctx, r, BeliefMode::Force(&[p]), &mut rng(0))
                .unwrap();
            total += s.log_prob.exp();
        }
        assert!((total - 1.0).abs() < 1e-6, "{net:?}: {total}");
    }
}

#[test]
fn response_distribution_enumerates_to_one() {
    let cfg = ModelConfig {
        max_response_len: 2,
        ..small_cfg()
    };
    let m = tiny_model(&[("color", &["red", "blue"])], &["hi", "ok"], cfg, 3);
    let ctx = m.context(&toks("ok"), &toks("hi red"));
    let b = BeliefState::from_map(&m.schema, [("color", "red")]).unwrap();
    let d = match_vector(2);
    // mass of sequences ending with the end symbol within the cap, plus the
    // continuation mass truncated at the cap
    let first = m.response_next(&ctx, &b, d, &[]).unwrap();
    let mut total = 0.0;
    for (w, &lw) in first.iter().enumerate() {
        if lw == f64::NEG_INFINITY {
            continue;
        }
        if w as u32 == EOS_ID {
            total += lw.exp();
            continue;
        }
        let second = m.response_next(&ctx, &b, d, &[w as u32]).unwrap();
        total += second.iter().map(|l| (lw + l).exp()).sum::<f64>();
    }
    assert!((total - 1.0).abs() < 1e-6, "{total}");

    // forced scoring agrees with the step distributions
    let w = m.vocab.id("hi");
    let forced = m
        .decode_response(&ctx, &b, d, ResponseMode::Force(&[w, EOS_ID]))
        .unwrap();
    let second = m.response_next(&ctx, &b, d, &[w]).unwrap();
    assert!((forced.log_prob - (first[w as usize] + second[EOS_ID as usize])).abs() < 1e-12);
}

#[test]
fn forcing_the_greedy_decode_reproduces_its_log_prob() {
    let m = two_slot();
    let ctx = m.context(&[], &toks("hi want red"));
    let prev = BeliefState::empty(&m.schema);
    let g = m
        .decode_belief(Network::Prior, &prev, &ctx, None, BeliefMode::Greedy, &mut rng(0))
        .unwrap();
    assert!(g.log_prob.is_finite());
    assert!(g.tokens.iter().all(|s| s.len() <= m.config.max_value_len + 1));
    let f = m
        .decode_belief(Network::Prior, &prev, &ctx, None, BeliefMode::Force(&g.tokens), &mut rng(0))
        .unwrap();
    assert_eq!(f.belief, g.belief);
    assert!((f.log_prob - g.log_prob).abs() < 1e-12);

    let d = match_vector(1);
    let r = m.decode_response(&ctx, &g.belief, d, ResponseMode::Greedy).unwrap();
    let mut ids = r.tokens.clone();
    ids.push(EOS_ID);
    let rf = m.decode_response(&ctx, &g.belief, d, ResponseMode::Force(&ids)).unwrap();
    if ids.len() <= m.config.max_response_len {
        assert!((rf.log_prob - r.log_prob).abs() < 1e-12);
    }
}

#[test]
fn prior_rejects_response_and_posterior_requires_it() {
    let m = two_slot();
    let ctx = m.context(&[], &toks("hi"));
    let prev = BeliefState::empty(&m.schema);
    let r = m.response_ids(&toks("ok"));
    assert!(matches!(
        m.decode_belief(Network::Prior, &prev, &ctx, Some(&r), BeliefMode::Greedy, &mut rng(0)),
        Err(crate::Error::UnexpectedResponse)
    ));
    assert!(matches!(
        m.decode_belief(Network::Posterior, &prev, &ctx, None, BeliefMode::Greedy, &mut rng(0)),
        Err(crate::Error::MissingResponse)
    ));
}

#[test]
fn slots_decode_independently() {
    let m = two_slot();
    let ctx = m.context(&[], &toks("hi want red big"));
    let prev = BeliefState::from_map(&m.schema, [("color", "blue")]).unwrap();
    let red = m.vocab.id("red");
    let big = m.vocab.id("big");
    let small = m.vocab.id("small");
    let (e0, e1) = (m.eov_id(0), m.eov_id(1));
    let a = m
        .decode_belief(Network::Prior, &prev, &ctx, None, BeliefMode::Force(&[vec![red, e0], vec![big, e1]]), &mut rng(0))
        .unwrap();
    let b = m
        .decode_belief(Network::Prior, &prev, &ctx, None, BeliefMode::Force(&[vec![red, e0], vec![small, small, e1]]), &mut rng(0))
        .unwrap();
    let c = m
        .decode_belief(Network::Prior, &prev, &ctx, None, BeliefMode::Force(&[vec![e0], vec![big, e1]]), &mut rng(0))
        .unwrap();
    assert_eq!(a.token_log_probs[0], b.token_log_probs[0]);
    assert_eq!(a.token_log_probs[1], c.token_log_probs[1]);
}

#[test]
fn value_length_cap_forces_the_terminator() {
    let m = one_slot();
    let ctx = m.context(&[], &toks("hi"));
    let prev = BeliefState::empty(&m.schema);
    let red = m.vocab.id("red");
    let eov = m.eov_id(0);
    let s = m
        .decode_belief(Network::Prior, &prev, &ctx, None, BeliefMode::Force(&[vec![red, red, eov]]), &mut rng(0))
        .unwrap();
    assert_eq!(s.token_log_probs[0].len(), 2);
    let too_long = m.decode_belief(
        Network::Prior,
        &prev,
        &ctx,
        None,
        BeliefMode::Force(&[vec![red, red, red, eov]]),
        &mut rng(0),
    );
    assert!(too_long.is_err());
    // gold paths are truncated to the cap
    let b = BeliefState::from_values(vec![toks("red red red")]);
    assert_eq!(m.belief_path(&b), vec![vec![red, red, eov]]);
}

#[test]
fn straight_through_point_mass_and_sampling() {
    let mut ps = crate::neural::ParameterSet::new();
    let emb = ps.add_uniform("emb", 4, 3, 0.5, &mut rng(1));
    let mut tape = Tape::new(&ps);
    let point = tape.constant(vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
    let mut r = rng(2);
    for greedy in [true, false] {
        for _ in 0..20 {
            assert_eq!(straight_through(&mut tape, emb, point, greedy, &mut r).0, 1);
        }
    }
    let uniform = tape.constant(vec![(0.25f64).ln(); 4]);
    let mut counts = [0usize; 4];
    let n = 100_000;
    for _ in 0..n {
        let (t, e) = straight_through(&mut tape, emb, uniform, false, &mut r);
        counts[t as usize] += 1;
        assert_eq!(tape.value(e), ps.get(emb).row(t as usize));
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.25).abs() < 0.02 * 0.25, "{counts:?}");
    }
}

#[test]
fn straight_through_gradient_matches_relaxed_surrogate() {
    // loss = <w, ST(softmax(W x))>; the ST gradient must equal the derivative of
    // the surrogate with onehot replaced by onehot + p - stopgrad(p).
    let mut ps = crate::neural::ParameterSet::new();
    let mut r = rng(5);
    let emb = ps.add_uniform("emb", 5, 3, 0.7, &mut r);
    let wl = ps.add_uniform("logits", 5, 4, 0.7, &mut r);
    let x = vec![0.3, -0.2, 0.9, 0.1];
    let probe = vec![1.0, -2.0, 0.5];
    let mask: std::sync::Arc<[bool]> = std::sync::Arc::from(vec![true; 5]);
    let src: std::sync::Arc<[u32]> = std::sync::Arc::from(vec![0u32]);
    let build = |tape: &mut Tape, token: Option<u32>, r: &mut ChaCha8Rng| -> (Var, u32) {
        let xv = tape.constant(x.clone());
        let logits = tape.linear(wl, None, xv);
        let copy = tape.constant(vec![f64::NEG_INFINITY]);
        let ld = tape.copy_log_dist(logits, copy, src.clone(), mask.clone());
        let (tok, e) = match token {
            Some(t) => (t, tape.st_embed(emb, ld, t)),
            None => straight_through(tape, emb, ld, false, r),
        };
        let p = tape.constant_matrix(probe.clone(), 1, 3);
        (tape.matvec(p, e), tok)
    };
    let mut tape = Tape::new(&ps);
    let (loss, tok) = build(&mut tape, None, &mut r);
    let recorded = tape.st.recorded.clone();
    let mut g = Gradients::new(&ps);
    tape.backward(loss, &mut g);
    let report = grad_check(&ps, 1e-5, |id, _| id == wl, |ps, grads| {
        let mut tape = Tape::new(ps);
        tape.st = StTrace::frozen(recorded.clone());
        let (loss, _) = build(&mut tape, Some(tok), &mut rng(0));
        let v = tape.scalar(loss);
        if let Some(gr) = grads {
            let mut g2 = Gradients::new(ps);
            // analytic side: the unfrozen ST gradient
            let mut t2 = Tape::new(ps);
            let (l2, _) = build(&mut t2, Some(tok), &mut rng(0));
            t2.backward(l2, &mut g2);
            *gr = g2;
        }
        Ok(v)
    })
    .unwrap();
    assert!(report.passed(1e-7), "{report:?}");
    assert!(g.get(wl).unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn beam_never_worse_than_greedy() {
    let cfg = ModelConfig {
        max_response_len: 6,
        ..small_cfg()
    };
    let m = tiny_model(&[("color", &["red", "blue"])], &["hi", "ok", "thanks", "bye"], cfg, 21);
    for (i, u) in ["hi red", "ok", "thanks blue", "bye"].iter().enumerate() {
        let ctx = m.context(&[], &toks(u));
        let b = BeliefState::empty(&m.schema);
        let d = match_vector(i);
        let g = m.decode_response(&ctx, &b, d, ResponseMode::Greedy).unwrap();
        let bm = m.decode_response(&ctx, &b, d, ResponseMode::Beam { width: 4 }).unwrap();
        assert!(bm.log_prob >= g.log_prob - 1e-12);
    }
}

#[test]
fn single_turn_starts_from_empty_belief() {
    let m = two_slot();
    let db = db_for(&m);
    let mut d = dialog(&m, true);
    d.turns.truncate(1);
    let ctx = m.context(&[], &d.turns[0].user);
    let direct = m
        .decode_belief(Network::Prior, &BeliefState::empty(&m.schema), &ctx, None, BeliefMode::Greedy, &mut rng(0))
        .unwrap();
    let turns = m.unroll(&d, &db, UnrollMode::Eval(DecodeMode::Greedy), &mut rng(0)).unwrap();
    assert_eq!(turns.len(), 1);
    assert_eq!(turns[0].belief, direct.belief);
    assert!((turns[0].belief_log_prob - direct.log_prob).abs() < 1e-12);
}

#[test]
fn eval_unroll_is_deterministic_and_ignores_gold() {
    let m = two_slot();
    let db = db_for(&m);
    let labeled = dialog(&m, true);
    let a = m.unroll(&labeled, &db, UnrollMode::Eval(DecodeMode::Greedy), &mut rng(1)).unwrap();
    let b = m.unroll(&labeled, &db, UnrollMode::Eval(DecodeMode::Greedy), &mut rng(99)).unwrap();
    assert_eq!(a, b);
    // gold annotations and gold responses must not influence eval decoding
    let mut altered = dialog(&m, false);
    for t in &mut altered.turns {
        t.response_delex = toks("bye bye");
        t.domain = Some("shop".into());
    }
    let c = m.unroll(&altered, &db, UnrollMode::Eval(DecodeMode::Greedy), &mut rng(1)).unwrap();
    assert_eq!(a, c);
    let recs = m.decode_records(&labeled, &db, &a);
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[2].turn, 2);
}

#[test]
fn teacher_forced_requires_labels() {
    let m = two_slot();
    let db = db_for(&m);
    let d = dialog(&m, false);
    assert!(matches!(
        m.unroll(&d, &db, UnrollMode::TeacherForced, &mut rng(0)),
        Err(crate::Error::MissingLabel(_))
    ));
    assert!(m.unroll(&dialog(&m, true), &db, UnrollMode::TeacherForced, &mut rng(0)).is_ok());
    assert!(m.unroll(&d, &db, UnrollMode::PosteriorSample, &mut rng(0)).is_ok());
}

#[test]
fn posterior_chain_depends_on_previous_sample() {
    let m = two_slot();
    let db = db_for(&m);
    let d = dialog(&m, false);
    let (e0, e1) = (m.eov_id(0), m.eov_id(1));
    let (red, blue, big) = (m.vocab.id("red"), m.vocab.id("blue"), m.vocab.id("big"));
    let t1 = vec![vec![red, e0], vec![e1]];
    let t3 = vec![vec![red, e0], vec![big, e1]];
    let run = |t2: Vec<Vec<u32>>| {
        let replay = vec![t1.clone(), t2, t3.clone()];
        let mut tape = Tape::new(&m.params);
        m.run_dialog(
            &mut tape,
            &d,
            &db,
            RunOptions {
                objective: Objective::Unsupervised,
                train: false,
                replay: Some(&replay),
                rng: &mut rng(0),
            },
        )
        .unwrap()
    };
    let a = run(vec![vec![red, e0], vec![big, e1]]);
    let b = run(vec![vec![blue, e0], vec![e1]]);
    assert_eq!(a.turns[0], b.turns[0]);
    assert_eq!(a.turns[2].belief_tokens, b.turns[2].belief_tokens);
    assert_ne!(a.turns[2].posterior_log_prob, b.turns[2].posterior_log_prob);
    assert_ne!(a.turns[2].belief_log_prob, b.turns[2].belief_log_prob);
}

#[test]
fn checkpoint_round_trip_and_schema_mismatch() {
    let m = two_slot();
    let bytes = m.to_bytes();
    let back = Labes::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.config, m.config);
    let other = one_slot();
    assert!(!m.schema_mismatch(&other.schema).is_empty());
    assert!(m.schema_mismatch(&back.schema).is_empty());
}

#[test]
fn kl_vanishes_for_identical_distributions_on_a_shared_path() {
    let m = two_slot();
    let mut tape = Tape::new(&m.params);
    let ctx = m.context(&[], &toks("hi want red"));
    let prev = graph::BeliefPath {
        tokens: m.empty_path(),
        dists: m.empty_path().iter().map(|s| vec![None; s.len()]).collect(),
    };
    let src = m.belief_source(&mut tape, &m.prior, &ctx, &prev, None).unwrap();
    let mut r = rng(0);
    let mut c = graph::Ctx { train: false, rng: &mut r };
    let q = m.belief_graph(&mut tape, &m.prior, &src, graph::Choice::Sample, true, &mut c).unwrap();
    let p = m
        .belief_graph(&mut tape, &m.prior, &src, graph::Choice::Follow(&q.path.tokens), false, &mut c)
        .unwrap();
    let mut total = 0.0;
    for (qs, ps) in q.path.dists.iter().zip(&p.path.dists) {
        for (a, b) in qs.iter().zip(ps) {
            if let (Some(a), Some(b)) = (a, b) {
                let k = tape.kl(*a, *b);
                total += tape.scalar(k);
            }
        }
    }
    assert!(total.abs() < 1e-8);
}

#[test]
fn unsupervised_kl_is_nonnegative() {
    let m = two_slot();
    let db = db_for(&m);
    let d = dialog(&m, false);
    for seed in 0..5 {
        let mut tape = Tape::new(&m.params);
        let run = m
            .run_dialog(
                &mut tape,
                &d,
                &db,
                RunOptions {
                    objective: Objective::Unsupervised,
                    train: false,
                    replay: None,
                    rng: &mut rng(seed),
                },
            )
            .unwrap();
        assert!(run.turns.iter().all(|t| t.kl >= 0.0));
    }
}
