use std::collections::BTreeMap;

use super::*;
use crate::corpus::{DomainGoal, Turn};
use crate::kb::tests::camrest_like;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn b(schema: &Schema, kv: &[(&str, &str)]) -> BeliefState {
    BeliefState::from_map(schema, kv.iter().copied()).unwrap()
}

#[test]
fn joint_goal_definitions() {
    let (s, _) = camrest_like();
    let g = vec![
        b(&s, &[("food", "british")]),
        b(&s, &[("food", "british"), ("area", "north")]),
        b(&s, &[("food", "british"), ("area", "north")]),
    ];
    assert_eq!(joint_goal_accuracy(&g, &g).unwrap(), 1.0);
    let mut p = g.clone();
    p[1] = b(&s, &[("food", "british"), ("area", "south")]);
    assert!((joint_goal_accuracy(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!(matches!(joint_goal_accuracy(&p[..2], &g), Err(Error::LengthMismatch(3, 2))));
    // normalization: case, articles, punctuation
    let a = b(&s, &[("area", "The North .")]);
    assert!(beliefs_match(&a, &b(&s, &[("area", "north")])));
}

#[test]
fn joint_goal_on_empty_predictions_counts_empty_gold_turns() {
    let (s, _) = camrest_like();
    let gold: Vec<BeliefState> = (0..10)
        .map(|i| if i % 5 < 2 { BeliefState::empty(&s) } else { b(&s, &[("food", "indian")]) })
        .collect();
    let empty_gold = gold.iter().filter(|g| g.is_empty()).count() as f64 / gold.len() as f64;
    let pred = vec![BeliefState::empty(&s); gold.len()];
    assert_eq!(empty_gold, 0.4);
    assert_eq!(joint_goal_accuracy(&pred, &gold).unwrap(), empty_gold);
}

/// Independent BLEU: modified precision per order from string-keyed counts.
fn bleu_oracle(c: &[&str], r: &[&str]) -> f64 {
    let split = |x: &&str| -> Vec<String> { x.split(' ').map(String::from).collect() };
    let cs: Vec<Vec<String>> = c.iter().map(split).collect();
    let rs: Vec<Vec<String>> = r.iter().map(split).collect();
    let mut logs = 0.0;
    for n in 1..=4 {
        let (mut num, mut den) = (0.0, 0.0);
        for (cc, rr) in cs.iter().zip(&rs) {
            let count = |t: &Vec<String>| {
                let mut m: BTreeMap<String, f64> = BTreeMap::new();
                for i in 0..t.len().saturating_sub(n - 1) {
                    *m.entry(t[i..i + n].join("\u{1}")).or_default() += 1.0;
                }
                m
            };
            let (mc, mr) = (count(cc), count(rr));
            for (k, v) in &mc {
                num += v.min(*mr.get(k).unwrap_or(&0.0));
                den += v;
            }
        }
        logs += (num / den).ln();
    }
    let clen: f64 = cs.iter().map(|x| x.len() as f64).sum();
    let rlen: f64 = rs.iter().map(|x| x.len() as f64).sum();
    let bp = if clen > rlen { 1.0 } else { (1.0 - rlen / clen).exp() };
    100.0 * bp * (logs / 4.0).exp()
}

#[test]
fn bleu_matches_oracle_and_limits() {
    let c = ["the cat sat on the mat today", "a quick brown fox jumps over", "i would like a cheap place in the north"];
    let r = ["the cat sat on a mat today", "the quick brown fox jumps over it", "i want a cheap place in the north please"];
    let cv: Vec<Vec<String>> = c.iter().map(|x| toks(x)).collect();
    let rv: Vec<Vec<String>> = r.iter().map(|x| toks(x)).collect();
    let got = bleu(&cv, &rv).unwrap();
    let want = bleu_oracle(&c, &r);
    assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    assert!(got > 0.0 && got < 100.0);
    assert!((bleu(&rv, &rv).unwrap() - 100.0).abs() < 1e-9);
    let none = vec![toks("x y z w"), toks("q r s t"), toks("u v")];
    assert_eq!(bleu(&none, &rv).unwrap(), 0.0);
}

#[test]
fn bleu_hand_computed() {
    // candidate "a b c d e", reference "a b c d f g": p1=4/5 p2=3/4 p3=2/3 p4=1/2, bp=exp(1-6/5)
    let got = bleu(&[toks("a b c d e")], &[toks("a b c d f g")]).unwrap();
    let want = 100.0 * (1.0f64 - 6.0 / 5.0).exp() * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    assert!((got - want).abs() < 1e-10);
}

#[test]
fn combined_arithmetic() {
    assert!((combined(78.07, 67.06, 18.13) - 90.69).abs() < 0.005);
    assert_eq!(combined(0.0, 0.0, 0.0), 0.0);
    assert_eq!(combined(100.0, 100.0, 0.0), 100.0);
}

fn gold_dialog(s: &Schema, id: &str, informs: &[(&str, &str)], requests: &[&str], responses: &[&str]) -> Dialog {
    let mut goal = Goal::new();
    goal.insert(
        "restaurant".into(),
        DomainGoal {
            inform: informs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            request: requests.iter().map(|r| r.to_string()).collect(),
        },
    );
    Dialog {
        id: id.into(),
        domains: vec!["restaurant".into()],
        goal: Some(goal),
        turns: responses
            .iter()
            .map(|r| {
                let mut t = Turn::unlabeled(toks("hello"), toks(r));
                t.gold_belief = Some(b(s, informs));
                t
            })
            .collect(),
    }
}

fn output(d: &Dialog, beliefs: &[BeliefState], responses: &[&str]) -> DialogOutput {
    DialogOutput {
        dialog_id: d.id.clone(),
        turns: beliefs
            .iter()
            .zip(responses)
            .map(|(b, r)| TurnOutput {
                belief: b.clone(),
                response: toks(r),
                domain: Some("restaurant".into()),
            })
            .collect(),
    }
}

#[test]
fn perfect_system_scores() {
    let (s, db) = camrest_like();
    let g = gold_dialog(&s, "d1", &[("food", "indian")], &["addr"], &["[v.name] is at [v.addr]"]);
    let o = output(&g, &[b(&s, &[("food", "indian")])], &["[v.name] is at [v.addr]"]);
    let gold = vec![g];
    let outs = vec![o];
    assert_eq!(match_rate(&outs, &gold, &s, &db).unwrap(), 1.0);
    assert_eq!(succ_f1(&outs, &gold, &s).unwrap(), 1.0);
    assert_eq!(inform_success(&outs, &gold, &s, &db).unwrap(), (100.0, 100.0));
    let r = MetricsReport::from_outputs(&outs, &gold, &s, &db).unwrap();
    assert_eq!(r.joint_goal, 1.0);
    assert!((r.bleu - 100.0).abs() < 1e-9);
    assert_eq!(r.combined, combined(r.inform, r.success, r.bleu));
    // no placeholders: recall 0
    let bare = vec![output(&gold[0], &[b(&s, &[("food", "indian")])], &["okay"])];
    assert_eq!(succ_f1(&bare, &gold, &s).unwrap(), 0.0);
}

#[test]
fn match_counts_wrong_final_belief() {
    let (s, db) = camrest_like();
    let g1 = gold_dialog(&s, "d1", &[("food", "russian")], &[], &["[v.name] is good", "bye"]);
    let g2 = gold_dialog(&s, "d2", &[("food", "indian")], &[], &["[v.name] is good", "bye"]);
    let o1 = output(&g1, &[b(&s, &[("food", "russian")]), b(&s, &[("food", "russian")])], &["[v.name] is good", "bye"]);
    let o2 = output(&g2, &[b(&s, &[("food", "indian")]), b(&s, &[("food", "british")])], &["[v.name] is good", "bye"]);
    let gold = vec![g1, g2];
    let outs = vec![o1, o2];
    assert_eq!(match_rate(&outs, &gold, &s, &db).unwrap(), 0.5);
    let r = MetricsReport::from_outputs(&outs, &gold, &s, &db).unwrap();
    assert_eq!(r.per_dialog[1].matched, Some(false));
    assert!(r.to_table(true).contains("d2"));
}

#[test]
fn inform_and_success_fixture() {
    let (s, db) = camrest_like();
    let mut gold = Vec::new();
    let mut outs = Vec::new();
    for i in 0..4 {
        let g = gold_dialog(&s, &format!("d{i}"), &[("food", "indian")], &["addr", "phone"], &["[v.name] [v.addr] [v.phone]"]);
        let resp = if i == 3 { "[v.name] [v.addr]" } else { "[v.name] [v.addr] [v.phone]" };
        outs.push(output(&g, &[b(&s, &[("food", "indian")])], &[resp]));
        gold.push(g);
    }
    let (inf, suc) = inform_success(&outs, &gold, &s, &db).unwrap();
    assert_eq!((inf, suc), (100.0, 75.0));
    assert!(suc <= inf);
    // wrong entity offered: not informed, hence not successful
    outs[0].turns[0].belief = b(&s, &[("food", "russian")]);
    let (inf, suc) = inform_success(&outs, &gold, &s, &db).unwrap();
    assert_eq!((inf, suc), (75.0, 50.0));
}

#[test]
fn metrics_invariant_to_dialog_order() {
    let (s, db) = camrest_like();
    let g1 = gold_dialog(&s, "d1", &[("food", "russian")], &["phone"], &["[v.name] [v.phone]"]);
    let g2 = gold_dialog(&s, "d2", &[("food", "indian")], &["addr"], &["sorry"]);
    let o1 = output(&g1, &[b(&s, &[("food", "russian")])], &["[v.name] [v.phone]"]);
    let o2 = output(&g2, &[b(&s, &[("food", "british")])], &["[v.name] okay"]);
    let a = MetricsReport::from_outputs(&[o1.clone(), o2.clone()], &[g1.clone(), g2.clone()], &s, &db).unwrap();
    let z = MetricsReport::from_outputs(&[o2, o1], &[g2, g1], &s, &db).unwrap();
    assert_eq!(a.joint_goal, z.joint_goal);
    assert_eq!(a.match_rate, z.match_rate);
    assert_eq!(a.succ_f1, z.succ_f1);
    assert_eq!((a.inform, a.success), (z.inform, z.success));
    assert!((a.bleu - z.bleu).abs() < 1e-12);
}

#[test]
fn report_json_round_trip() {
    let (s, db) = camrest_like();
    let g = gold_dialog(&s, "d1", &[("food", "indian")], &["addr"], &["[v.name] is at [v.addr]"]);
    let o = output(&g, &[b(&s, &[("food", "indian")])], &["[v.name] is at [v.addr]"]);
    let r = MetricsReport::from_outputs(&[o], &[g], &s, &db).unwrap();
    let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert!(r.to_json().contains("\"match\""));
}

#[test]
fn mean_std_sample() {
    let (m, sd) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((sd - 1.0).abs() < 1e-15);
}
