//! Computation-graph builders shared by decoding, unrolling and the training
//! objectives. Everything here records onto a caller-owned [`Tape`], so the same
//! code computes losses, gradients and free-running decodes.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BeliefNet, DecodeMode, KlEstimator, Labes};
use crate::corpus::{serialize_belief, BeliefState, Dialog, EOS_ID, GO_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::kb::{active_domain, match_vector, DbMatchVector, EntityDb};
use crate::neural::{argmax, dropout_mask, ParamId, Tape, Var};

/// Encoded copy source: stacked encoder states, the token ids at each position,
/// and the state seeding the decoder.
#[derive(Debug, Clone)]
pub(crate) struct Source {
    pub(crate) states: Var,
    pub(crate) src: Arc<[u32]>,
    pub(crate) init: Var,
}

/// A belief as decoded on a tape: per-slot token ids (each ending with the
/// slot's end-of-value symbol) and, per token, the distribution it was drawn
/// from (`None` for gold tokens and forced terminators).
#[derive(Debug, Clone)]
pub struct BeliefPath {
    pub tokens: Vec<Vec<u32>>,
    pub(crate) dists: Vec<Vec<Option<Var>>>,
}

impl BeliefPath {
    pub fn flat_tokens(&self) -> Vec<u32> {
        self.tokens.iter().flatten().copied().collect()
    }

    fn flat_dists(&self) -> Vec<Option<Var>> {
        self.dists.iter().flatten().copied().collect()
    }

    fn plain(tokens: Vec<Vec<u32>>) -> BeliefPath {
        let dists = tokens.iter().map(|s| vec![None; s.len()]).collect();
        BeliefPath { tokens, dists }
    }
}

pub(crate) enum Choice<'a> {
    Follow(&'a [Vec<u32>]),
    Greedy,
    Sample,
}

pub(crate) struct BeliefGraph {
    pub(crate) path: BeliefPath,
    pub(crate) log_prob: Var,
}

/// Which quantity a dialog run computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Teacher-forced log-likelihoods of gold beliefs (prior and posterior) and responses.
    Supervised,
    /// Negative ELBO with one straight-through posterior sample per turn.
    Unsupervised,
    /// Response likelihood under greedy straight-through prior beliefs.
    SelfTrain,
    /// End-to-end decoding from the model's own beliefs and responses.
    Eval(DecodeMode),
    /// Greedy decoding chained on gold previous beliefs.
    TeacherForced,
}

pub struct RunOptions<'a> {
    pub objective: Objective,
    /// Dropout active.
    pub train: bool,
    /// Fixed belief token paths per turn, replacing sampling/argmax.
    pub replay: Option<&'a [Vec<Vec<u32>>]>,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnRun {
    pub belief: BeliefState,
    pub belief_tokens: Vec<Vec<u32>>,
    pub bucket: DbMatchVector,
    pub domain: Option<String>,
    /// Response ids without the end symbol.
    pub response: Vec<u32>,
    pub belief_log_prob: f64,
    pub response_log_prob: f64,
    pub posterior_log_prob: f64,
    pub kl: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct DialogRun {
    pub turns: Vec<TurnRun>,
    /// Sum of per-turn losses (objectives only).
    pub loss: Option<Var>,
}

fn sample_from(logp: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &l) in logp.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        acc += l.exp();
        last = i;
        if u < acc {
            return i as u32;
        }
    }
    last as u32
}

pub(crate) struct Ctx<'a> {
    pub(crate) train: bool,
    pub(crate) rng: &'a mut ChaCha8Rng,
}

impl Labes {
    pub(crate) fn embed(&self, tape: &mut Tape, emb: ParamId, ids: &[u32], dists: Option<&[Option<Var>]>) -> Vec<Var> {
        ids.iter()
            .enumerate()
            .map(|(i, &t)| match dists.and_then(|d| d[i]) {
                Some(ld) => tape.st_embed(emb, ld, t),
                None => tape.row_of(emb, t as usize),
            })
            .collect()
    }

    pub(crate) fn context_ids(&self, prev_response: &[u32], user: &[String]) -> Vec<u32> {
        let mut ids = prev_response.to_vec();
        ids.push(SEP_ID);
        ids.extend(self.vocab.encode(user));
        ids
    }

    pub fn response_ids(&self, delex: &[String]) -> Vec<u32> {
        let mut ids = self.vocab.encode(delex);
        ids.push(EOS_ID);
        ids
    }

    /// Gold per-slot token paths, values truncated to the length cap.
    pub(crate) fn gold_path(&self, b: &BeliefState) -> Vec<Vec<u32>> {
        (0..self.num_slots())
            .map(|s| {
                let mut ids: Vec<u32> = b
                    .get(s)
                    .iter()
                    .take(self.config.max_value_len)
                    .map(|t| self.vocab.id(t))
                    .collect();
                ids.push(self.slots[s].eov);
                ids
            })
            .collect()
    }

    pub(crate) fn empty_path(&self) -> Vec<Vec<u32>> {
        self.slots.iter().map(|s| vec![s.eov]).collect()
    }

    pub fn path_belief(&self, tokens: &[Vec<u32>]) -> BeliefState {
        BeliefState::from_values(
            tokens
                .iter()
                .enumerate()
                .map(|(s, ids)| {
                    ids.iter()
                        .filter(|&&t| t != self.slots[s].eov)
                        .map(|&t| self.vocab.token(t).to_string())
                        .collect()
                })
                .collect(),
        )
    }

    /// Sources of the belief decoder of `net`: context, previous belief and, for
    /// the posterior, the response.
    pub(crate) fn belief_source(
        &self,
        tape: &mut Tape,
        net: &BeliefNet,
        ctx: &[u32],
        prev: &BeliefPath,
        response: Option<&[u32]>,
    ) -> Result<Source> {
        let xs = self.embed(tape, net.emb, ctx, None);
        let c = net.ctx_enc.encode(tape, &xs)?;
        let prev_ids = prev.flat_tokens();
        let prev_dists = prev.flat_dists();
        let xs = self.embed(tape, net.emb, &prev_ids, Some(&prev_dists));
        let b = net.prev_enc.encode(tape, &xs)?;
        let mut parts = vec![c.states, b.states];
        let mut src: Vec<u32> = ctx.to_vec();
        src.extend(&prev_ids);
        if let Some(r) = response {
            let enc = net
                .resp_enc
                .as_ref()
                .ok_or(Error::UnexpectedResponse)?;
            let xs = self.embed(tape, net.emb, r, None);
            let e = enc.encode(tape, &xs)?;
            parts.push(e.states);
            src.extend(r);
        } else if net.resp_enc.is_some() {
            return Err(Error::MissingResponse);
        }
        let states = tape.stack_rows(&parts);
        Ok(Source {
            states,
            src: Arc::from(src),
            init: c.last,
        })
    }

    /// Decode every slot with the weight-tied belief decoder of `net`.
    /// `st` routes within-slot inputs through straight-through embeddings.
    pub(crate) fn belief_graph(
        &self,
        tape: &mut Tape,
        net: &BeliefNet,
        source: &Source,
        choice: Choice,
        st: bool,
        ctx: &mut Ctx,
    ) -> Result<BeliefGraph> {
        let keys = net.attn.keys(tape, source.states);
        let mut tokens = Vec::with_capacity(self.num_slots());
        let mut dists = Vec::with_capacity(self.num_slots());
        let mut picks = Vec::new();
        let cap = self.config.max_value_len;
        for (s, info) in self.slots.iter().enumerate() {
            let follow = match &choice {
                Choice::Follow(p) => {
                    let p = &p[s];
                    if p.last() != Some(&info.eov) || p.len() > cap + 1 || p[..p.len() - 1].contains(&info.eov) {
                        return Err(Error::MalformedRecord {
                            dialog: String::new(),
                            field: format!("belief path of slot {}", self.schema.slots()[s]),
                            reason: "must end with its end-of-value symbol within the length cap".into(),
                        });
                    }
                    Some(p.as_slice())
                }
                _ => None,
            };
            let d0 = tape.row_of(net.emb, info.domain_tok as usize);
            let s0 = tape.row_of(net.emb, info.slot_tok as usize);
            let cat = tape.concat(&[d0, s0]);
            let mut x_prev = tape.linear(net.slot_w, Some(net.slot_b), cat);
            let mut h = source.init;
            let mut toks = Vec::new();
            let mut ds = Vec::new();
            for i in 0..=cap {
                if i == cap {
                    toks.push(info.eov);
                    ds.push(None);
                    break;
                }
                let a = net.attn.attend(tape, source.states, keys, h);
                let x = tape.concat(&[a, x_prev]);
                h = net.cell.step(tape, x, h);
                let mut hh = tape.concat(&[h, x_prev]);
                if ctx.train && self.config.dropout_rate > 0.0 {
                    let n = tape.value(hh).len();
                    hh = tape.mul_const(hh, dropout_mask(n, self.config.dropout_rate, ctx.rng));
                }
                let ld = net
                    .head
                    .log_dist(tape, hh, source.states, source.src.clone(), info.mask.clone());
                let tok = match (&choice, follow) {
                    (_, Some(p)) => p[i],
                    (Choice::Greedy, _) => argmax(tape.value(ld)) as u32,
                    (Choice::Sample, _) => sample_from(tape.value(ld), ctx.rng),
                    (Choice::Follow(_), None) => unreachable!(),
                };
                if !info.mask[tok as usize] {
                    return Err(Error::Config(format!(
                        "token `{}` is outside the belief vocabulary of slot {}",
                        self.vocab.token(tok),
                        self.schema.slots()[s]
                    )));
                }
                picks.push(tape.pick(ld, tok as usize));
                toks.push(tok);
                ds.push(Some(ld));
                if tok == info.eov {
                    break;
                }
                x_prev = if st {
                    tape.st_embed(net.emb, ld, tok)
                } else {
                    tape.row_of(net.emb, tok as usize)
                };
            }
            tokens.push(toks);
            dists.push(ds);
        }
        let log_prob = tape.sum(&picks);
        Ok(BeliefGraph {
            path: BeliefPath { tokens, dists },
            log_prob,
        })
    }

    /// Response-decoder source: context states plus the re-encoded belief.
    pub(crate) fn response_source(&self, tape: &mut Tape, ctx: &[u32], belief: &BeliefPath) -> Result<Source> {
        let net = &self.prior;
        let xs = self.embed(tape, net.emb, ctx, None);
        let c = net.ctx_enc.encode(tape, &xs)?;
        self.response_source_from(tape, c.states, c.last, ctx, belief)
    }

    pub(crate) fn response_source_from(
        &self,
        tape: &mut Tape,
        ctx_states: Var,
        ctx_last: Var,
        ctx: &[u32],
        belief: &BeliefPath,
    ) -> Result<Source> {
        let net = &self.prior;
        let ids = belief.flat_tokens();
        let dists = belief.flat_dists();
        let xs = self.embed(tape, net.emb, &ids, Some(&dists));
        let b = net.prev_enc.encode(tape, &xs)?;
        let states = tape.stack_rows(&[ctx_states, b.states]);
        let mut src = ctx.to_vec();
        src.extend(ids);
        Ok(Source {
            states,
            src: Arc::from(src),
            init: ctx_last,
        })
    }

    /// One response-decoder step from state `h` after token `prev`.
    pub(crate) fn response_step(&self, tape: &mut Tape, source: &Source, keys: Var, d: Var, h: Var, prev: u32) -> (Var, Var) {
        let r = &self.response;
        let e = tape.row_of(self.prior.emb, prev as usize);
        let a = r.attn.attend(tape, source.states, keys, h);
        let x = tape.concat(&[a, e, d]);
        let h = r.cell.step(tape, x, h);
        let hh = tape.concat(&[h, a, d]);
        let ld = r
            .head
            .log_dist(tape, hh, source.states, source.src.clone(), self.response_mask.clone());
        (h, ld)
    }

    /// Teacher-forced response scoring; returns per-step log-distributions and the
    /// summed log-probability of `ids`.
    pub(crate) fn response_follow(&self, tape: &mut Tape, source: &Source, d: DbMatchVector, ids: &[u32]) -> Result<(Vec<Var>, Var)> {
        let keys = self.response.attn.keys(tape, source.states);
        let dv = tape.constant(d.one_hot().to_vec());
        let mut h = source.init;
        let mut prev = GO_ID;
        let mut lds = Vec::with_capacity(ids.len());
        let mut picks = Vec::with_capacity(ids.len());
        for &t in ids {
            if !self.response_mask[t as usize] {
                return Err(Error::Config(format!(
                    "token `{}` cannot appear in a response",
                    self.vocab.token(t)
                )));
            }
            let (h2, ld) = self.response_step(tape, source, keys, dv, h, prev);
            h = h2;
            picks.push(tape.pick(ld, t as usize));
            lds.push(ld);
            prev = t;
        }
        let lp = tape.sum(&picks);
        Ok((lds, lp))
    }

    /// Greedy response decoding; stops at the end symbol or the length cap.
    pub(crate) fn response_greedy(&self, tape: &mut Tape, source: &Source, d: DbMatchVector) -> (Vec<u32>, f64) {
        let keys = self.response.attn.keys(tape, source.states);
        let dv = tape.constant(d.one_hot().to_vec());
        let mut h = source.init;
        let mut prev = GO_ID;
        let mut out = Vec::new();
        let mut lp = 0.0;
        for _ in 0..self.config.max_response_len {
            let (h2, ld) = self.response_step(tape, source, keys, dv, h, prev);
            h = h2;
            let t = argmax(tape.value(ld)) as u32;
            lp += tape.value(ld)[t as usize];
            if t == EOS_ID {
                break;
            }
            out.push(t);
            prev = t;
        }
        (out, lp)
    }

    /// Beam search over responses; a hypothesis reaching the length cap ends there.
    /// Returns the better of the best beam and the greedy decode.
    pub(crate) fn response_beam(&self, tape: &mut Tape, source: &Source, d: DbMatchVector, width: usize) -> (Vec<u32>, f64) {
        let greedy = self.response_greedy(tape, source, d);
        if width <= 1 {
            return greedy;
        }
        let keys = self.response.attn.keys(tape, source.states);
        let dv = tape.constant(d.one_hot().to_vec());
        struct Hyp {
            h: Var,
            tokens: Vec<u32>,
            lp: f64,
        }
        let mut beams = vec![Hyp {
            h: source.init,
            tokens: Vec::new(),
            lp: 0.0,
        }];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        for step in 0..self.config.max_response_len {
            let mut cands: Vec<(f64, usize, u32, Var)> = Vec::new();
            for (bi, hyp) in beams.iter().enumerate() {
                let prev = hyp.tokens.last().copied().unwrap_or(GO_ID);
                let (h, ld) = self.response_step(tape, source, keys, dv, hyp.h, prev);
                let lv = tape.value(ld);
                let mut order: Vec<usize> = (0..lv.len()).filter(|&w| lv[w] > f64::NEG_INFINITY).collect();
                order.sort_by(|&a, &b| lv[b].total_cmp(&lv[a]).then(a.cmp(&b)));
                for &w in order.iter().take(width) {
                    cands.push((hyp.lp + lv[w], bi, w as u32, h));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (lp, bi, w, h) in cands.into_iter().take(width) {
                let mut tokens = beams[bi].tokens.clone();
                if w == EOS_ID {
                    finished.push((tokens, lp));
                } else {
                    tokens.push(w);
                    if step + 1 == self.config.max_response_len {
                        finished.push((tokens, lp));
                    } else {
                        next.push(Hyp { h, tokens, lp });
                    }
                }
            }
            beams = next;
            let best_done = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
            let best_open = beams.iter().map(|b| b.lp).fold(f64::NEG_INFINITY, f64::max);
            if beams.is_empty() || (finished.len() >= width && best_done >= best_open) {
                break;
            }
        }
        let best = finished
            .into_iter()
            .fold(None::<(Vec<u32>, f64)>, |acc, f| match acc {
                Some(a) if a.1 >= f.1 => Some(a),
                _ => Some(f),
            });
        match best {
            Some(b) if b.1 >= greedy.1 => b,
            _ => greedy,
        }
    }

    /// Database bucket for belief `b` and the domain it was looked up in.
    pub fn db_lookup(
        &self,
        db: &EntityDb,
        dialog_domains: &[String],
        turn_domain: Option<&str>,
        prev: &BeliefState,
        b: &BeliefState,
    ) -> (DbMatchVector, Option<String>) {
        match active_domain(&self.schema, dialog_domains, turn_domain, prev, b) {
            Some(d) => (match_vector(db.count(&self.schema, b, &d)), Some(d)),
            None => (match_vector(0), None),
        }
    }

    /// Run one dialog turn by turn on `tape` under `opts.objective`.
    pub fn run_dialog(&self, tape: &mut Tape, dialog: &Dialog, db: &EntityDb, opts: RunOptions) -> Result<DialogRun> {
        if dialog.turns.is_empty() {
            return Err(Error::EmptySequence);
        }
        let RunOptions {
            objective,
            train,
            replay,
            rng,
        } = opts;
        let mut ctx = Ctx { train, rng };
        let needs_label = matches!(objective, Objective::Supervised | Objective::TeacherForced);
        let alpha = self.config.kl_weight;
        let mut prev_path = BeliefPath::plain(self.empty_path());
        let mut prev_belief = BeliefState::empty(&self.schema);
        let mut prev_response: Vec<u32> = Vec::new();
        let mut turns = Vec::with_capacity(dialog.turns.len());
        let mut losses = Vec::new();
        for (ti, turn) in dialog.turns.iter().enumerate() {
            let gold = match (&turn.gold_belief, needs_label) {
                (Some(b), _) => Some(b),
                (None, true) => {
                    return Err(Error::MissingLabel(format!("dialog {} turn {ti}", dialog.id)));
                }
                (None, false) => None,
            };
            let ctx_ids = self.context_ids(&prev_response, &turn.user);
            let resp_ids = self.response_ids(&turn.response_delex);
            let eval = matches!(objective, Objective::Eval(_) | Objective::TeacherForced);
            let turn_domain = if eval { None } else { turn.domain.as_deref() };
            let replay_path = replay.map(|r| r[ti].as_slice());

            let prior_src = self.belief_source(tape, &self.prior, &ctx_ids, &prev_path, None)?;
            let mut run = TurnRun {
                belief: BeliefState::empty(&self.schema),
                belief_tokens: Vec::new(),
                bucket: match_vector(0),
                domain: None,
                response: Vec::new(),
                belief_log_prob: 0.0,
                response_log_prob: 0.0,
                posterior_log_prob: 0.0,
                kl: 0.0,
                loss: 0.0,
            };
            let path: BeliefPath = match objective {
                Objective::Supervised => {
                    let gold_path = self.gold_path(gold.expect("label checked"));
                    let p = self.belief_graph(tape, &self.prior, &prior_src, Choice::Follow(&gold_path), false, &mut ctx)?;
                    let post_src = self.belief_source(tape, &self.posterior, &ctx_ids, &prev_path, Some(&resp_ids))?;
                    let q = self.belief_graph(tape, &self.posterior, &post_src, Choice::Follow(&gold_path), false, &mut ctx)?;
                    run.belief_log_prob = tape.scalar(p.log_prob);
                    run.posterior_log_prob = tape.scalar(q.log_prob);
                    let both = tape.add(p.log_prob, q.log_prob);
                    losses.push(tape.scale(both, -1.0));
                    BeliefPath::plain(gold_path)
                }
                Objective::Unsupervised => {
                    let post_src = self.belief_source(tape, &self.posterior, &ctx_ids, &prev_path, Some(&resp_ids))?;
                    let choice = match replay_path {
                        Some(p) => Choice::Follow(p),
                        None => Choice::Sample,
                    };
                    let q = self.belief_graph(tape, &self.posterior, &post_src, choice, true, &mut ctx)?;
                    let p = self.belief_graph(tape, &self.prior, &prior_src, Choice::Follow(&q.path.tokens), false, &mut ctx)?;
                    run.belief_log_prob = tape.scalar(p.log_prob);
                    run.posterior_log_prob = tape.scalar(q.log_prob);
                    let kl = match self.config.kl_estimator {
                        KlEstimator::Exact => {
                            let mut terms = Vec::new();
                            for (qs, ps) in q.path.dists.iter().zip(&p.path.dists) {
                                for (lq, lp) in qs.iter().zip(ps) {
                                    if let (Some(lq), Some(lp)) = (lq, lp) {
                                        terms.push(tape.kl(*lq, *lp));
                                    }
                                }
                            }
                            tape.sum(&terms)
                        }
                        KlEstimator::LogRatio => {
                            let neg = tape.scale(p.log_prob, -1.0);
                            tape.add(q.log_prob, neg)
                        }
                    };
                    run.kl = tape.scalar(kl);
                    let w = tape.scale(kl, alpha);
                    losses.push(w);
                    q.path
                }
                Objective::SelfTrain => {
                    let choice = match replay_path {
                        Some(p) => Choice::Follow(p),
                        None => Choice::Greedy,
                    };
                    let p = self.belief_graph(tape, &self.prior, &prior_src, choice, true, &mut ctx)?;
                    run.belief_log_prob = tape.scalar(p.log_prob);
                    p.path
                }
                Objective::Eval(_) | Objective::TeacherForced => {
                    let p = self.belief_graph(tape, &self.prior, &prior_src, Choice::Greedy, false, &mut ctx)?;
                    run.belief_log_prob = tape.scalar(p.log_prob);
                    BeliefPath::plain(p.path.tokens)
                }
            };
            let belief = self.path_belief(&path.tokens);
            let (bucket, domain) = self.db_lookup(db, &dialog.domains, turn_domain, &prev_belief, &belief);
            let rsrc = self.response_source(tape, &ctx_ids, &path)?;
            match objective {
                Objective::Eval(_) | Objective::TeacherForced => {
                    let (resp, lp) = match mode_of(objective) {
                        DecodeMode::Beam { width } => self.response_beam(tape, &rsrc, bucket, width),
                        DecodeMode::Greedy => self.response_greedy(tape, &rsrc, bucket),
                    };
                    run.response = resp;
                    run.response_log_prob = lp;
                }
                _ => {
                    let (_, lp) = self.response_follow(tape, &rsrc, bucket, &resp_ids)?;
                    run.response_log_prob = tape.scalar(lp);
                    losses.push(tape.scale(lp, -1.0));
                    run.response = resp_ids[..resp_ids.len() - 1].to_vec();
                }
            }
            run.loss = match objective {
                Objective::Supervised => -(run.belief_log_prob + run.posterior_log_prob + run.response_log_prob),
                Objective::Unsupervised => -run.response_log_prob + alpha * run.kl,
                Objective::SelfTrain => -run.response_log_prob,
                _ => 0.0,
            };
            run.belief = belief.clone();
            run.belief_tokens = path.tokens.clone();
            run.bucket = bucket;
            run.domain = domain;

            prev_response = match objective {
                Objective::Eval(_) => run.response.clone(),
                _ => resp_ids[..resp_ids.len() - 1].to_vec(),
            };
            match (objective, gold) {
                (Objective::TeacherForced, Some(g)) => {
                    prev_path = BeliefPath::plain(self.gold_path(g));
                    prev_belief = g.clone();
                }
                _ => {
                    prev_path = path;
                    prev_belief = belief;
                }
            }
            turns.push(run);
        }
        let loss = (!losses.is_empty()).then(|| tape.sum(&losses));
        Ok(DialogRun { turns, loss })
    }

    /// Serialized ids of a belief.
    pub fn belief_ids(&self, b: &BeliefState) -> Vec<u32> {
        self.vocab.encode(&serialize_belief(b, &self.schema))
    }
}

fn mode_of(o: Objective) -> DecodeMode {
    match o {
        Objective::Eval(m) => m,
        _ => DecodeMode::Greedy,
    }
}
