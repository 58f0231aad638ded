//! Per-call model operations: belief and response decoding, scoring, straight-through
//! sampling and dialog unrolling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{BeliefPath, Choice, Ctx, Objective, RunOptions, TurnRun};
use super::{DecodeMode, Labes};
use crate::corpus::{fill_from_entity, join, BeliefState, Dialog, GO_ID};
use crate::error::{Error, Result};
use crate::kb::{DbMatchVector, EntityDb};
use crate::neural::{argmax, ParamId, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Network {
    Prior,
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BeliefMode<'a> {
    Greedy,
    Sample,
    /// Score the given per-slot token paths (each ending in the slot's end-of-value id).
    Force(&'a [Vec<u32>]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSample {
    pub belief: BeliefState,
    pub tokens: Vec<Vec<u32>>,
    /// Log-probability of each emitted token; forced terminators are absent.
    pub token_log_probs: Vec<Vec<f64>>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResponseMode<'a> {
    Greedy,
    Beam { width: usize },
    /// Score the given ids (ending in the end symbol).
    Force(&'a [u32]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseOutput {
    /// Ids without the end symbol.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnrollMode {
    /// Own beliefs and own previous responses.
    Eval(DecodeMode),
    /// Greedy beliefs, gold previous beliefs.
    TeacherForced,
    /// Posterior samples chained over turns, gold responses.
    PosteriorSample,
}

/// One decoded turn in machine-readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub dialog_id: String,
    pub turn: usize,
    pub belief: std::collections::BTreeMap<String, String>,
    pub db_bucket: usize,
    pub response_delex: String,
    pub response_lex: String,
}

/// Straight-through draw from `logdist`: returns the token (argmax when `greedy`,
/// else a sample) and its embedding, whose gradient flows into the probabilities.
pub fn straight_through(tape: &mut Tape, emb: ParamId, logdist: Var, greedy: bool, rng: &mut ChaCha8Rng) -> (u32, Var) {
    let lp = tape.value(logdist);
    let tok = if greedy {
        argmax(lp) as u32
    } else {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = argmax(lp);
        for (i, &l) in lp.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            acc += l.exp();
            pick = i;
            if u < acc {
                break;
            }
        }
        pick as u32
    };
    let e = tape.st_embed(emb, logdist, tok);
    (tok, e)
}

impl Labes {
    /// Context ids `r_{t-1} <sep> u_t`.
    pub fn context(&self, prev_response: &[String], user: &[String]) -> Vec<u32> {
        self.context_ids(&self.vocab.encode(prev_response), user)
    }

    /// Per-slot token path of a belief.
    pub fn belief_path(&self, b: &BeliefState) -> Vec<Vec<u32>> {
        self.gold_path(b)
    }

    /// Decode or score a belief with the prior (`response` = None) or the
    /// posterior (`response` = delexicalized ids ending in the end symbol).
    pub fn decode_belief(
        &self,
        net: Network,
        prev: &BeliefState,
        ctx: &[u32],
        response: Option<&[u32]>,
        mode: BeliefMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<BeliefSample> {
        let (bn, resp) = match net {
            Network::Prior => (&self.prior, None),
            Network::Posterior => (&self.posterior, Some(response.ok_or(Error::MissingResponse)?)),
        };
        if net == Network::Prior && response.is_some() {
            return Err(Error::UnexpectedResponse);
        }
        let mut tape = Tape::new(&self.params);
        let prev = BeliefPath {
            tokens: self.gold_path(prev),
            dists: self.gold_path(prev).iter().map(|s| vec![None; s.len()]).collect(),
        };
        let src = self.belief_source(&mut tape, bn, ctx, &prev, resp)?;
        let choice = match mode {
            BeliefMode::Greedy => Choice::Greedy,
            BeliefMode::Sample => Choice::Sample,
            BeliefMode::Force(p) => {
                if p.len() != self.num_slots() {
                    return Err(Error::LengthMismatch(self.num_slots(), p.len()));
                }
                Choice::Follow(p)
            }
        };
        let mut ctx = Ctx { train: false, rng };
        let g = self.belief_graph(&mut tape, bn, &src, choice, false, &mut ctx)?;
        let token_log_probs = g
            .path
            .tokens
            .iter()
            .zip(&g.path.dists)
            .map(|(ts, ds)| {
                ts.iter()
                    .zip(ds)
                    .filter_map(|(&t, d)| d.map(|d| tape.value(d)[t as usize]))
                    .collect()
            })
            .collect();
        Ok(BeliefSample {
            belief: self.path_belief(&g.path.tokens),
            log_prob: tape.scalar(g.log_prob),
            tokens: g.path.tokens,
            token_log_probs,
        })
    }

    /// Decode or score a response given context ids, belief and database bucket.
    pub fn decode_response(&self, ctx: &[u32], belief: &BeliefState, d: DbMatchVector, mode: ResponseMode) -> Result<ResponseOutput> {
        let mut tape = Tape::new(&self.params);
        let path = BeliefPath {
            tokens: self.gold_path(belief),
            dists: self.gold_path(belief).iter().map(|s| vec![None; s.len()]).collect(),
        };
        let src = self.response_source(&mut tape, ctx, &path)?;
        let (tokens, log_prob) = match mode {
            ResponseMode::Greedy => self.response_greedy(&mut tape, &src, d),
            ResponseMode::Beam { width } => self.response_beam(&mut tape, &src, d, width.max(1)),
            ResponseMode::Force(ids) => {
                if ids.last() != Some(&crate::corpus::EOS_ID) {
                    return Err(Error::MissingTerminator("response".into()));
                }
                let (_, lp) = self.response_follow(&mut tape, &src, d, ids)?;
                (ids[..ids.len() - 1].to_vec(), tape.scalar(lp))
            }
        };
        Ok(ResponseOutput { tokens, log_prob })
    }

    /// Log-distribution over the next response token after `prefix`.
    pub fn response_next(&self, ctx: &[u32], belief: &BeliefState, d: DbMatchVector, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let path = BeliefPath {
            tokens: self.gold_path(belief),
            dists: self.gold_path(belief).iter().map(|s| vec![None; s.len()]).collect(),
        };
        let src = self.response_source(&mut tape, ctx, &path)?;
        let keys = self.response.attn.keys(&mut tape, src.states);
        let dv = tape.constant(d.one_hot().to_vec());
        let mut h = src.init;
        let mut prev = GO_ID;
        for &t in prefix {
            let (h2, _) = self.response_step(&mut tape, &src, keys, dv, h, prev);
            h = h2;
            prev = t;
        }
        let (_, ld) = self.response_step(&mut tape, &src, keys, dv, h, prev);
        Ok(tape.value(ld).to_vec())
    }

    /// Run a dialog without recording gradients.
    pub fn unroll(&self, dialog: &Dialog, db: &EntityDb, mode: UnrollMode, rng: &mut ChaCha8Rng) -> Result<Vec<TurnRun>> {
        let objective = match mode {
            UnrollMode::Eval(m) => Objective::Eval(m),
            UnrollMode::TeacherForced => Objective::TeacherForced,
            UnrollMode::PosteriorSample => Objective::Unsupervised,
        };
        let mut tape = Tape::new(&self.params);
        let run = self.run_dialog(
            &mut tape,
            dialog,
            db,
            RunOptions {
                objective,
                train: false,
                replay: None,
                rng,
            },
        )?;
        Ok(run.turns)
    }

    /// End-to-end evaluation decode with the configured decoding mode.
    pub fn unroll_eval(&self, dialog: &Dialog, db: &EntityDb) -> Result<Vec<TurnRun>> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.unroll(dialog, db, UnrollMode::Eval(self.config.decode), &mut rng)
    }

    /// Lexicalized response: placeholders filled from the first entity matching
    /// the turn's belief in its active domain.
    pub fn lexicalize(&self, db: &EntityDb, turn: &TurnRun) -> Vec<String> {
        let delex = self.vocab.decode(&turn.response);
        let entity = turn
            .domain
            .as_deref()
            .and_then(|d| db.query(&self.schema, &turn.belief, d).into_iter().next());
        fill_from_entity(&delex, entity)
    }

    pub fn decode_records(&self, dialog: &Dialog, db: &EntityDb, turns: &[TurnRun]) -> Vec<DecodeRecord> {
        turns
            .iter()
            .enumerate()
            .map(|(i, t)| DecodeRecord {
                dialog_id: dialog.id.clone(),
                turn: i,
                belief: t.belief.to_map(&self.schema),
                db_bucket: t.bucket.bucket(),
                response_delex: join(&self.vocab.decode(&t.response)),
                response_lex: join(&self.lexicalize(db, t)),
            })
            .collect()
    }
}
