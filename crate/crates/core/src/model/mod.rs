//! The latent belief state dialog model: prior belief decoder p(b_t|b_{t-1},c_t),
//! posterior belief decoder q(b_t|b_{t-1},c_t,r_t), response decoder
//! p(r_t|c_t,b_t,d_t), straight-through sampling and dialog unrolling.

mod api;
mod graph;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{eov_token, Schema, Vocabulary, DONTCARE, GO_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::kb::DB_BUCKETS;
use crate::neural::{checkpoint, Attention, BiGru, CopyHead, GruCell, ParamId, ParameterSet};

pub use api::*;
pub use graph::{BeliefPath, DialogRun, Objective, RunOptions, TurnRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
}

/// Estimator of the sequence-level KL in the unsupervised objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Exact token-level KL summed along the posterior sample path.
    Exact,
    /// Single-sample log q - log p of the sampled path.
    LogRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-direction encoder width; decoder states are twice this.
    pub hidden_size: usize,
    pub embedding_size: usize,
    /// Additive attention width; 0 means `hidden_size`.
    pub attention_size: usize,
    /// Filled from the vocabulary at construction.
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub kl_weight: f64,
    pub max_value_len: usize,
    pub max_response_len: usize,
    pub decode: DecodeMode,
    pub kl_estimator: KlEstimator,
    pub share_posterior_embeddings: bool,
    /// Limit belief outputs to schema value-inventory tokens, `dontcare` and the
    /// slot's end-of-value symbol.
    pub restrict_belief_tokens: bool,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_size: 100,
            embedding_size: 50,
            attention_size: 0,
            vocab_size: 0,
            dropout_rate: 0.35,
            kl_weight: 0.5,
            max_value_len: 8,
            max_response_len: 40,
            decode: DecodeMode::Greedy,
            kl_estimator: KlEstimator::Exact,
            share_posterior_embeddings: false,
            restrict_belief_tokens: false,
            init_scale: 0.08,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.embedding_size == 0 {
            return Err(Error::Config("hidden_size and embedding_size must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config(format!("kl_weight {} must be >= 0", self.kl_weight)));
        }
        if self.max_value_len == 0 || self.max_response_len == 0 {
            return Err(Error::Config("length caps must be > 0".into()));
        }
        if let DecodeMode::Beam { width: 0 } = self.decode {
            return Err(Error::Config("beam width must be > 0".into()));
        }
        Ok(())
    }

    fn attn(&self) -> usize {
        if self.attention_size == 0 {
            self.hidden_size
        } else {
            self.attention_size
        }
    }
}

/// Parameter handles of one belief decoder (prior or posterior).
#[derive(Debug, Clone)]
pub(crate) struct BeliefNet {
    pub(crate) emb: ParamId,
    pub(crate) ctx_enc: BiGru,
    pub(crate) prev_enc: BiGru,
    pub(crate) resp_enc: Option<BiGru>,
    pub(crate) slot_w: ParamId,
    pub(crate) slot_b: ParamId,
    pub(crate) attn: Attention,
    pub(crate) cell: GruCell,
    pub(crate) head: CopyHead,
}

#[derive(Debug, Clone)]
pub(crate) struct ResponseNet {
    pub(crate) attn: Attention,
    pub(crate) cell: GruCell,
    pub(crate) head: CopyHead,
}

/// Per-slot constants.
#[derive(Debug, Clone)]
pub(crate) struct SlotInfo {
    pub(crate) domain_tok: u32,
    pub(crate) slot_tok: u32,
    pub(crate) eov: u32,
    pub(crate) mask: Arc<[bool]>,
}

/// A complete model: configuration, schema, vocabulary and parameters for both
/// the generative network θ (`prior.*`) and the inference network φ (`posterior.*`).
#[derive(Debug, Clone)]
pub struct Labes {
    pub config: ModelConfig,
    pub schema: Schema,
    pub vocab: Vocabulary,
    pub params: ParameterSet,
    pub(crate) prior: BeliefNet,
    pub(crate) posterior: BeliefNet,
    pub(crate) response: ResponseNet,
    pub(crate) slots: Vec<SlotInfo>,
    pub(crate) response_mask: Arc<[bool]>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    schema: Schema,
    vocab: Vocabulary,
}

fn belief_net(
    ps: &mut ParameterSet,
    prefix: &str,
    cfg: &ModelConfig,
    shared_emb: Option<ParamId>,
    with_response: bool,
    rng: &mut ChaCha8Rng,
) -> BeliefNet {
    let (v, e, h, s) = (cfg.vocab_size, cfg.embedding_size, cfg.hidden_size, cfg.init_scale);
    let d = 2 * h;
    let emb = shared_emb.unwrap_or_else(|| ps.add_uniform(&format!("{prefix}.emb"), v, e, s, rng));
    let ctx_enc = BiGru::new(ps, &format!("{prefix}.ctx_enc"), e, h, s, rng);
    let prev_enc = BiGru::new(ps, &format!("{prefix}.belief_enc"), e, h, s, rng);
    let resp_enc = with_response.then(|| BiGru::new(ps, &format!("{prefix}.resp_enc"), e, h, s, rng));
    let slot_w = ps.add_uniform(&format!("{prefix}.slot_proj.w"), e, 2 * e, s, rng);
    let slot_b = ps.add_zeros(&format!("{prefix}.slot_proj.b"), 1, e);
    let attn = Attention::new(ps, &format!("{prefix}.bdec.attn"), d, d, cfg.attn(), s, rng);
    let cell = GruCell::new(ps, &format!("{prefix}.bdec.gru"), d + e, d, s, rng);
    let head = CopyHead::new(ps, &format!("{prefix}.bdec.out"), v, d, d + e, s, rng);
    BeliefNet {
        emb,
        ctx_enc,
        prev_enc,
        resp_enc,
        slot_w,
        slot_b,
        attn,
        cell,
        head,
    }
}

impl Labes {
    /// Fresh model with uniform(-init_scale, init_scale) parameters drawn from `seed`.
    pub fn new(mut config: ModelConfig, schema: Schema, vocab: Vocabulary, seed: u64) -> Result<Labes> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        let prior = belief_net(&mut ps, "prior", &config, None, false, &mut rng);
        let shared = config.share_posterior_embeddings.then_some(prior.emb);
        let posterior = belief_net(&mut ps, "posterior", &config, shared, true, &mut rng);
        let (e, h, s) = (config.embedding_size, config.hidden_size, config.init_scale);
        let d = 2 * h;
        let response = ResponseNet {
            attn: Attention::new(&mut ps, "prior.rdec.attn", d, d, config.attn(), s, &mut rng),
            cell: GruCell::new(&mut ps, "prior.rdec.gru", d + e + DB_BUCKETS, d, s, &mut rng),
            head: CopyHead::new(&mut ps, "prior.rdec.out", config.vocab_size, d, 2 * d + DB_BUCKETS, s, &mut rng),
        };
        let mut model = Labes {
            config,
            schema,
            vocab,
            params: ps,
            prior,
            posterior,
            response,
            slots: Vec::new(),
            response_mask: Arc::from(Vec::new()),
        };
        model.build_tables()?;
        Ok(model)
    }

    fn build_tables(&mut self) -> Result<()> {
        let v = self.vocab.len();
        let eovs: Vec<u32> = self
            .schema
            .slots()
            .iter()
            .map(|k| {
                self.vocab
                    .get(&eov_token(&k.to_string()))
                    .ok_or_else(|| Error::Config(format!("vocabulary lacks end-of-value symbol for `{k}`")))
            })
            .collect::<Result<_>>()?;
        let mut resp = vec![true; v];
        resp[PAD_ID as usize] = false;
        resp[GO_ID as usize] = false;
        for &e in &eovs {
            resp[e as usize] = false;
        }
        self.response_mask = Arc::from(resp);
        let mut slots = Vec::new();
        for (i, key) in self.schema.slots().iter().enumerate() {
            let lookup = |t: &str| {
                self.vocab
                    .get(t)
                    .ok_or_else(|| Error::Config(format!("vocabulary lacks name token `{t}`")))
            };
            let mut mask = if self.config.restrict_belief_tokens {
                let mut m = vec![false; v];
                let ds = self.schema.domain(&key.domain).expect("slot domain in schema");
                for value in ds.values.get(&key.slot).into_iter().flatten() {
                    for tok in crate::corpus::tokenize(value) {
                        if let Some(id) = self.vocab.get(&tok) {
                            m[id as usize] = true;
                        }
                    }
                }
                if let Some(id) = self.vocab.get(DONTCARE) {
                    m[id as usize] = true;
                }
                m
            } else {
                let mut m = vec![true; v];
                m[PAD_ID as usize] = false;
                m[GO_ID as usize] = false;
                for &e in &eovs {
                    m[e as usize] = false;
                }
                m
            };
            mask[eovs[i] as usize] = true;
            slots.push(SlotInfo {
                domain_tok: lookup(&key.domain)?,
                slot_tok: lookup(&key.slot)?,
                eov: eovs[i],
                mask: Arc::from(mask),
            });
        }
        self.slots = slots;
        Ok(())
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Allowed belief-output token ids for `slot`.
    pub fn belief_support(&self, slot: usize) -> Vec<u32> {
        self.slots[slot]
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Overwrite embedding rows of vocabulary words found in a GloVe text file.
    /// Returns the number of rows replaced per embedding table.
    pub fn apply_glove(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let mut ids = vec![self.prior.emb];
        if self.posterior.emb != self.prior.emb {
            ids.push(self.posterior.emb);
        }
        let mut hits = 0;
        for id in ids {
            hits = crate::neural::glove::apply_glove(path.as_ref(), &self.vocab, &mut self.params, id)?;
        }
        Ok(hits)
    }

    pub fn eov_id(&self, slot: usize) -> u32 {
        self.slots[slot].eov
    }

    pub fn response_support(&self) -> Vec<u32> {
        self.response_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub(crate) fn header(&self) -> serde_json::Value {
        serde_json::to_value(CheckpointHeader {
            config: self.config.clone(),
            schema: self.schema.clone(),
            vocab: self.vocab.clone(),
        })
        .expect("checkpoint header serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        checkpoint::write_archive(&mut buf, &self.header(), &self.params).expect("in-memory write");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Labes> {
        let (header, params) = checkpoint::read_archive(bytes)?;
        Self::from_parts(header, params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Labes> {
        let (header, params) = checkpoint::load(path)?;
        Self::from_parts(header, params)
    }

    pub(crate) fn from_parts(header: serde_json::Value, params: ParameterSet) -> Result<Labes> {
        let h: CheckpointHeader =
            serde_json::from_value(header).map_err(|e| Error::json("checkpoint header", e))?;
        let mut model = Labes::new(h.config, h.schema, h.vocab, 0)?;
        checkpoint::assign_by_name(&mut model.params, &params)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "archive has {} arrays, model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    /// Slots of `other` that differ from this model's schema, for compatibility errors.
    pub fn schema_mismatch(&self, other: &Schema) -> Vec<String> {
        let mine: Vec<String> = self.schema.slots().iter().map(|k| k.to_string()).collect();
        let theirs: Vec<String> = other.slots().iter().map(|k| k.to_string()).collect();
        let mut out: Vec<String> = theirs.iter().filter(|k| !mine.contains(k)).cloned().collect();
        out.extend(mine.iter().filter(|k| !theirs.contains(k)).cloned());
        out
    }

    /// Ids of parameters belonging to the inference network.
    pub fn is_posterior_param(&self, name: &str) -> bool {
        name.starts_with("posterior.")
    }
}

#[cfg(test)]
mod tests;
