use std::sync::Arc;

use rand::Rng;

use super::params::{ParamId, ParameterSet};
use super::tape::{copy_log_dist, GruIds, Tape, Var};
use crate::error::{Error, Result};

/// Gated recurrent cell with input width `input` and state width `hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    pub ids: GruIds,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(ps: &mut ParameterSet, name: &str, input: usize, hidden: usize, scale: f64, rng: &mut impl Rng) -> GruCell {
        let ids = GruIds {
            wx: ps.add_uniform(&format!("{name}.wx"), 3 * hidden, input, scale, rng),
            wh: ps.add_uniform(&format!("{name}.wh"), 3 * hidden, hidden, scale, rng),
            bx: ps.add_zeros(&format!("{name}.bx"), 1, 3 * hidden),
            bh: ps.add_zeros(&format!("{name}.bh"), 1, 3 * hidden),
        };
        GruCell { ids, input, hidden }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        tape.gru(self.ids, x, h)
    }
}

/// Encoder output: per-position states (`n x 2H`) and the final state used to
/// seed decoders (forward final ∘ backward final).
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub states: Var,
    pub last: Var,
    pub len: usize,
}

/// Bidirectional GRU encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

impl BiGru {
    pub fn new(ps: &mut ParameterSet, name: &str, input: usize, hidden: usize, scale: f64, rng: &mut impl Rng) -> BiGru {
        BiGru {
            fwd: GruCell::new(ps, &format!("{name}.fwd"), input, hidden, scale, rng),
            bwd: GruCell::new(ps, &format!("{name}.bwd"), input, hidden, scale, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    pub fn encode(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Encoded> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        let mut h = tape.zeros(self.fwd.hidden);
        let mut fwd = Vec::with_capacity(n);
        for &x in inputs {
            h = self.fwd.step(tape, x, h);
            fwd.push(h);
        }
        let mut h = tape.zeros(self.bwd.hidden);
        let mut bwd = vec![h; n];
        for i in (0..n).rev() {
            h = self.bwd.step(tape, inputs[i], h);
            bwd[i] = h;
        }
        let rows: Vec<Var> = (0..n).map(|i| tape.concat(&[fwd[i], bwd[i]])).collect();
        let states = tape.stack_rows(&rows);
        let last = tape.concat(&[fwd[n - 1], bwd[0]]);
        Ok(Encoded { states, last, len: n })
    }
}

/// Additive (concat-tanh-project) attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub w_key: ParamId,
    pub w_query: ParamId,
    pub b_query: ParamId,
    pub v: ParamId,
}

impl Attention {
    pub fn new(
        ps: &mut ParameterSet,
        name: &str,
        key_width: usize,
        query_width: usize,
        attn_width: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Attention {
        Attention {
            w_key: ps.add_uniform(&format!("{name}.w_key"), attn_width, key_width, scale, rng),
            w_query: ps.add_uniform(&format!("{name}.w_query"), attn_width, query_width, scale, rng),
            b_query: ps.add_zeros(&format!("{name}.b_query"), 1, attn_width),
            v: ps.add_uniform(&format!("{name}.v"), 1, attn_width, scale, rng),
        }
    }

    /// Key projections, computed once per source sequence.
    pub fn keys(&self, tape: &mut Tape, enc: Var) -> Var {
        tape.linear_rows(self.w_key, None, enc)
    }

    pub fn attend(&self, tape: &mut Tape, enc: Var, keys: Var, query: Var) -> Var {
        let q = tape.linear(self.w_query, Some(self.b_query), query);
        tape.attention(enc, keys, q, self.v)
    }
}

/// Generative and copy score projections feeding the copy-augmented distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyHead {
    pub w_gen: ParamId,
    pub w_cp: ParamId,
}

impl CopyHead {
    pub fn new(
        ps: &mut ParameterSet,
        name: &str,
        vocab: usize,
        source_width: usize,
        feature_width: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> CopyHead {
        CopyHead {
            w_gen: ps.add_uniform(&format!("{name}.w_gen"), vocab, feature_width, scale, rng),
            w_cp: ps.add_uniform(&format!("{name}.w_cp"), source_width, feature_width, scale, rng),
        }
    }

    /// log p(w) over the vocabulary with copy mass folded in by surface form.
    pub fn log_dist(&self, tape: &mut Tape, hhat: Var, source_states: Var, src: Arc<[u32]>, mask: Arc<[bool]>) -> Var {
        let gen = tape.linear(self.w_gen, None, hhat);
        let proj = tape.linear(self.w_cp, None, hhat);
        let copy = tape.matvec(source_states, proj);
        tape.copy_log_dist(gen, copy, src, mask)
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else 1/(1-rate).
pub fn dropout_mask(n: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn dropout(x: &[f64], rate: f64, mode: Mode, rng: &mut impl Rng) -> Vec<f64> {
    if mode == Mode::Eval || rate == 0.0 {
        return x.to_vec();
    }
    x.iter().zip(dropout_mask(x.len(), rate, rng)).map(|(a, m)| a * m).collect()
}

/// Per-position hidden vectors of one encoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence {
    pub width: usize,
    pub states: Vec<Vec<f64>>,
}

impl HiddenSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn flat(&self) -> Vec<f64> {
        self.states.iter().flatten().copied().collect()
    }
}

/// Encode `tokens` with embedding table `embed`.
pub fn bigru_encode(params: &ParameterSet, enc: &BiGru, embed: ParamId, tokens: &[u32]) -> Result<HiddenSequence> {
    let mut tape = Tape::new(params);
    let inputs: Vec<Var> = tokens.iter().map(|&t| tape.row_of(embed, t as usize)).collect();
    let out = enc.encode(&mut tape, &inputs)?;
    let width = enc.width();
    Ok(HiddenSequence {
        width,
        states: (0..tokens.len()).map(|i| tape.row(out.states, i).to_vec()).collect(),
    })
}

/// Attention context for `query` over `enc`, with the weights.
pub fn attention(params: &ParameterSet, attn: &Attention, enc: &HiddenSequence, query: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new(params);
    let e = tape.constant_matrix(enc.flat(), enc.len(), enc.width);
    let keys = attn.keys(&mut tape, e);
    let q = tape.constant(query.to_vec());
    let ctx = attn.attend(&mut tape, e, keys, q);
    let w = tape.attention_weights(ctx).expect("attention node").to_vec();
    (tape.value(ctx).to_vec(), w)
}

/// One decoder recurrence on `attention_context ∘ prev_token_embedding`.
pub fn decode_step(
    params: &ParameterSet,
    cell: &GruCell,
    prev_token_embedding: &[f64],
    attention_context: &[f64],
    prev_state: &[f64],
) -> Vec<f64> {
    let mut tape = Tape::new(params);
    let mut input = attention_context.to_vec();
    input.extend_from_slice(prev_token_embedding);
    let x = tape.constant(input);
    let h = tape.constant(prev_state.to_vec());
    let out = cell.step(&mut tape, x, h);
    tape.value(out).to_vec()
}

/// Normalized distribution over vocabulary tokens with copy mass from source
/// positions folded in by surface form.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedTokenDistribution {
    pub probs: Vec<f64>,
    /// ψ_cp per source position.
    pub copy_scores: Vec<f64>,
    /// exp(ψ_cp_j) / Z per source position.
    pub copy_probs: Vec<f64>,
    pub source: Vec<u32>,
}

impl ExtendedTokenDistribution {
    pub fn from_scores(gen: &[f64], copy: &[f64], source: &[u32], mask: &[bool]) -> ExtendedTokenDistribution {
        let (logp, log_z) = copy_log_dist(gen, copy, source, mask);
        ExtendedTokenDistribution {
            probs: logp.iter().map(|l| l.exp()).collect(),
            copy_scores: copy.to_vec(),
            copy_probs: copy
                .iter()
                .zip(source)
                .map(|(c, &w)| if mask[w as usize] { (c - log_z).exp() } else { 0.0 })
                .collect(),
            source: source.to_vec(),
        }
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn argmax(&self) -> u32 {
        argmax(&self.probs) as u32
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Copy-augmented distribution for augmented state `h_hat` over `source_tokens`
/// whose encoder states are `source_states`.
pub fn copy_distribution(
    params: &ParameterSet,
    head: &CopyHead,
    h_hat: &[f64],
    source_tokens: &[u32],
    source_states: &HiddenSequence,
    mask: &[bool],
) -> ExtendedTokenDistribution {
    let mut tape = Tape::new(params);
    let h = tape.constant(h_hat.to_vec());
    let gen = tape.linear(head.w_gen, None, h);
    let copy = if source_tokens.is_empty() {
        Vec::new()
    } else {
        let s = tape.constant_matrix(source_states.flat(), source_states.len(), source_states.width);
        let proj = tape.linear(head.w_cp, None, h);
        let c = tape.matvec(s, proj);
        tape.value(c).to_vec()
    };
    ExtendedTokenDistribution::from_scores(tape.value(gen), &copy, source_tokens, mask)
}
