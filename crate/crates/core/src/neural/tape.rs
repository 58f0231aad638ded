//! Reverse-mode differentiation over a flat tape of vector/matrix nodes.
//!
//! Nodes hold row-major values; vectors are `1 x n`. Parameters are read from a
//! borrowed [`ParameterSet`] and their gradients accumulate into a [`Gradients`]
//! buffer on [`Tape::backward`]. Recurrent cells, attention and the
//! copy-augmented output distribution are fused ops with hand-written backward
//! passes.

use std::sync::Arc;

use super::params::{Gradients, ParamId, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    fn ix(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum StWeights {
    OneHot(u32),
    Dense(Vec<f64>),
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Row { p: ParamId, row: usize },
    StEmbed { p: ParamId, logdist: Var, weights: StWeights },
    Linear { w: ParamId, b: Option<ParamId>, x: Var },
    LinearRows { w: ParamId, b: Option<ParamId>, x: Var },
    Gru { cell: GruIds, x: Var, h: Var, cache: Box<[f64]> },
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    MulConst { x: Var, c: Vec<f64> },
    Scale { x: Var, c: f64 },
    Sum(Vec<Var>),
    Attention { enc: Var, keys: Var, query: Var, v: ParamId, cache: Box<AttnCache> },
    MatVec { m: Var, x: Var },
    CopyLogDist { gen: Var, copy: Var, src: Arc<[u32]>, mask: Arc<[bool]>, log_z: f64 },
    Pick { x: Var, idx: usize },
    Kl { lq: Var, lp: Var },
}

#[derive(Debug)]
struct AttnCache {
    weights: Vec<f64>,
    tanh: Vec<f64>,
}

/// Parameter handles of one gated recurrent cell (gate order r, z, n).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruIds {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Straight-through bookkeeping: every ST embedding records the probability
/// vector it was built from; when `frozen` is set, the forward weights become
/// `onehot + p - p_frozen` (the relaxed surrogate used for gradient checks).
#[derive(Debug, Default, Clone)]
pub struct StTrace {
    pub recorded: Vec<Vec<f64>>,
    pub frozen: Option<Vec<Vec<f64>>>,
    cursor: usize,
}

impl StTrace {
    pub fn frozen(probs: Vec<Vec<f64>>) -> StTrace {
        StTrace {
            recorded: Vec::new(),
            frozen: Some(probs),
            cursor: 0,
        }
    }
}

pub struct Tape<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
    pub st: StTrace,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// out = W x (+ b) for W rows x cols.
fn matvec_into(out: &mut [f64], w: &[f64], cols: usize, x: &[f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// out += W^T g
fn matvec_t_into(out: &mut [f64], w: &[f64], cols: usize, g: &[f64]) {
    for (gi, row) in g.iter().zip(w.chunks_exact(cols)) {
        if *gi != 0.0 {
            axpy(out, *gi, row);
        }
    }
}

/// dW += g x^T
fn outer_into(dw: &mut [f64], cols: usize, g: &[f64], x: &[f64]) {
    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(cols)) {
        if *gi != 0.0 {
            axpy(row, *gi, x);
        }
    }
}

/// Log-probabilities of the copy-augmented distribution
/// `p(w) ∝ exp(gen_w) + Σ_{j: src_j = w} exp(copy_j)` restricted to `mask`.
/// Returns (log-probs with -inf outside the mask, log Z).
pub fn copy_log_dist(gen: &[f64], copy: &[f64], src: &[u32], mask: &[bool]) -> (Vec<f64>, f64) {
    let mut m = f64::NEG_INFINITY;
    for (w, &g) in gen.iter().enumerate() {
        if mask[w] {
            m = m.max(g);
        }
    }
    for (j, &c) in copy.iter().enumerate() {
        if mask[src[j] as usize] {
            m = m.max(c);
        }
    }
    let mut s = vec![0.0; gen.len()];
    for (w, &g) in gen.iter().enumerate() {
        if mask[w] {
            s[w] = (g - m).exp();
        }
    }
    for (j, &c) in copy.iter().enumerate() {
        let w = src[j] as usize;
        if mask[w] {
            s[w] += (c - m).exp();
        }
    }
    let z: f64 = s.iter().sum();
    let log_z = m + z.ln();
    let out = s
        .iter()
        .zip(mask)
        .map(|(&sw, &ok)| if ok { sw.ln() + m - log_z } else { f64::NEG_INFINITY })
        .collect();
    (out, log_z)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterSet) -> Tape<'p> {
        Tape {
            params,
            nodes: Vec::with_capacity(1024),
            st: StTrace::default(),
        }
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op });
        Var(self.nodes.len() as u32 - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.ix()].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.ix()];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.ix()].value[0]
    }

    pub fn row(&self, v: Var, r: usize) -> &[f64] {
        let n = &self.nodes[v.ix()];
        &n.value[r * n.cols..(r + 1) * n.cols]
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(value, 1, n, Op::Const)
    }

    pub fn constant_matrix(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push(value, rows, cols, Op::Const)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.constant(vec![0.0; n])
    }

    pub fn param(&mut self, p: ParamId) -> Var {
        let prm = self.params.get(p);
        self.push(prm.data.clone(), prm.rows, prm.cols, Op::Param(p))
    }

    /// Row lookup (embedding).
    pub fn row_of(&mut self, p: ParamId, row: usize) -> Var {
        let prm = self.params.get(p);
        let v = prm.row(row).to_vec();
        self.push(v, 1, prm.cols, Op::Row { p, row })
    }

    /// Straight-through embedding of `token`: forward is the embedding row of the
    /// discrete token, backward routes the gradient into the probability vector
    /// `exp(logdist)` as if the one-hot had been that vector.
    pub fn st_embed(&mut self, p: ParamId, logdist: Var, token: u32) -> Var {
        let probs: Vec<f64> = self.value(logdist).iter().map(|l| l.exp()).collect();
        let prm = self.params.get(p);
        let frozen = self.st.frozen.as_ref().map(|f| f[self.st.cursor].clone());
        self.st.cursor += 1;
        let weights = match frozen {
            None => StWeights::OneHot(token),
            Some(fz) => {
                let mut y: Vec<f64> = probs.iter().zip(&fz).map(|(p, q)| p - q).collect();
                y[token as usize] += 1.0;
                StWeights::Dense(y)
            }
        };
        let value = match &weights {
            StWeights::OneHot(t) => prm.row(*t as usize).to_vec(),
            StWeights::Dense(y) => {
                let mut v = vec![0.0; prm.cols];
                for (w, &yw) in y.iter().enumerate() {
                    if yw != 0.0 {
                        axpy(&mut v, yw, prm.row(w));
                    }
                }
                v
            }
        };
        self.st.recorded.push(probs);
        let cols = prm.cols;
        self.push(value, 1, cols, Op::StEmbed { p, logdist, weights })
    }

    pub fn linear(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let wp = self.params.get(w);
        let xv = self.value(x);
        debug_assert_eq!(xv.len(), wp.cols, "linear `{}` input width", wp.name);
        let mut out = match b {
            Some(b) => self.params.get(b).data.clone(),
            None => vec![0.0; wp.rows],
        };
        matvec_into(&mut out, &wp.data, wp.cols, xv);
        let rows = wp.rows;
        self.push(out, 1, rows, Op::Linear { w, b, x })
    }

    /// Row-wise linear map of an `n x k` node to `n x m`.
    pub fn linear_rows(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let wp = self.params.get(w);
        let (n, k) = self.shape(x);
        debug_assert_eq!(k, wp.cols);
        let m = wp.rows;
        let xv = self.value(x);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let o = &mut out[r * m..(r + 1) * m];
            if let Some(b) = b {
                o.copy_from_slice(&self.params.get(b).data);
            }
            matvec_into(o, &wp.data, k, &xv[r * k..(r + 1) * k]);
        }
        self.push(out, n, m, Op::LinearRows { w, b, x })
    }

    /// Gated recurrent update h' = (1-z)∘n + z∘h.
    pub fn gru(&mut self, cell: GruIds, x: Var, h: Var) -> Var {
        let wx = self.params.get(cell.wx);
        let wh = self.params.get(cell.wh);
        let d = wh.cols;
        let xv = self.value(x);
        let hv = self.value(h);
        debug_assert_eq!(xv.len(), wx.cols);
        debug_assert_eq!(hv.len(), d);
        let mut gx = self.params.get(cell.bx).data.clone();
        matvec_into(&mut gx, &wx.data, wx.cols, xv);
        let mut gh = self.params.get(cell.bh).data.clone();
        matvec_into(&mut gh, &wh.data, d, hv);
        let mut cache = vec![0.0; 4 * d];
        let mut out = vec![0.0; d];
        for i in 0..d {
            let r = sigmoid(gx[i] + gh[i]);
            let z = sigmoid(gx[d + i] + gh[d + i]);
            let hn = gh[2 * d + i];
            let n = (gx[2 * d + i] + r * hn).tanh();
            out[i] = (1.0 - z) * n + z * hv[i];
            cache[i] = r;
            cache[d + i] = z;
            cache[2 * d + i] = n;
            cache[3 * d + i] = hn;
        }
        self.push(
            out,
            1,
            d,
            Op::Gru {
                cell,
                x,
                h,
                cache: cache.into_boxed_slice(),
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        self.push(out, 1, n, Op::Concat(parts.to_vec()))
    }

    /// Vertical concatenation of nodes sharing a column count (vectors are 1-row).
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let k = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut n = 0;
        for &r in parts {
            let (rows, cols) = self.shape(r);
            debug_assert_eq!(cols, k);
            n += rows;
            out.extend_from_slice(self.value(r));
        }
        self.push(out, n, k, Op::StackRows(parts.to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        self.push(out, r, c, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let (r, c) = self.shape(a);
        self.push(out, r, c, Op::Mul(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        let (r, c) = self.shape(a);
        self.push(out, r, c, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let (r, c) = self.shape(a);
        self.push(out, r, c, Op::Sigmoid(a))
    }

    /// Element-wise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        let out: Vec<f64> = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let (r, cols) = self.shape(x);
        self.push(out, r, cols, Op::MulConst { x, c })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|a| a * c).collect();
        let (r, cols) = self.shape(x);
        self.push(out, r, cols, Op::Scale { x, c })
    }

    /// Sum of same-shaped nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        if xs.is_empty() {
            return self.constant(vec![0.0]);
        }
        let (r, c) = self.shape(xs[0]);
        let mut out = vec![0.0; r * c];
        for &x in xs {
            axpy(&mut out, 1.0, self.value(x));
        }
        self.push(out, r, c, Op::Sum(xs.to_vec()))
    }

    /// Additive attention: `s_j = v · tanh(keys_j + query)`, weights = softmax(s),
    /// result = Σ_j weight_j · enc_j. `keys` is `n x a`, `query` has width `a`.
    pub fn attention(&mut self, enc: Var, keys: Var, query: Var, v: ParamId) -> Var {
        let (n, k) = self.shape(enc);
        let (kn, a) = self.shape(keys);
        debug_assert_eq!(n, kn);
        let qv = self.value(query);
        let kv = self.value(keys);
        let vv = &self.params.get(v).data;
        let mut t = vec![0.0; n * a];
        let mut scores = vec![0.0; n];
        for j in 0..n {
            let row = &mut t[j * a..(j + 1) * a];
            for i in 0..a {
                row[i] = (kv[j * a + i] + qv[i]).tanh();
            }
            scores[j] = dot(row, vv);
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut wsum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - m).exp();
            wsum += *s;
        }
        scores.iter_mut().for_each(|s| *s /= wsum);
        let ev = self.value(enc);
        let mut out = vec![0.0; k];
        for j in 0..n {
            axpy(&mut out, scores[j], &ev[j * k..(j + 1) * k]);
        }
        self.push(
            out,
            1,
            k,
            Op::Attention {
                enc,
                keys,
                query,
                v,
                cache: Box::new(AttnCache { weights: scores, tanh: t }),
            },
        )
    }

    /// Attention weights cached by an [`Tape::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.ix()].op {
            Op::Attention { cache, .. } => Some(&cache.weights),
            _ => None,
        }
    }

    /// `n x k` matrix node times width-`k` vector node.
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        let (n, k) = self.shape(m);
        let mut out = vec![0.0; n];
        matvec_into(&mut out, self.value(m), k, self.value(x));
        self.push(out, 1, n, Op::MatVec { m, x })
    }

    /// Copy-augmented log-distribution over the vocabulary.
    pub fn copy_log_dist(&mut self, gen: Var, copy: Var, src: Arc<[u32]>, mask: Arc<[bool]>) -> Var {
        let (out, log_z) = copy_log_dist(self.value(gen), self.value(copy), &src, &mask);
        let n = out.len();
        self.push(out, 1, n, Op::CopyLogDist { gen, copy, src, mask, log_z })
    }

    pub fn pick(&mut self, x: Var, idx: usize) -> Var {
        let v = self.value(x)[idx];
        self.push(vec![v], 1, 1, Op::Pick { x, idx })
    }

    /// Exact KL(q || p) between two log-distributions over the same support.
    pub fn kl(&mut self, lq: Var, lp: Var) -> Var {
        let mut s = 0.0;
        for (&a, &b) in self.value(lq).iter().zip(self.value(lp)) {
            if a > f64::NEG_INFINITY {
                s += a.exp() * (a - b);
            }
        }
        self.push(vec![s], 1, 1, Op::Kl { lq, lp })
    }

    /// Accumulate d(loss)/d(param) into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) {
        self.backward_seeded(&[(loss, vec![1.0])], grads);
    }

    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)], grads: &mut Gradients) {
        let top = seeds.iter().map(|(v, _)| v.ix()).max().unwrap_or(0);
        let mut g: Vec<Vec<f64>> = (0..=top).map(|_| Vec::new()).collect();
        for (v, s) in seeds {
            acc(&mut g, *v, s, self.nodes[v.ix()].value.len());
        }
        for i in (0..=top).rev() {
            if g[i].is_empty() {
                continue;
            }
            let gi = std::mem::take(&mut g[i]);
            self.backward_node(i, &gi, &mut g, grads);
        }
    }

    fn backward_node(&self, i: usize, gi: &[f64], g: &mut [Vec<f64>], grads: &mut Gradients) {
        let node = &self.nodes[i];
        let params = self.params;
        match &node.op {
            Op::Const => {}
            Op::Param(p) => {
                let buf = grads.buf(*p, gi.len());
                axpy(buf, 1.0, gi);
            }
            Op::Row { p, row } => {
                let prm = params.get(*p);
                let buf = grads.buf(*p, prm.data.len());
                axpy(&mut buf[row * prm.cols..(row + 1) * prm.cols], 1.0, gi);
            }
            Op::StEmbed { p, logdist, weights } => {
                let prm = params.get(*p);
                let cols = prm.cols;
                {
                    let buf = grads.buf(*p, prm.data.len());
                    match weights {
                        StWeights::OneHot(t) => {
                            let t = *t as usize;
                            axpy(&mut buf[t * cols..(t + 1) * cols], 1.0, gi);
                        }
                        StWeights::Dense(y) => {
                            for (w, &yw) in y.iter().enumerate() {
                                if yw != 0.0 {
                                    axpy(&mut buf[w * cols..(w + 1) * cols], yw, gi);
                                }
                            }
                        }
                    }
                }
                let ld = self.value(*logdist);
                let mut dl = vec![0.0; ld.len()];
                for (w, &l) in ld.iter().enumerate() {
                    if l > f64::NEG_INFINITY {
                        dl[w] = l.exp() * dot(prm.row(w), gi);
                    }
                }
                acc_owned(g, *logdist, dl);
            }
            Op::Linear { w, b, x } => {
                let wp = params.get(*w);
                let xv = self.value(*x);
                outer_into(grads.buf(*w, wp.data.len()), wp.cols, gi, xv);
                if let Some(b) = b {
                    axpy(grads.buf(*b, gi.len()), 1.0, gi);
                }
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; wp.cols];
                    matvec_t_into(&mut dx, &wp.data, wp.cols, gi);
                    acc_owned(g, *x, dx);
                }
            }
            Op::LinearRows { w, b, x } => {
                let wp = params.get(*w);
                let (n, k) = self.shape(*x);
                let m = wp.rows;
                let xv = self.value(*x);
                {
                    let dw = grads.buf(*w, wp.data.len());
                    for r in 0..n {
                        outer_into(dw, k, &gi[r * m..(r + 1) * m], &xv[r * k..(r + 1) * k]);
                    }
                }
                if let Some(b) = b {
                    let db = grads.buf(*b, m);
                    for r in 0..n {
                        axpy(db, 1.0, &gi[r * m..(r + 1) * m]);
                    }
                }
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; n * k];
                    for r in 0..n {
                        matvec_t_into(&mut dx[r * k..(r + 1) * k], &wp.data, k, &gi[r * m..(r + 1) * m]);
                    }
                    acc_owned(g, *x, dx);
                }
            }
            Op::Gru { cell, x, h, cache } => {
                let wx = params.get(cell.wx);
                let wh = params.get(cell.wh);
                let d = wh.cols;
                let hv = self.value(*h);
                let xv = self.value(*x);
                let mut ax = vec![0.0; 3 * d];
                let mut ah = vec![0.0; 3 * d];
                let mut dh = vec![0.0; d];
                for k in 0..d {
                    let r = cache[k];
                    let z = cache[d + k];
                    let n = cache[2 * d + k];
                    let hn = cache[3 * d + k];
                    let gk = gi[k];
                    let dz = gk * (hv[k] - n);
                    let dn = gk * (1.0 - z);
                    dh[k] = gk * z;
                    let dn_pre = dn * (1.0 - n * n);
                    let dr = dn_pre * hn;
                    let dr_pre = dr * r * (1.0 - r);
                    let dz_pre = dz * z * (1.0 - z);
                    ax[k] = dr_pre;
                    ax[d + k] = dz_pre;
                    ax[2 * d + k] = dn_pre;
                    ah[k] = dr_pre;
                    ah[d + k] = dz_pre;
                    ah[2 * d + k] = dn_pre * r;
                }
                outer_into(grads.buf(cell.wx, wx.data.len()), wx.cols, &ax, xv);
                axpy(grads.buf(cell.bx, 3 * d), 1.0, &ax);
                outer_into(grads.buf(cell.wh, wh.data.len()), d, &ah, hv);
                axpy(grads.buf(cell.bh, 3 * d), 1.0, &ah);
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; wx.cols];
                    matvec_t_into(&mut dx, &wx.data, wx.cols, &ax);
                    acc_owned(g, *x, dx);
                }
                if self.needs_grad(*h) {
                    matvec_t_into(&mut dh, &wh.data, d, &ah);
                    acc_owned(g, *h, dh);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.ix()].value.len();
                    if self.needs_grad(p) {
                        acc(g, p, &gi[off..off + n], n);
                    }
                    off += n;
                }
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &v in parts {
                    let n = self.nodes[v.ix()].value.len();
                    if self.needs_grad(v) {
                        acc(g, v, &gi[off..off + n], n);
                    }
                    off += n;
                }
            }
            Op::Add(a, b) => {
                acc(g, *a, gi, gi.len());
                acc(g, *b, gi, gi.len());
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = gi.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = gi.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                acc_owned(g, *a, da);
                acc_owned(g, *b, db);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = gi.iter().zip(&node.value).map(|(x, t)| x * (1.0 - t * t)).collect();
                acc_owned(g, *a, d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = gi.iter().zip(&node.value).map(|(x, s)| x * s * (1.0 - s)).collect();
                acc_owned(g, *a, d);
            }
            Op::MulConst { x, c } => {
                let d: Vec<f64> = gi.iter().zip(c).map(|(a, b)| a * b).collect();
                acc_owned(g, *x, d);
            }
            Op::Scale { x, c } => {
                let d: Vec<f64> = gi.iter().map(|a| a * c).collect();
                acc_owned(g, *x, d);
            }
            Op::Sum(xs) => {
                for &x in xs {
                    acc(g, x, gi, gi.len());
                }
            }
            Op::Attention { enc, keys, query, v, cache } => {
                let (n, k) = self.shape(*enc);
                let a = self.shape(*keys).1;
                let ev = self.value(*enc);
                let vv = &params.get(*v).data;
                let w = &cache.weights;
                let dw: Vec<f64> = (0..n).map(|j| dot(&ev[j * k..(j + 1) * k], gi)).collect();
                let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                let ds: Vec<f64> = (0..n).map(|j| w[j] * (dw[j] - mean)).collect();
                if self.needs_grad(*enc) {
                    let mut de = vec![0.0; n * k];
                    for j in 0..n {
                        axpy(&mut de[j * k..(j + 1) * k], w[j], gi);
                    }
                    acc_owned(g, *enc, de);
                }
                let mut dk = vec![0.0; n * a];
                let mut dq = vec![0.0; a];
                {
                    let dv = grads.buf(*v, a);
                    for j in 0..n {
                        let t = &cache.tanh[j * a..(j + 1) * a];
                        axpy(dv, ds[j], t);
                        for i in 0..a {
                            let dp = ds[j] * vv[i] * (1.0 - t[i] * t[i]);
                            dk[j * a + i] = dp;
                            dq[i] += dp;
                        }
                    }
                }
                acc_owned(g, *keys, dk);
                acc_owned(g, *query, dq);
            }
            Op::MatVec { m, x } => {
                let (n, k) = self.shape(*m);
                let mv = self.value(*m);
                let xv = self.value(*x);
                if self.needs_grad(*m) {
                    let mut dm = vec![0.0; n * k];
                    outer_into(&mut dm, k, gi, xv);
                    acc_owned(g, *m, dm);
                }
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; k];
                    matvec_t_into(&mut dx, mv, k, gi);
                    acc_owned(g, *x, dx);
                }
            }
            Op::CopyLogDist { gen, copy, src, mask, log_z } => {
                let gv = self.value(*gen);
                let cv = self.value(*copy);
                let lp = &node.value;
                let gsum: f64 = gi.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(x, _)| x).sum();
                let mut dg = vec![0.0; gv.len()];
                for w in 0..gv.len() {
                    if mask[w] {
                        let log_s = lp[w] + log_z;
                        dg[w] = gi[w] * (gv[w] - log_s).exp() - gsum * (gv[w] - log_z).exp();
                    }
                }
                let mut dc = vec![0.0; cv.len()];
                for j in 0..cv.len() {
                    let w = src[j] as usize;
                    if mask[w] {
                        let log_s = lp[w] + log_z;
                        dc[j] = gi[w] * (cv[j] - log_s).exp() - gsum * (cv[j] - log_z).exp();
                    }
                }
                acc_owned(g, *gen, dg);
                acc_owned(g, *copy, dc);
            }
            Op::Pick { x, idx } => {
                let n = self.nodes[x.ix()].value.len();
                let slot = ensure(g, *x, n);
                slot[*idx] += gi[0];
            }
            Op::Kl { lq, lp } => {
                let q = self.value(*lq);
                let p = self.value(*lp);
                let mut dq = vec![0.0; q.len()];
                let mut dp = vec![0.0; q.len()];
                for w in 0..q.len() {
                    if q[w] > f64::NEG_INFINITY {
                        let qw = q[w].exp();
                        dq[w] = gi[0] * qw * (q[w] - p[w] + 1.0);
                        dp[w] = -gi[0] * qw;
                    }
                }
                acc_owned(g, *lq, dq);
                acc_owned(g, *lp, dp);
            }
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.ix()].op, Op::Const)
    }
}

fn ensure(g: &mut [Vec<f64>], v: Var, n: usize) -> &mut Vec<f64> {
    let slot = &mut g[v.ix()];
    if slot.is_empty() {
        *slot = vec![0.0; n];
    }
    slot
}

fn acc(g: &mut [Vec<f64>], v: Var, d: &[f64], n: usize) {
    let slot = ensure(g, v, n);
    axpy(slot, 1.0, d);
}

fn acc_owned(g: &mut [Vec<f64>], v: Var, d: Vec<f64>) {
    let slot = &mut g[v.ix()];
    if slot.is_empty() {
        *slot = d;
    } else {
        axpy(slot, 1.0, &d);
    }
}
