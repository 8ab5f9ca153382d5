//! Recurrent and attention building blocks.
//!
//! Everything is batched: a batch of `B` sequences is processed step by step
//! with `[B x d]` state matrices. Annotations are stored block-major, so
//! sequence `b` owns rows `b*J..(b+1)*J`. A single sentence is just `B = 1`.
//!
//! Weight matrices multiply from the right (`x · W`), so an input of width
//! `d_in` meets a `[d_in x d_out]` matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const INIT_SCALE: f64 = 0.1;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerDims {
    pub embed_dim: usize,
    pub enc_hidden_per_dir: usize,
    pub attn_hidden: usize,
    pub dec_hidden: usize,
}

impl Default for LayerDims {
    fn default() -> Self {
        LayerDims {
            embed_dim: 256,
            enc_hidden_per_dir: 256,
            attn_hidden: 512,
            dec_hidden: 512,
        }
    }
}

impl LayerDims {
    pub fn new(embed_dim: usize, enc_hidden_per_dir: usize, attn_hidden: usize, dec_hidden: usize) -> Self {
        LayerDims {
            embed_dim,
            enc_hidden_per_dir,
            attn_hidden,
            dec_hidden,
        }
    }

    /// Width of one encoder annotation row.
    pub fn annotation_dim(&self) -> usize {
        2 * self.enc_hidden_per_dir
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.enc_hidden_per_dir == 0 || self.attn_hidden == 0 || self.dec_hidden == 0 {
            return Err(Error::Model(format!("all layer dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

/// Adds a uniformly initialized matrix to the store.
pub fn init_matrix(
    store: &mut ParamStore,
    name: String,
    rows: usize,
    cols: usize,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    store.add(name, uniform(rng, &[rows, cols]))
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    /// `[d_in x 4H]`, gate blocks ordered input, forget, output, candidate.
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = init_matrix(store, format!("{prefix}.w"), input, 4 * hidden, rng)?;
        let u = init_matrix(store, format!("{prefix}.u"), hidden, 4 * hidden, rng)?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|x| *x = FORGET_BIAS);
        let b = store.add(format!("{prefix}.b"), Tensor::row(bias))?;
        Ok(LstmParams { w, u, b, hidden })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.u, self.b]
    }
}

/// `x · W + b` for every row of `x`.
fn project(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let xw = g.matmul(x, wv)?;
    g.add(xw, bv)
}

/// One LSTM step given the precomputed input projection `x · W + b`.
pub fn lstm_step(g: &mut Graph, store: &ParamStore, p: &LstmParams, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hd = p.hidden;
    let u = g.param(store, p.u);
    let hu = g.matmul(h, u)?;
    let pre = g.add(xw, hu)?;
    let i_pre = g.slice_cols(pre, 0, hd)?;
    let f_pre = g.slice_cols(pre, hd, 2 * hd)?;
    let o_pre = g.slice_cols(pre, 2 * hd, 3 * hd)?;
    let g_pre = g.slice_cols(pre, 3 * hd, 4 * hd)?;
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let o = g.sigmoid(o_pre);
    let cand = g.tanh(g_pre);
    let fc = g.mul(f, c)?;
    let ic = g.mul(i, cand)?;
    let c_new = g.add(fc, ic)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// `(h', c')` for input rows `x`.
pub fn lstm_cell(g: &mut Graph, store: &ParamStore, p: &LstmParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let xw = project(g, store, x, p.w, p.b)?;
    lstm_step(g, store, p, xw, h, c)
}

#[derive(Clone, Debug)]
pub struct GruParams {
    /// `[d_in x 3H]`, blocks ordered reset, update, candidate.
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = init_matrix(store, format!("{prefix}.w"), input, 3 * hidden, rng)?;
        let u = init_matrix(store, format!("{prefix}.u"), hidden, 3 * hidden, rng)?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[1, 3 * hidden]))?;
        Ok(GruParams { w, u, b, hidden })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.u, self.b]
    }
}

/// One GRU step given the input projection `x · W + b`:
/// `h' = (1 - z) * n + z * h` with `n = tanh(xw_n + r * (h · U_n))`.
pub fn gru_step(g: &mut Graph, store: &ParamStore, p: &GruParams, xw: Var, h: Var) -> Result<Var> {
    let hd = p.hidden;
    let u = g.param(store, p.u);
    let hu = g.matmul(h, u)?;
    let x_rz = g.slice_cols(xw, 0, 2 * hd)?;
    let h_rz = g.slice_cols(hu, 0, 2 * hd)?;
    let rz_pre = g.add(x_rz, h_rz)?;
    let rz = g.sigmoid(rz_pre);
    let r = g.slice_cols(rz, 0, hd)?;
    let z = g.slice_cols(rz, hd, 2 * hd)?;
    let x_n = g.slice_cols(xw, 2 * hd, 3 * hd)?;
    let h_n = g.slice_cols(hu, 2 * hd, 3 * hd)?;
    let rh = g.mul(r, h_n)?;
    let n_pre = g.add(x_n, rh)?;
    let n = g.tanh(n_pre);
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}

pub fn gru_cell(g: &mut Graph, store: &ParamStore, p: &GruParams, x: Var, h: Var) -> Result<Var> {
    let xw = project(g, store, x, p.w, p.b)?;
    gru_step(g, store, p, xw, h)
}

/// A padded batch of source id sequences, block-major (`ids[b*len + t]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl SourceBatch {
    pub fn single(ids: &[usize]) -> Result<Self> {
        Self::from_sequences(&[ids.to_vec()], 0)
    }

    /// Pads sequences to the longest one with `pad`.
    pub fn from_sequences(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Empty("source sequence"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for t in 0..len {
                ids.push(s.get(t).copied().unwrap_or(pad));
                valid.push(t < s.len());
            }
        }
        Ok(SourceBatch {
            ids,
            valid,
            batch: seqs.len(),
            len,
        })
    }

    fn column(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.batch).map(move |b| self.ids[b * self.len + t])
    }

    fn valid_column(&self, t: usize) -> Vec<bool> {
        (0..self.batch).map(|b| self.valid[b * self.len + t]).collect()
    }
}

/// Encoder states `h_j = [forward_j ; backward_j]` for a batch.
#[derive(Clone, Debug)]
pub struct Annotations {
    /// `[(B*J) x 2*enc_hidden_per_dir]`, block-major.
    pub h: Var,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embed: ParamId,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl EncoderParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        dims: &LayerDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed = init_matrix(store, format!("{prefix}.embed"), vocab, dims.embed_dim, rng)?;
        let fwd = LstmParams::init(
            store,
            &format!("{prefix}.fwd"),
            dims.embed_dim,
            dims.enc_hidden_per_dir,
            rng,
        )?;
        let bwd = LstmParams::init(
            store,
            &format!("{prefix}.bwd"),
            dims.embed_dim,
            dims.enc_hidden_per_dir,
            rng,
        )?;
        Ok(EncoderParams { embed, fwd, bwd })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.embed];
        v.extend(self.fwd.ids());
        v.extend(self.bwd.ids());
        v
    }
}

/// Bidirectional LSTM encoder. Row `b*J + j` of the result is
/// `[fwd_j ; bwd_j]` for sequence `b`. Padded positions do not influence
/// the backward direction of valid positions.
pub fn encode(g: &mut Graph, store: &ParamStore, enc: &EncoderParams, src: &SourceBatch) -> Result<Annotations> {
    if src.batch == 0 || src.len == 0 {
        return Err(Error::Empty("encoder input"));
    }
    let (bsz, len) = (src.batch, src.len);
    let hd = enc.fwd.hidden;
    let time_major: Vec<usize> = (0..len).flat_map(|t| src.column(t).collect::<Vec<_>>()).collect();
    let table = g.param(store, enc.embed);
    let x = g.lookup(table, &time_major)?;
    let xw_f = project(g, store, x, enc.fwd.w, enc.fwd.b)?;
    let xw_b = project(g, store, x, enc.bwd.w, enc.bwd.b)?;
    let zero = g.constant(Tensor::zeros(&[bsz, hd]));

    let mut fwd = Vec::with_capacity(len);
    let (mut h, mut c) = (zero, zero);
    for t in 0..len {
        let xw = g.slice_rows(xw_f, t * bsz, (t + 1) * bsz)?;
        (h, c) = lstm_step(g, store, &enc.fwd, xw, h, c)?;
        fwd.push(h);
    }

    let mut bwd = vec![zero; len];
    let (mut h, mut c) = (zero, zero);
    for t in (0..len).rev() {
        let xw = g.slice_rows(xw_b, t * bsz, (t + 1) * bsz)?;
        let (hn, cn) = lstm_step(g, store, &enc.bwd, xw, h, c)?;
        let valid = src.valid_column(t);
        if valid.iter().all(|&v| v) {
            (h, c) = (hn, cn);
        } else {
            h = g.select_rows(&valid, hn, h)?;
            c = g.select_rows(&valid, cn, c)?;
        }
        bwd[t] = h;
    }

    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        steps.push(g.concat_cols(&[fwd[t], bwd[t]])?);
    }
    let stacked = g.concat_rows(&steps)?;
    let h = if bsz == 1 {
        stacked
    } else {
        let perm: Vec<usize> = (0..bsz).flat_map(|b| (0..len).map(move |t| t * bsz + b)).collect();
        g.gather_rows(stacked, &perm)?
    };
    Ok(Annotations {
        h,
        valid: src.valid.clone(),
        batch: bsz,
        len,
    })
}

impl Annotations {
    /// Repeats the annotations of sequence `rows[i]` as block `i`.
    pub fn select(&self, g: &mut Graph, rows: &[usize]) -> Result<Annotations> {
        let idx: Vec<usize> = rows
            .iter()
            .flat_map(|&b| (0..self.len).map(move |t| b * self.len + t))
            .collect();
        let h = g.gather_rows(self.h, &idx)?;
        let valid = idx.iter().map(|&i| self.valid[i]).collect();
        Ok(Annotations {
            h,
            valid,
            batch: rows.len(),
            len: self.len,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `[dec_hidden x attn_hidden]`
    pub w: ParamId,
    /// `[annotation_dim x attn_hidden]`
    pub u: ParamId,
    /// `[attn_hidden x 1]`
    pub v: ParamId,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dims: &LayerDims, rng: &mut impl Rng) -> Result<Self> {
        let w = init_matrix(store, format!("{prefix}.w"), dims.dec_hidden, dims.attn_hidden, rng)?;
        let u = init_matrix(
            store,
            format!("{prefix}.u"),
            dims.annotation_dim(),
            dims.attn_hidden,
            rng,
        )?;
        let v = init_matrix(store, format!("{prefix}.v"), dims.attn_hidden, 1, rng)?;
        Ok(AttentionParams { w, u, v })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.u, self.v]
    }
}

/// `H · U`, which does not change across decoder steps.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub uh: Var,
}

pub fn attention_cache(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    ann: &Annotations,
) -> Result<AttentionCache> {
    let u = g.param(store, p.u);
    Ok(AttentionCache {
        uh: g.matmul(ann.h, u)?,
    })
}

impl AttentionCache {
    pub fn select(&self, g: &mut Graph, rows: &[usize], len: usize) -> Result<AttentionCache> {
        let idx: Vec<usize> = rows.iter().flat_map(|&b| (0..len).map(move |t| b * len + t)).collect();
        Ok(AttentionCache {
            uh: g.gather_rows(self.uh, &idx)?,
        })
    }
}

/// MLP attention: `e_j = v · tanh(W s + U h_j)`, `alpha = softmax(e)`,
/// `context = sum_j alpha_j h_j`. Returns `(alpha [B x J], context [B x 2H])`.
pub fn attend_cached(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    s_prev: Var,
    ann: &Annotations,
    cache: &AttentionCache,
) -> Result<(Var, Var)> {
    let (bsz, len) = (ann.batch, ann.len);
    if g.value(s_prev).rows() != bsz {
        return Err(Error::shape("attend", g.shape(s_prev), &[bsz, len]));
    }
    let w = g.param(store, p.w);
    let ws = g.matmul(s_prev, w)?;
    let rep = if len == 1 {
        ws
    } else {
        let idx: Vec<usize> = (0..bsz).flat_map(|b| std::iter::repeat_n(b, len)).collect();
        g.gather_rows(ws, &idx)?
    };
    let pre = g.add(cache.uh, rep)?;
    let act = g.tanh(pre);
    let v = g.param(store, p.v);
    let e = g.matmul(act, v)?;
    let e = g.reshape(e, &[bsz, len])?;
    let alpha = g.softmax_rows_masked(e, Some(&ann.valid))?;
    let ctx = g.weighted_row_sum(alpha, ann.h)?;
    Ok((alpha, ctx))
}

pub fn attend(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    s_prev: Var,
    ann: &Annotations,
) -> Result<(Var, Var)> {
    if ann.len == 0 || ann.batch == 0 {
        return Err(Error::Empty("annotations"));
    }
    let cache = attention_cache(g, store, p, ann)?;
    attend_cached(g, store, p, s_prev, ann, &cache)
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub embed: ParamId,
    pub gru1: GruParams,
    pub gru2: GruParams,
    /// `[annotation_dim x dec_hidden]`
    pub init_w: ParamId,
}

impl DecoderParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        dims: &LayerDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed = init_matrix(store, format!("{prefix}.embed"), vocab, dims.embed_dim, rng)?;
        let gru1 = GruParams::init(store, &format!("{prefix}.gru1"), dims.embed_dim, dims.dec_hidden, rng)?;
        let gru2 = GruParams::init(
            store,
            &format!("{prefix}.gru2"),
            dims.annotation_dim(),
            dims.dec_hidden,
            rng,
        )?;
        let init_w = init_matrix(
            store,
            format!("{prefix}.init"),
            dims.annotation_dim(),
            dims.dec_hidden,
            rng,
        )?;
        Ok(DecoderParams {
            embed,
            gru1,
            gru2,
            init_w,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.embed];
        v.extend(self.gru1.ids());
        v.extend(self.gru2.ids());
        v.push(self.init_w);
        v
    }
}

/// `s_0 = tanh(mean_j(h_j) · W_init)`, the mean taken over valid positions.
pub fn init_decoder(g: &mut Graph, store: &ParamStore, init_w: ParamId, ann: &Annotations) -> Result<Var> {
    if ann.len == 0 || ann.batch == 0 {
        return Err(Error::Empty("annotations"));
    }
    let mut weights = vec![0.0; ann.batch * ann.len];
    for b in 0..ann.batch {
        let row = &ann.valid[b * ann.len..(b + 1) * ann.len];
        let n = row.iter().filter(|&&v| v).count();
        if n == 0 {
            return Err(Error::Empty("annotations"));
        }
        for (t, &v) in row.iter().enumerate() {
            if v {
                weights[b * ann.len + t] = 1.0 / n as f64;
            }
        }
    }
    let wts = g.constant(Tensor::matrix(ann.batch, ann.len, weights)?);
    let mean = g.weighted_row_sum(wts, ann.h)?;
    let w = g.param(store, init_w);
    let pre = g.matmul(mean, w)?;
    Ok(g.tanh(pre))
}

/// Output of one conditional GRU step.
#[derive(Clone, Debug)]
pub struct CondGruOutput {
    pub state: Var,
    pub context: Var,
    pub alpha: Var,
    /// Intermediate state after the first GRU.
    pub intermediate: Var,
}

/// Conditional GRU given the projected previous-output embedding
/// `y_emb · W1 + b1`: `s' = GRU1(y, s)`, `(alpha, c) = attend(s', H)`,
/// `s_new = GRU2(c, s')`.
#[allow(clippy::too_many_arguments)]
pub fn cond_gru_step_projected(
    g: &mut Graph,
    store: &ParamStore,
    dec: &DecoderParams,
    attn: &AttentionParams,
    y_proj: Var,
    s_prev: Var,
    ann: &Annotations,
    cache: &AttentionCache,
) -> Result<CondGruOutput> {
    let s1 = gru_step(g, store, &dec.gru1, y_proj, s_prev)?;
    let (alpha, context) = attend_cached(g, store, attn, s1, ann, cache)?;
    let state = gru_cell(g, store, &dec.gru2, context, s1)?;
    Ok(CondGruOutput {
        state,
        context,
        alpha,
        intermediate: s1,
    })
}

pub fn cond_gru_step(
    g: &mut Graph,
    store: &ParamStore,
    dec: &DecoderParams,
    attn: &AttentionParams,
    y_emb: Var,
    s_prev: Var,
    ann: &Annotations,
) -> Result<CondGruOutput> {
    let cache = attention_cache(g, store, attn, ann)?;
    let y_proj = project(g, store, y_emb, dec.gru1.w, dec.gru1.b)?;
    cond_gru_step_projected(g, store, dec, attn, y_proj, s_prev, ann, &cache)
}

/// Per-task deep output layer:
/// `logits = tanh(s · W_s + y · W_y + c · W_c + b) · W_o`.
#[derive(Clone, Debug)]
pub struct OutputParams {
    pub w_s: ParamId,
    pub w_y: ParamId,
    pub w_c: ParamId,
    pub b: ParamId,
    pub w_o: ParamId,
}

impl OutputParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        dims: &LayerDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = dims.dec_hidden;
        let w_s = init_matrix(store, format!("{prefix}.w_s"), dims.dec_hidden, hidden, rng)?;
        let w_y = init_matrix(store, format!("{prefix}.w_y"), dims.embed_dim, hidden, rng)?;
        let w_c = init_matrix(store, format!("{prefix}.w_c"), dims.annotation_dim(), hidden, rng)?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[1, hidden]))?;
        let w_o = init_matrix(store, format!("{prefix}.w_o"), hidden, vocab, rng)?;
        Ok(OutputParams { w_s, w_y, w_c, b, w_o })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_s, self.w_y, self.w_c, self.b, self.w_o]
    }
}

/// The `tanh(...)` hidden layer of the output, before the final projection.
pub fn output_hidden(
    g: &mut Graph,
    store: &ParamStore,
    out: &OutputParams,
    s: Var,
    y_emb: Var,
    context: Var,
) -> Result<Var> {
    let ws = g.param(store, out.w_s);
    let wy = g.param(store, out.w_y);
    let wc = g.param(store, out.w_c);
    let b = g.param(store, out.b);
    let a = g.matmul(s, ws)?;
    let y = g.matmul(y_emb, wy)?;
    let c = g.matmul(context, wc)?;
    let sum = g.add(a, y)?;
    let sum = g.add(sum, c)?;
    let sum = g.add(sum, b)?;
    Ok(g.tanh(sum))
}

pub fn output_logits(
    g: &mut Graph,
    store: &ParamStore,
    out: &OutputParams,
    s: Var,
    y_emb: Var,
    context: Var,
) -> Result<Var> {
    let hidden = output_hidden(g, store, out, s, y_emb, context)?;
    let wo = g.param(store, out.w_o);
    g.matmul(hidden, wo)
}
