//! The shared transformer encoder block and the resolution embedding.
//!
//! Patch tokens arrive as `[B·V, NP, d]`: attention mixes the NP patches of
//! one series (interperiod variation) and the feed-forward network acts on
//! each patch's `d` resampled samples (intraperiod variation).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Number of attention heads; always divides the model width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadCount(usize);

impl HeadCount {
    pub fn new(heads: usize, width: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::contract(format!(
                "{heads} heads do not divide model width {width}"
            )));
        }
        Ok(HeadCount(heads))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Parameter handles of one encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    /// Per-block resolution embedding, when it is not shared model-wide.
    pub re: Option<ParamId>,
}

impl BlockParams {
    /// Registers a freshly initialised block under `prefix.*`.
    ///
    /// Projection weights are Xavier-uniform, biases zero, norms identity, and
    /// the optional resolution embedding is drawn from N(0, 0.02²).
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        ffn_width: usize,
        own_re: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut weight = |name: &str, fan_in: usize, fan_out: usize| {
            let t = xavier(fan_in, fan_out, rng);
            store.insert(format!("{prefix}.{name}"), t)
        };
        let wq = weight("attn.wq", width, width)?;
        let wk = weight("attn.wk", width, width)?;
        let wv = weight("attn.wv", width, width)?;
        let wo = weight("attn.wo", width, width)?;
        let ffn_w1 = weight("ffn.w1", width, ffn_width)?;
        let ffn_w2 = weight("ffn.w2", ffn_width, width)?;
        let mut fill = |name: &str, len: usize, value: f64| {
            store.insert(format!("{prefix}.{name}"), Tensor::full([len], value))
        };
        let bq = fill("attn.bq", width, 0.0)?;
        let bk = fill("attn.bk", width, 0.0)?;
        let bv = fill("attn.bv", width, 0.0)?;
        let bo = fill("attn.bo", width, 0.0)?;
        let ffn_b1 = fill("ffn.b1", ffn_width, 0.0)?;
        let ffn_b2 = fill("ffn.b2", width, 0.0)?;
        let ln1_gamma = fill("ln1.gamma", width, 1.0)?;
        let ln1_beta = fill("ln1.beta", width, 0.0)?;
        let ln2_gamma = fill("ln2.gamma", width, 1.0)?;
        let ln2_beta = fill("ln2.beta", width, 0.0)?;
        let re = if own_re {
            Some(store.insert(
                format!("{prefix}.re"),
                init_resolution_embedding(width, rng),
            )?)
        } else {
            None
        };
        Ok(BlockParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln1_gamma,
            ln1_beta,
            ln2_gamma,
            ln2_beta,
            re,
        })
    }
}

pub(crate) fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new([fan_in, fan_out], data).expect("dimensions are positive")
}

pub(crate) fn init_resolution_embedding(width: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    Tensor::new([width], (0..width).map(|_| normal.sample(rng)).collect())
        .expect("width is positive")
}

/// `re / period`: the embedding added to every patch token of a branch.
pub fn resolution_embedding(g: &mut Graph, re: Var, period: usize) -> Result<Var> {
    if period == 0 {
        return Err(Error::contract("period must be positive"));
    }
    Ok(g.scale(re, 1.0 / period as f64))
}

/// `x · w + b` over the last axis, with `w: [in, out]` and `b: [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let out_shape = g.shape(y).to_vec();
    let mut bias_shape = vec![1; out_shape.len()];
    *bias_shape.last_mut().unwrap() = g.shape(b)[0];
    let b = g.reshape(b, &bias_shape)?;
    let b = g.expand(b, &out_shape)?;
    g.add(y, b)
}

/// Multi-head scaled dot-product self-attention over the token axis.
///
/// No mask and no positional signal: permuting tokens permutes the output
/// the same way. Attention weights pass through dropout in train mode.
pub fn mha(
    g: &mut Graph,
    store: &ParamStore,
    tokens: Var,
    params: &BlockParams,
    heads: HeadCount,
    dropout: f64,
) -> Result<Var> {
    let &[n, t, d] = g.shape(tokens) else {
        return Err(Error::contract(format!(
            "mha expects [N, T, d], got {:?}",
            g.shape(tokens)
        )));
    };
    if store.get(params.wq).tensor().shape() != [d, d] {
        return Err(Error::shape(
            "mha",
            g.shape(tokens),
            store.get(params.wq).tensor().shape(),
        ));
    }
    let h = heads.get();
    let dh = d / h;
    let bind = |g: &mut Graph, w: ParamId, b: ParamId| (g.param(store, w), g.param(store, b));

    let project = |g: &mut Graph, w: ParamId, b: ParamId| -> Result<Var> {
        let (w, b) = bind(g, w, b);
        let y = linear(g, tokens, w, b)?;
        let y = g.reshape(y, &[n, t, h, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[n * h, t, dh])
    };
    let q = project(g, params.wq, params.bq)?;
    let k = project(g, params.wk, params.bk)?;
    let v = project(g, params.wv, params.bv)?;

    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let attn = g.dropout(attn, dropout)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[n, h, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n, t, d])?;
    let (wo, bo) = bind(g, params.wo, params.bo);
    linear(g, ctx, wo, bo)
}

/// Position-wise `W2 · GELU(W1 · x + b1) + b2`.
pub fn ffn(g: &mut Graph, store: &ParamStore, tokens: Var, params: &BlockParams) -> Result<Var> {
    let (w1, b1) = (g.param(store, params.ffn_w1), g.param(store, params.ffn_b1));
    let (w2, b2) = (g.param(store, params.ffn_w2), g.param(store, params.ffn_b2));
    let hidden = linear(g, tokens, w1, b1)?;
    let hidden = g.gelu(hidden);
    linear(g, hidden, w2, b2)
}

/// Pre-norm encoder block: `y = x + MHA(LN1(x))`, then `y + FFN(LN2(y))`.
/// Both sublayer outputs pass through dropout before the residual add.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    tokens: Var,
    params: &BlockParams,
    heads: HeadCount,
    dropout: f64,
) -> Result<Var> {
    const LN_EPS: f64 = 1e-5;
    let (g1, b1) = (
        g.param(store, params.ln1_gamma),
        g.param(store, params.ln1_beta),
    );
    let normed = g.layer_norm(tokens, g1, b1, LN_EPS)?;
    let attended = mha(g, store, normed, params, heads, dropout)?;
    let attended = g.dropout(attended, dropout)?;
    let y = g.add(tokens, attended)?;

    let (g2, b2) = (
        g.param(store, params.ln2_gamma),
        g.param(store, params.ln2_beta),
    );
    let normed = g.layer_norm(y, g2, b2, LN_EPS)?;
    let fed = ffn(g, store, normed, params)?;
    let fed = g.dropout(fed, dropout)?;
    g.add(y, fed)
}
