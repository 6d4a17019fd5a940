//! Layers built from graph primitives: affine maps, attention, NORM, BCE.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::graph::{Graph, Var};
use crate::numcore::tensor::{ParamSet, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const PROB_EPS: f64 = 1e-12;

/// Register `{prefix}.w` (`[d_in, d_out]`) and `{prefix}.b` (`[1, d_out]`).
pub fn init_linear<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<()> {
    let std = 1.0 / (d_in as f64).sqrt();
    ps.insert(format!("{prefix}.w"), Tensor::randn(rng, &[d_in, d_out], std))?;
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[1, d_out]))
}

/// `x · w + b` with the bias row expanded over `x`'s rows.
pub fn affine(g: &Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let bias = g.expand_rows(b, g.rows(x))?;
    g.add(y, bias)
}

pub fn linear(g: &Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{prefix}.w"))?;
    let b = g.param(ps, &format!("{prefix}.b"))?;
    affine(g, x, w, b)
}

/// Same as [`linear`] but the parameters are constants (stop-gradient).
pub fn linear_frozen(g: &Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let w = g.frozen(ps, &format!("{prefix}.w"))?;
    let b = g.frozen(ps, &format!("{prefix}.b"))?;
    affine(g, x, w, b)
}

pub fn layernorm(g: &Graph, x: Var) -> Var {
    g.layernorm_rows(x, LN_EPS)
}

/// Projection weights of one single-head attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

impl AttnWeights {
    pub fn bind(g: &Graph, ps: &ParamSet, prefix: &str) -> Result<Self> {
        Ok(AttnWeights {
            query: g.param(ps, &format!("{prefix}.wq"))?,
            key: g.param(ps, &format!("{prefix}.wk"))?,
            value: g.param(ps, &format!("{prefix}.wv"))?,
        })
    }
}

/// Register `{prefix}.wq [d_query, d_head]`, `.wk [d_kv, d_head]` and
/// `.wv [d_kv, d_out]`.
pub fn init_attention<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    prefix: &str,
    d_query: usize,
    d_kv: usize,
    d_head: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<()> {
    ps.insert(
        format!("{prefix}.wq"),
        Tensor::randn(rng, &[d_query, d_head], 1.0 / (d_query as f64).sqrt()),
    )?;
    ps.insert(
        format!("{prefix}.wk"),
        Tensor::randn(rng, &[d_kv, d_head], 1.0 / (d_kv as f64).sqrt()),
    )?;
    ps.insert(
        format!("{prefix}.wv"),
        Tensor::randn(rng, &[d_kv, d_out], 1.0 / (d_kv as f64).sqrt()),
    )
}

/// Scaled dot-product attention `softmax(QKᵀ/√d)·V` with learned Q/K/V maps.
/// Output rows are aligned with `query` rows.
pub fn attention(g: &Graph, query: Var, key: Var, value: Var, w: &AttnWeights) -> Result<Var> {
    if g.shape(query).len() != 2 || g.shape(key).len() != 2 {
        return Err(Error::shape("attention", &g.shape(query), &g.shape(key)));
    }
    if g.rows(key) != g.rows(value) {
        return Err(Error::shape("attention", &g.shape(key), &g.shape(value)));
    }
    let q = g.matmul(query, w.query)?;
    let k = g.matmul(key, w.key)?;
    let v = g.matmul(value, w.value)?;
    let d_head = g.cols(q) as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / d_head.sqrt());
    let weights = g.softmax_rows(scaled);
    g.matmul(weights, v)
}

/// Attention with trainable weights under `prefix`; `kv` serves as key and value.
pub fn attend(g: &Graph, ps: &ParamSet, prefix: &str, query: Var, kv: Var) -> Result<Var> {
    let w = AttnWeights::bind(g, ps, prefix)?;
    attention(g, query, kv, kv, &w)
}

/// Binary cross-entropy of a probability, clamped away from 0 and 1.
pub fn bce(g: &Graph, p: Var, label: u8) -> Result<Var> {
    if g.shape(p).iter().product::<usize>() != 1 {
        return Err(Error::shape("bce", &g.shape(p), &[1]));
    }
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let l = if label == 1 {
        g.log(p)
    } else {
        let one_minus = g.add_scalar(g.neg(p), 1.0);
        g.log(one_minus)
    };
    let r = g.neg(l);
    g.reshape(r, &[1])
}
