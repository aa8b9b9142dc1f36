//! Layer helpers shared by both networks.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// `x · W (+ b)` with parameters `{prefix}.w` and optionally `{prefix}.b`.
pub(crate) fn linear<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    bias: bool,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let y = g.matmul(x, w)?;
    if bias {
        let b = g.param(store, &format!("{prefix}.b"))?;
        g.add(y, b)
    } else {
        Ok(y)
    }
}

pub(crate) fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    store.xavier(format!("{prefix}.w"), d_in, d_out, rng)?;
    if bias {
        store.zeros(format!("{prefix}.b"), &[d_out])?;
    }
    Ok(())
}

pub(crate) fn layer_norm<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.g"))?;
    let bias = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm_lastdim(x, Some(gain), Some(bias))
}

pub(crate) fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.ones(format!("{prefix}.g"), &[d])?;
    store.zeros(format!("{prefix}.b"), &[d])
}

pub(crate) fn init_mhsa<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<()> {
    for w in ["w_q", "w_k", "w_v", "w_o"] {
        store.xavier(format!("{prefix}.{w}"), d, d, rng)?;
    }
    Ok(())
}

/// Index map taking `[a, b, c, e]` to `[a, c, b, e]`.
fn swap12(a: usize, b: usize, c: usize, e: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(a * b * c * e);
    for i in 0..a {
        for k in 0..c {
            for j in 0..b {
                let base = ((i * b + j) * c + k) * e;
                idx.extend(base..base + e);
            }
        }
    }
    idx
}

/// Multi-head self-attention over `groups` independent sequences.
///
/// `x` holds `groups * tokens` rows of width `d`; `mask`, if given, is a
/// `[tokens, tokens]` additive term on the attention logits.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mhsa<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    groups: usize,
    tokens: usize,
    heads: usize,
    p_attn: f64,
    mask: Option<Var>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let d = *shape.last().unwrap_or(&0);
    if heads == 0 || !d.is_multiple_of(heads) || g.value(x).numel() != groups * tokens * d {
        return Err(Error::shape(
            "mhsa",
            format!("input {shape:?} with {groups} groups x {tokens} tokens, {heads} heads"),
        ));
    }
    let dk = d / heads;
    let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let idx = swap12(groups, tokens, heads, dk);
        g.gather(v, idx, vec![groups * heads, tokens, dk])
    };
    let wq = g.param(store, &format!("{prefix}.w_q"))?;
    let wk = g.param(store, &format!("{prefix}.w_k"))?;
    let wv = g.param(store, &format!("{prefix}.w_v"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let logits = g.bmm(q, k, true)?;
    let mut logits = g.scale(logits, T::of(1.0 / (dk as f64).sqrt()));
    if let Some(m) = mask {
        logits = g.add(logits, m)?;
    }
    let z = g.softmax_lastdim(logits)?;
    let z = g.dropout(z, p_attn)?;
    let o = g.bmm(z, v, false)?;
    let merged = g.gather(o, swap12(groups, heads, tokens, dk), shape)?;
    let wo = g.param(store, &format!("{prefix}.w_o"))?;
    g.matmul(merged, wo)
}

/// Learnable table rows `0..n` of `{name}`, shape `[n, d]`.
pub(crate) fn positional<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, n: usize) -> Result<Var> {
    let table = g.param(store, name)?;
    let rows = g.shape(table)[0];
    if n > rows {
        return Err(Error::IndexOutOfRange { index: n - 1, len: rows });
    }
    let ids: Vec<usize> = (0..n).collect();
    g.embedding_lookup(table, &ids)
}

pub(crate) fn init_positional<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    n: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(name, Tensor::from_fn(&[n, d], |_| T::of(0.02 * (rng.random::<f64>() * 2.0 - 1.0))))
}
