//! Pre-norm transformer blocks on the autodiff graph.

use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, ParamStore, Var};

/// `x·W + b` for `x: [L, in]`.
pub fn linear<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn norm<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.weight"))?;
    let beta = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gamma, beta, eps)
}

/// Multi-head self-attention over `x: [L, d]` with no masking.
pub fn attention<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let (l, d) = (g.shape(x)[0], g.shape(x)[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |g: &mut Graph<T>, name: &str, perm: &[usize]| -> Result<Var> {
        let y = linear(g, store, &format!("{prefix}.{name}"), x)?;
        let y = g.reshape(y, &[l, heads, dh])?;
        g.permute(y, perm)
    };
    let q = split(g, "q", &[1, 0, 2])?;
    let kt = split(g, "k", &[1, 2, 0])?;
    let v = split(g, "v", &[1, 0, 2])?;
    let scores = g.matmul(q, kt)?;
    super::count_attention(prefix, l);
    let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let attn = g.softmax(scores, 2)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[1, 0, 2])?;
    let ctx = g.reshape(ctx, &[l, d])?;
    linear(g, store, &format!("{prefix}.out"), ctx)
}

/// `x + MHSA(LN(x))`, then `x + MLP(LN(x))` with a GELU MLP.
pub fn block<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let h = norm(g, store, &format!("{prefix}.ln1"), x, eps)?;
    let h = attention(g, store, &format!("{prefix}.attn"), h, heads)?;
    let x = g.add(x, h)?;
    let h = norm(g, store, &format!("{prefix}.ln2"), x, eps)?;
    let h = linear(g, store, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, store, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}

/// Runs `prefix.0 .. prefix.{n-1}` in order.
pub fn stack<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    n: usize,
    mut x: Var,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    for i in 0..n {
        x = block(g, store, &format!("{prefix}.{i}"), x, heads, eps)?;
    }
    Ok(x)
}
