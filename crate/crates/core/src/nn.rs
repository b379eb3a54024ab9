//! Transformer building blocks shared by the fusion and grouping stages.

use rand_chacha::ChaCha8Rng;

use crate::model::ModelError;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{xavier, Bound, ParamStore};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn register_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, din: usize, dout: usize, bias: bool) {
    store.insert(format!("{prefix}.w"), xavier(rng, din, dout));
    if bias {
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]));
    }
}

pub(crate) fn register_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for m in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{m}"), xavier(rng, d, d));
    }
}

pub(crate) fn register_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

pub(crate) fn register_ffn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, hidden: usize) {
    register_linear(store, rng, &format!("{prefix}.l1"), d, hidden, true);
    register_linear(store, rng, &format!("{prefix}.l2"), hidden, d, true);
}

/// `x·W (+ b)` with parameters `{prefix}.w` and optional `{prefix}.b`.
pub(crate) fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let w = p.var(&format!("{prefix}.w"))?;
    let y = tape.matmul(x, w)?;
    match p.var(&format!("{prefix}.b")) {
        Ok(b) => Ok(tape.add_row(y, b)?),
        Err(_) => Ok(y),
    }
}

pub(crate) fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let g = p.var(&format!("{prefix}.g"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

pub(crate) fn ffn(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let h = linear(tape, p, &format!("{prefix}.l1"), x)?;
    let h = tape.relu(h);
    linear(tape, p, &format!("{prefix}.l2"), h)
}

/// Output of a multi-head attention layer with its per-head weight matrices.
pub struct Attention {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention of `queries` over `context`.
pub(crate) fn attention(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    queries: Var,
    context: Var,
    heads: usize,
) -> Result<Attention, ModelError> {
    attention_with_pos(tape, p, prefix, queries, None, context, None, heads)
}

/// Attention whose queries and keys, but not values, carry positional
/// encodings.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_with_pos(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    queries: Var,
    query_pos: Option<Var>,
    context: Var,
    key_pos: Option<Var>,
    heads: usize,
) -> Result<Attention, ModelError> {
    attention_full(tape, p, prefix, queries, query_pos, context, key_pos, None, heads)
}

/// Attention with optional positional encodings and an additive logit
/// bias shared by every head.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_full(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    queries: Var,
    query_pos: Option<Var>,
    context: Var,
    key_pos: Option<Var>,
    bias: Option<Var>,
    heads: usize,
) -> Result<Attention, ModelError> {
    let d = tape.value(queries).cols();
    if heads == 0 || d % heads != 0 {
        return Err(ModelError::InvalidConfig(format!("width {d} not divisible into {heads} heads")));
    }
    let qs = match query_pos {
        Some(pos) => tape.add(queries, pos)?,
        None => queries,
    };
    let ks = match key_pos {
        Some(pos) => tape.add(context, pos)?,
        None => context,
    };
    let q = tape.matmul(qs, p.var(&format!("{prefix}.wq"))?)?;
    let k = tape.matmul(ks, p.var(&format!("{prefix}.wk"))?)?;
    let v = tape.matmul(context, p.var(&format!("{prefix}.wv"))?)?;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let (o, w) = match bias {
            None => tape.attention_with_weights(qh, kh, vh)?,
            Some(b) => {
                let logits = tape.matmul_t(qh, kh)?;
                let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
                let logits = tape.add(logits, b)?;
                let w = tape.softmax(logits, 1)?;
                (tape.matmul(w, vh)?, w)
            }
        };
        outs.push(o);
        weights.push(w);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let out = tape.matmul(merged, p.var(&format!("{prefix}.wo"))?)?;
    Ok(Attention { out, weights })
}
