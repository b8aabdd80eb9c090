//! Single-head transformer layer over column-entity matrices.
//!
//! Entities live in the columns of a `[d, N]` matrix. Attention logits are
//! `KᵀQ / sqrt(d)` and are normalized along the columns, so column j of the
//! weight matrix is entity j's outgoing attention distribution over the
//! keys. Masked entities neither attend nor are attended to.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{NodeId, Tape};

const MASK_LOGIT: f64 = -1e9;

/// Registers one layer's parameters under `{prefix}.`: q/k/v/o projection
/// matrices, two layer norms, and the feed-forward pair.
pub fn register_layer(init: &mut Init, store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d;
    let ff = cfg.ff_hidden();
    for proj in ["wq", "wk", "wv", "wo"] {
        let (shape, values) = init.xavier(vec![d, d], d, d);
        store.insert(&format!("{prefix}.attn.{proj}"), shape, values, false);
    }
    for ln in ["ln1", "ln2"] {
        let (shape, values) = Init::ones(vec![d]);
        store.insert(&format!("{prefix}.{ln}.gain"), shape, values, false);
        let (shape, values) = Init::zeros(vec![d]);
        store.insert(&format!("{prefix}.{ln}.bias"), shape, values, false);
    }
    let (shape, values) = init.xavier(vec![ff, d], d, ff);
    store.insert(&format!("{prefix}.ff.w1"), shape, values, false);
    let (shape, values) = Init::zeros(vec![ff]);
    store.insert(&format!("{prefix}.ff.b1"), shape, values, false);
    let (shape, values) = init.xavier(vec![d, ff], ff, d);
    store.insert(&format!("{prefix}.ff.w2"), shape, values, false);
    let (shape, values) = Init::zeros(vec![d]);
    store.insert(&format!("{prefix}.ff.b2"), shape, values, false);
}

/// Masked scaled dot-product self-attention weights for `x: [d, n]`.
/// Returns the `[n, n]` column-stochastic weight matrix; masked keys carry
/// zero weight in every column.
pub fn attention_weights(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
    mask: &[bool],
    d: usize,
) -> Result<NodeId> {
    let q = tape.matmul(bound.id(&format!("{prefix}.attn.wq"))?, x)?;
    let k = tape.matmul(bound.id(&format!("{prefix}.attn.wk"))?, x)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(kt, q)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let n = mask.len();
    let mut additive = vec![0.0; n * n];
    for (i, &key_real) in mask.iter().enumerate() {
        if !key_real {
            for j in 0..n {
                additive[i * n + j] = MASK_LOGIT;
            }
        }
    }
    let masked = tape.add_const(scaled, &additive)?;
    tape.softmax_cols(masked)
}

/// One transformer layer: masked self-attention with a residual and layer
/// norm, then a relu feed-forward with another residual and layer norm.
pub fn layer_forward(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
    mask: &[bool],
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let weights = attention_weights(tape, bound, prefix, x, mask, cfg.d)?;
    let v = tape.matmul(bound.id(&format!("{prefix}.attn.wv"))?, x)?;
    let mixed = tape.matmul(v, weights)?;
    let attended = tape.matmul(bound.id(&format!("{prefix}.attn.wo"))?, mixed)?;

    let res1 = tape.add(x, attended)?;
    let h1 = tape.layer_norm_cols(
        res1,
        bound.id(&format!("{prefix}.ln1.gain"))?,
        bound.id(&format!("{prefix}.ln1.bias"))?,
    )?;

    let f1 = tape.linear(
        bound.id(&format!("{prefix}.ff.w1"))?,
        h1,
        bound.id(&format!("{prefix}.ff.b1"))?,
    )?;
    let f1 = tape.relu(f1);
    let f2 = tape.linear(
        bound.id(&format!("{prefix}.ff.w2"))?,
        f1,
        bound.id(&format!("{prefix}.ff.b2"))?,
    )?;

    let res2 = tape.add(h1, f2)?;
    tape.layer_norm_cols(
        res2,
        bound.id(&format!("{prefix}.ln2.gain"))?,
        bound.id(&format!("{prefix}.ln2.bias"))?,
    )
}
