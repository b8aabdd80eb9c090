//! Entity relevance: the affinity matrix between two aligned entity sets
//! and its d-dimensional CNN feature.

use crate::config::{ModelConfig, TaskKind};
use crate::encoders::{EntitySet, Source};
use crate::error::{CmrError, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{NodeId, Tape, Tensor};

/// Relevance-score grid between two modality sources: `A[i][j]` is the dot
/// product of aligned entity i of the row source and entity j of the column
/// source. Masked rows and columns are zeroed so padding never reaches the
/// feature CNNs.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub pair: (Source, Source),
    pub node: NodeId,
    pub row_mask: Vec<bool>,
    pub col_mask: Vec<bool>,
}

/// One d-dimensional relevance vector tagged with its source pair.
#[derive(Debug, Clone)]
pub struct RelevanceFeature {
    pub pair_label: String,
    pub kind: FeatureKind,
    /// `[d, 1]` column on the tape.
    pub node: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Entity,
    Relational,
}

pub fn pair_label(a: Source, b: Source) -> String {
    format!("{}_{}", a.label(), b.label())
}

/// Modality-source pairs whose entity relevance is computed for a task:
/// one text-visual pair for VQA; two text-visual pairs plus the
/// visual-visual pair for NLVR. Text never pairs with itself.
pub fn enumerate_entity_pairs(task: TaskKind) -> Vec<(Source, Source)> {
    match task {
        TaskKind::Vqa => vec![(Source::Text, Source::Image(1))],
        TaskKind::Nlvr => vec![
            (Source::Text, Source::Image(1)),
            (Source::Text, Source::Image(2)),
            (Source::Image(1), Source::Image(2)),
        ],
    }
}

/// `A = (S'^a)ᵀ S'^b` with masked rows and columns zeroed.
pub fn affinity(tape: &mut Tape, a: &EntitySet, b: &EntitySet) -> Result<AffinityMatrix> {
    let at = tape.transpose(a.node)?;
    let raw = tape.matmul(at, b.node)?;
    let (rows, cols) = (a.n_entities(), b.n_entities());
    let node = if a.mask.iter().all(|&m| m) && b.mask.iter().all(|&m| m) {
        raw
    } else {
        let mut keep = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                if a.mask[i] && b.mask[j] {
                    keep[i * cols + j] = 1.0;
                }
            }
        }
        tape.mul_const(raw, &keep)?
    };
    Ok(AffinityMatrix {
        pair: (a.source, b.source),
        node,
        row_mask: a.mask.clone(),
        col_mask: b.mask.clone(),
    })
}

/// Registers the conv/pool/fc parameters of one relevance CNN under
/// `{prefix}.`, sized for an `in_h x in_w` input. Each pair owns a disjoint
/// parameter set.
pub fn register_relevance_cnn(
    init: &mut Init,
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    in_h: usize,
    in_w: usize,
) -> Result<()> {
    let flat = cfg.cnn_output_elems(in_h, in_w)?;
    let k = cfg.cnn_kernel;
    let mut ci = 1;
    for (idx, &co) in cfg.cnn_channels.iter().enumerate() {
        let fan_in = ci * k * k;
        let (shape, values) = init.xavier(vec![co, ci, k, k], fan_in, co);
        store.insert(&format!("{prefix}.conv{idx}.k"), shape, values, false);
        let (shape, values) = Init::zeros(vec![co]);
        store.insert(&format!("{prefix}.conv{idx}.b"), shape, values, false);
        ci = co;
    }
    let (shape, values) = init.xavier(vec![cfg.cnn_fc_hidden, flat], flat, cfg.cnn_fc_hidden);
    store.insert(&format!("{prefix}.fc1.w"), shape, values, false);
    let (shape, values) = Init::zeros(vec![cfg.cnn_fc_hidden]);
    store.insert(&format!("{prefix}.fc1.b"), shape, values, false);
    let (shape, values) = init.xavier(vec![cfg.d, cfg.cnn_fc_hidden], cfg.cnn_fc_hidden, cfg.d);
    store.insert(&format!("{prefix}.fc2.w"), shape, values, false);
    let (shape, values) = Init::zeros(vec![cfg.d]);
    store.insert(&format!("{prefix}.fc2.b"), shape, values, false);
    Ok(())
}

/// Treats a score grid as a 1-channel image: conv, relu, and 2x2 max-pool
/// per conv layer, then two fully connected layers down to a `[d, 1]`
/// feature column.
pub fn relevance_cnn(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &ModelConfig,
    grid: NodeId,
) -> Result<NodeId> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 2 {
        return Err(CmrError::InvalidInput {
            op: "relevance_cnn",
            reason: format!("expected a 2-d score grid, got {shape:?}"),
        });
    }
    let mut x = tape.reshape(grid, vec![1, shape[0], shape[1]])?;
    for idx in 0..cfg.cnn_channels.len() {
        let k = bound.id(&format!("{prefix}.conv{idx}.k"))?;
        let b = bound.id(&format!("{prefix}.conv{idx}.b"))?;
        x = tape.conv2d(x, k, b)?;
        x = tape.relu(x);
        x = tape.maxpool2(x)?;
    }
    let flat = tape.flatten(x);
    let h = tape.linear(bound.id(&format!("{prefix}.fc1.w"))?, flat, bound.id(&format!("{prefix}.fc1.b"))?)?;
    let h = tape.relu(h);
    tape.linear(bound.id(&format!("{prefix}.fc2.w"))?, h, bound.id(&format!("{prefix}.fc2.b"))?)
}

pub fn entity_relevance_feature(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    aff: &AffinityMatrix,
) -> Result<RelevanceFeature> {
    let label = pair_label(aff.pair.0, aff.pair.1);
    let node = relevance_cnn(tape, bound, &format!("ent_cnn.{label}"), cfg, aff.node)?;
    Ok(RelevanceFeature { pair_label: label, kind: FeatureKind::Entity, node })
}

/// Serializes a score grid as CSV: one line per row-source entity, one
/// column per column-source entity, no header.
pub fn affinity_csv(matrix: &Tensor) -> String {
    let &[rows, cols] = matrix.shape() else {
        return String::new();
    };
    let mut out = String::new();
    for i in 0..rows {
        let line: Vec<String> = (0..cols).map(|j| format!("{}", matrix.at(i, j))).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
