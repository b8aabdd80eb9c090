//! Relational relevance: pairwise relation representations within each
//! modality, ranked by intra-modality score times inter-modality
//! importance, with the top-K sets matched across modalities.
//!
//! Relations are non-directional: every unordered pair of unmasked
//! entities (i, j) with i < j is a candidate. Its representation r comes
//! from a relation MLP over the concatenated entity representations; its
//! intra-modality score u is a softmax over all of the source's candidates;
//! its importance V[i][j] is the outer product of the per-entity row-max of
//! the pair's affinity matrix. The ranking score is w = u * V[i][j] over
//! the strict upper triangle, so no self-relation can ever be selected.
//!
//! Top-K selection is hard. Gradients flow through the selected relation
//! representations and through the scores of every candidate (the selected
//! w values weight the relational affinity, and each is softmax-coupled to
//! all other candidates).

use crate::config::{ModelConfig, TaskKind};
use crate::encoders::{EntitySet, Source};
use crate::entity_relevance::{pair_label, relevance_cnn, FeatureKind, RelevanceFeature};
use crate::error::{CmrError, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{NodeId, Tape, Tensor};

/// All relation candidates of one modality source, before ranking.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub source: Source,
    /// Entity index pairs, i < j, unmasked entities only.
    pub pairs: Vec<(usize, usize)>,
    /// Relation representations, `[d, P]`.
    pub r: NodeId,
    /// Normalized intra-modality scores, `[P, 1]`; sums to 1.
    pub u: NodeId,
}

/// Scores of one candidate after ranking against a counterpart modality.
#[derive(Debug, Clone)]
pub struct CandidateScore {
    pub i: usize,
    pub j: usize,
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub selected: bool,
    pub rank: Option<usize>,
}

/// The top-K ranked relations of one source with respect to one counterpart.
#[derive(Debug, Clone)]
pub struct TopKRelationSet {
    pub source: Source,
    /// Configured K; `r` always has this many columns.
    pub k: usize,
    /// Number of real (non-padded) columns.
    pub effective_k: usize,
    /// Every candidate with its scores, in (i, j) order.
    pub candidates: Vec<CandidateScore>,
    /// Selected relation representations `[d, K]`, zero-padded past
    /// `effective_k`; column order follows the ranking.
    pub r: NodeId,
    /// Selected ranking scores `[K]`, zero-padded; these weight the
    /// relational affinity so the scoring path stays trainable.
    pub w: NodeId,
}

fn modality_tag(source: Source) -> &'static str {
    match source {
        Source::Text => "t",
        Source::Image(_) => "v",
    }
}

/// Registers the per-modality relation MLPs: the `2d -> d` relation map and
/// the `d -> 1` score head, one hidden layer each. Image sources share the
/// visual parameters.
pub fn register_relational_params(init: &mut Init, store: &mut ParamStore, cfg: &ModelConfig) {
    for m in ["t", "v"] {
        let (shape, values) = init.xavier(vec![cfg.mlp_hidden, 2 * cfg.d], 2 * cfg.d, cfg.mlp_hidden);
        store.insert(&format!("rel.{m}.map.w1"), shape, values, false);
        let (shape, values) = Init::zeros(vec![cfg.mlp_hidden]);
        store.insert(&format!("rel.{m}.map.b1"), shape, values, false);
        let (shape, values) = init.xavier(vec![cfg.d, cfg.mlp_hidden], cfg.mlp_hidden, cfg.d);
        store.insert(&format!("rel.{m}.map.w2"), shape, values, false);
        let (shape, values) = Init::zeros(vec![cfg.d]);
        store.insert(&format!("rel.{m}.map.b2"), shape, values, false);

        let (shape, values) = init.xavier(vec![cfg.mlp_hidden, cfg.d], cfg.d, cfg.mlp_hidden);
        store.insert(&format!("rel.{m}.score.w1"), shape, values, false);
        let (shape, values) = Init::zeros(vec![cfg.mlp_hidden]);
        store.insert(&format!("rel.{m}.score.b1"), shape, values, false);
        let (shape, values) = init.xavier(vec![1, cfg.mlp_hidden], cfg.mlp_hidden, 1);
        store.insert(&format!("rel.{m}.score.w2"), shape, values, false);
        let (shape, values) = Init::zeros(vec![1]);
        store.insert(&format!("rel.{m}.score.b2"), shape, values, false);
    }
}

/// Builds r for every unordered pair of unmasked entities. Returns `None`
/// when fewer than two entities are unmasked; downstream pads.
pub fn relation_representations(
    tape: &mut Tape,
    bound: &Bound,
    set: &EntitySet,
) -> Result<Option<(Vec<(usize, usize)>, NodeId)>> {
    let idx = set.unmasked_indices();
    if idx.len() < 2 {
        return Ok(None);
    }
    let mut pairs = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            pairs.push((i, j));
            left.push(i);
            right.push(j);
        }
    }
    let first = tape.gather_cols(set.node, &left)?;
    let second = tape.gather_cols(set.node, &right)?;
    let stacked = tape.concat_rows(&[first, second])?;
    let m = modality_tag(set.source);
    let h = tape.linear(bound.id(&format!("rel.{m}.map.w1"))?, stacked, bound.id(&format!("rel.{m}.map.b1"))?)?;
    let h = tape.relu(h);
    let r = tape.linear(bound.id(&format!("rel.{m}.map.w2"))?, h, bound.id(&format!("rel.{m}.map.b2"))?)?;
    Ok(Some((pairs, r)))
}

/// Softmax-normalized score per candidate: `[P, 1]`, summing to 1. The
/// normalization runs over the source's unordered candidates.
pub fn intra_modality_scores(
    tape: &mut Tape,
    bound: &Bound,
    source: Source,
    r: NodeId,
) -> Result<NodeId> {
    let m = modality_tag(source);
    let h = tape.linear(bound.id(&format!("rel.{m}.score.w1"))?, r, bound.id(&format!("rel.{m}.score.b1"))?)?;
    let h = tape.relu(h);
    let z = tape.linear(bound.id(&format!("rel.{m}.score.w2"))?, h, bound.id(&format!("rel.{m}.score.b2"))?)?;
    let zt = tape.transpose(z)?; // [P, 1]
    tape.softmax_cols(zt)
}

pub fn candidate_set(
    tape: &mut Tape,
    bound: &Bound,
    set: &EntitySet,
) -> Result<Option<CandidateSet>> {
    let Some((pairs, r)) = relation_representations(tape, bound, set)? else {
        return Ok(None);
    };
    let u = intra_modality_scores(tape, bound, set.source, r)?;
    Ok(Some(CandidateSet { source: set.source, pairs, r, u }))
}

/// Inter-modality importance of the affinity's row side: `v[i]` is the
/// row-wise max over unmasked columns, and `V = v ⊗ v`.
pub fn inter_modality_importance(
    tape: &mut Tape,
    affinity: NodeId,
    valid_cols: &[bool],
) -> Result<(NodeId, NodeId)> {
    let v = tape.row_max(affinity, valid_cols)?;
    let big_v = tape.outer(v, v)?;
    Ok((v, big_v))
}

/// Ranks candidates by `w = u * V[i][j]` over the strict upper triangle,
/// sorts descending with (i, j) lexicographic tie-breaks, and keeps the
/// first K. When fewer than K candidates exist, R and w are zero-padded and
/// the effective count is recorded.
pub fn rank_and_select(
    tape: &mut Tape,
    cfg: &ModelConfig,
    cand: &CandidateSet,
    importance: NodeId,
) -> Result<TopKRelationSet> {
    let n = tape.shape(importance)[0];
    let u_vals = tape.values(cand.u).to_vec();
    let v_vals = tape.values(importance).to_vec();
    let p = cand.pairs.len();
    debug_assert_eq!(u_vals.len(), p);

    let mut order: Vec<usize> = (0..p).collect();
    let w_of = |c: usize| -> f64 {
        let (i, j) = cand.pairs[c];
        u_vals[c] * v_vals[i * n + j]
    };
    for c in 0..p {
        let w = w_of(c);
        if !w.is_finite() {
            return Err(CmrError::InvalidInput {
                op: "rank_and_select",
                reason: format!("non-finite ranking score for pair {:?}", cand.pairs[c]),
            });
        }
    }
    order.sort_by(|&a, &b| {
        w_of(b)
            .partial_cmp(&w_of(a))
            .expect("scores are finite")
            .then(cand.pairs[a].cmp(&cand.pairs[b]))
    });

    let effective_k = cfg.k_top.min(p);
    let chosen = &order[..effective_k];

    let mut candidates: Vec<CandidateScore> = cand
        .pairs
        .iter()
        .enumerate()
        .map(|(c, &(i, j))| CandidateScore {
            i,
            j,
            u: u_vals[c],
            v: v_vals[i * n + j],
            w: w_of(c),
            selected: false,
            rank: None,
        })
        .collect();
    for (rank, &c) in chosen.iter().enumerate() {
        candidates[c].selected = true;
        candidates[c].rank = Some(rank);
    }

    // R columns follow the ranking; w carries the selected scores, which
    // later weight the relational affinity
    let r_sel = tape.gather_cols(cand.r, chosen)?;
    let ut = tape.transpose(cand.u)?; // [1, P]
    let u_sel = tape.gather_cols(ut, chosen)?;
    let v_flat = tape.reshape(importance, vec![1, n * n])?;
    let v_idx: Vec<usize> = chosen.iter().map(|&c| cand.pairs[c].0 * n + cand.pairs[c].1).collect();
    let v_sel = tape.gather_cols(v_flat, &v_idx)?;
    let w_sel = tape.mul(u_sel, v_sel)?;

    let (r, w_row) = if effective_k < cfg.k_top {
        let pad = cfg.k_top - effective_k;
        let zero_r = tape.leaf(&Tensor::zeros(vec![cfg.d, pad]), false);
        let zero_w = tape.leaf(&Tensor::zeros(vec![1, pad]), false);
        (tape.concat_cols(&[r_sel, zero_r])?, tape.concat_cols(&[w_sel, zero_w])?)
    } else {
        (r_sel, w_sel)
    };
    let w = tape.reshape(w_row, vec![cfg.k_top])?;

    Ok(TopKRelationSet {
        source: cand.source,
        k: cfg.k_top,
        effective_k,
        candidates,
        r,
        w,
    })
}

/// An all-padding selection for a source with no candidates.
pub fn empty_selection(tape: &mut Tape, cfg: &ModelConfig, source: Source) -> TopKRelationSet {
    let r = tape.leaf(&Tensor::zeros(vec![cfg.d, cfg.k_top]), false);
    let w = tape.leaf(&Tensor::zeros(vec![cfg.k_top]), false);
    TopKRelationSet {
        source,
        k: cfg.k_top,
        effective_k: 0,
        candidates: Vec::new(),
        r,
        w,
    }
}

/// Relational relevance between two top-K sets: the K x K affinity
/// `(R^a)ᵀ R^b`, weighted by the selected ranking scores on both sides, fed
/// through this pair's own CNN. Zero-padded columns contribute zero rows
/// and columns.
pub fn relational_relevance_feature(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    a: &TopKRelationSet,
    b: &TopKRelationSet,
) -> Result<RelevanceFeature> {
    let at = tape.transpose(a.r)?;
    let grid = tape.matmul(at, b.r)?;
    let weights = tape.outer(a.w, b.w)?;
    let weighted = tape.mul(grid, weights)?;
    let label = pair_label(a.source, b.source);
    let node = relevance_cnn(tape, bound, &format!("rel_cnn.{label}"), cfg, weighted)?;
    Ok(RelevanceFeature { pair_label: label, kind: FeatureKind::Relational, node })
}

/// The relational pair set mirrors the entity pair set.
pub fn enumerate_relational_pairs(task: TaskKind) -> Vec<(Source, Source)> {
    crate::entity_relevance::enumerate_entity_pairs(task)
}
