//! End-to-end model: encoders, alignment, relevance features, the final
//! feature vector, and the task classifier.

use std::collections::BTreeMap;

use crate::config::{ModelConfig, TaskKind};
use crate::cross_modality::{self, register_cross_params};
use crate::encoders::{self, register_encoder_params, EntitySet, Source};
use crate::entity_relevance::{
    affinity, entity_relevance_feature, enumerate_entity_pairs, pair_label, register_relevance_cnn,
    AffinityMatrix, RelevanceFeature,
};
use crate::error::{CmrError, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::relational::{
    candidate_set, empty_selection, enumerate_relational_pairs, inter_modality_importance,
    rank_and_select, register_relational_params, relational_relevance_feature, TopKRelationSet,
};
use crate::tensor::{NodeId, Tape, Tensor};

/// Ablation variants: each removes one architectural block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Single-modality transformer stacks replaced by the linear projection
    /// to d alone.
    NoSmod,
    /// No cross-modality stack; single-modality outputs serve as entity
    /// representations.
    NoXmod,
    /// Entity relevance blocks dropped from the final feature.
    NoEntity,
    /// Relational relevance blocks dropped from the final feature.
    NoRel,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSmod,
        Variant::NoXmod,
        Variant::NoEntity,
        Variant::NoRel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSmod => "no_smod",
            Variant::NoXmod => "no_xmod",
            Variant::NoEntity => "no_entity",
            Variant::NoRel => "no_rel",
        }
    }

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut out = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoSmod => {
                out.text_layers = 0;
                out.vis_layers = 0;
            }
            Variant::NoXmod => out.cross_layers = 0,
            Variant::NoEntity => out.include_entity = false,
            Variant::NoRel => out.include_relational = false,
        }
        out
    }
}

impl std::str::FromStr for Variant {
    type Err = CmrError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CmrError::Config(format!("unknown variant '{s}'")))
    }
}

/// One example's raw model input.
#[derive(Debug, Clone)]
pub struct ExampleInput {
    pub tokens: Vec<u32>,
    /// One `[n_vis, d_raw_v]` feature matrix per image.
    pub images: Vec<Tensor>,
}

/// Everything a forward pass produces, for training, dumping, and tests.
#[derive(Debug)]
pub struct ForwardTrace {
    pub aligned: Vec<EntitySet>,
    /// Affinity matrix per enumerated pair, in pair order.
    pub affinities: Vec<AffinityMatrix>,
    /// Per relational pair: the two ranked selections (row side, column side).
    pub selections: Vec<(String, TopKRelationSet, TopKRelationSet)>,
    /// Relevance features in final-feature order.
    pub features: Vec<RelevanceFeature>,
    /// Concatenated final feature, `[B*d, 1]`.
    pub phi: NodeId,
    /// `[1, 1]` for NLVR-style heads, `[n_classes, 1]` for VQA-style.
    pub logits: NodeId,
}

#[derive(Debug, Clone)]
pub struct CmrModel {
    pub task: TaskKind,
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub seed: u64,
}

impl CmrModel {
    pub fn new(task: TaskKind, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);

        register_encoder_params(&mut init, &mut store, &cfg);
        register_cross_params(&mut init, &mut store, &cfg);

        if cfg.include_entity {
            for (a, b) in enumerate_entity_pairs(task) {
                let (h, w) = Self::pair_dims(&cfg, a, b);
                register_relevance_cnn(&mut init, &mut store, &format!("ent_cnn.{}", pair_label(a, b)), &cfg, h, w)?;
            }
        }
        if cfg.include_relational {
            register_relational_params(&mut init, &mut store, &cfg);
            for (a, b) in enumerate_relational_pairs(task) {
                register_relevance_cnn(
                    &mut init,
                    &mut store,
                    &format!("rel_cnn.{}", pair_label(a, b)),
                    &cfg,
                    cfg.k_top,
                    cfg.k_top,
                )?;
            }
        }

        let n_blocks = Self::block_count(task, &cfg);
        if n_blocks == 0 {
            return Err(CmrError::Config("at least one relevance block must be enabled".into()));
        }
        let phi_dim = n_blocks * cfg.d;
        let out_dim = match task {
            TaskKind::Nlvr => 1,
            TaskKind::Vqa => cfg.n_classes,
        };
        let mut in_dim = phi_dim;
        for layer in 1..=3 {
            let (shape, values) = init.xavier(vec![cfg.head_hidden, in_dim], in_dim, cfg.head_hidden);
            store.insert(&format!("head.fc{layer}.w"), shape, values, false);
            let (shape, values) = Init::zeros(vec![cfg.head_hidden]);
            store.insert(&format!("head.fc{layer}.b"), shape, values, false);
            in_dim = cfg.head_hidden;
        }
        let (shape, values) = init.xavier(vec![out_dim, in_dim], in_dim, out_dim);
        store.insert("head.out.w", shape, values, false);
        let (shape, values) = Init::zeros(vec![out_dim]);
        store.insert("head.out.b", shape, values, false);

        Ok(Self { task, cfg, params: store, seed })
    }

    fn pair_dims(cfg: &ModelConfig, a: Source, b: Source) -> (usize, usize) {
        let len = |s: Source| if s.is_text() { cfg.n_text } else { cfg.n_vis };
        (len(a), len(b))
    }

    pub fn block_count(task: TaskKind, cfg: &ModelConfig) -> usize {
        let pairs = enumerate_entity_pairs(task).len();
        let mut n = 0;
        if cfg.include_entity {
            n += pairs;
        }
        if cfg.include_relational {
            n += pairs;
        }
        n
    }

    /// Labels of the final feature's blocks, in concatenation order.
    pub fn block_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.cfg.include_entity {
            for (a, b) in enumerate_entity_pairs(self.task) {
                out.push(format!("entity:{}", pair_label(a, b)));
            }
        }
        if self.cfg.include_relational {
            for (a, b) in enumerate_relational_pairs(self.task) {
                out.push(format!("relational:{}", pair_label(a, b)));
            }
        }
        out
    }

    pub fn validate_input(&self, input: &ExampleInput) -> Result<()> {
        let want = self.task.n_images();
        if input.images.len() != want {
            return Err(CmrError::InvalidInput {
                op: "forward",
                reason: format!("task {} expects {} image(s), got {}", self.task.as_str(), want, input.images.len()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: &ExampleInput) -> Result<ForwardTrace> {
        self.validate_input(input)?;
        let cfg = &self.cfg;

        let mut sets = vec![encoders::encode_text(tape, bound, &self.params, cfg, &input.tokens)?];
        for (k, img) in input.images.iter().enumerate() {
            sets.push(encoders::encode_visual(tape, bound, &self.params, cfg, img, Source::Image(k as u8 + 1))?);
        }
        let aligned = cross_modality::align(tape, bound, cfg, &sets)?;
        let by_source = |s: Source| -> &EntitySet {
            aligned.iter().find(|e| e.source == s).expect("aligned set present")
        };

        let pairs = enumerate_entity_pairs(self.task);
        let mut affinities = Vec::with_capacity(pairs.len());
        for &(a, b) in &pairs {
            affinities.push(affinity(tape, by_source(a), by_source(b))?);
        }

        let mut features = Vec::new();
        if cfg.include_entity {
            for aff in &affinities {
                features.push(entity_relevance_feature(tape, bound, cfg, aff)?);
            }
        }

        let mut selections = Vec::new();
        if cfg.include_relational {
            let mut candidates = BTreeMap::new();
            for set in &aligned {
                candidates.insert(set.source, candidate_set(tape, bound, set)?);
            }
            for (&(a, b), aff) in pairs.iter().zip(&affinities) {
                let (_, va) = inter_modality_importance(tape, aff.node, &aff.col_mask)?;
                let aff_t = tape.transpose(aff.node)?;
                let (_, vb) = inter_modality_importance(tape, aff_t, &aff.row_mask)?;
                let top_a = match &candidates[&a] {
                    Some(c) => rank_and_select(tape, cfg, c, va)?,
                    None => empty_selection(tape, cfg, a),
                };
                let top_b = match &candidates[&b] {
                    Some(c) => rank_and_select(tape, cfg, c, vb)?,
                    None => empty_selection(tape, cfg, b),
                };
                features.push(relational_relevance_feature(tape, bound, cfg, &top_a, &top_b)?);
                selections.push((pair_label(a, b), top_a, top_b));
            }
        }

        let blocks: Vec<NodeId> = features.iter().map(|f| f.node).collect();
        let phi = tape.concat_rows(&blocks)?;

        let mut h = phi;
        for layer in 1..=3 {
            h = tape.linear(
                bound.id(&format!("head.fc{layer}.w"))?,
                h,
                bound.id(&format!("head.fc{layer}.b"))?,
            )?;
            h = tape.relu(h);
        }
        let logits = tape.linear(bound.id("head.out.w")?, h, bound.id("head.out.b")?)?;

        Ok(ForwardTrace { aligned, affinities, selections, features, phi, logits })
    }

    pub fn loss(&self, tape: &mut Tape, logits: NodeId, label: u32) -> Result<NodeId> {
        match self.task {
            TaskKind::Nlvr => {
                if label > 1 {
                    return Err(CmrError::InvalidInput {
                        op: "loss",
                        reason: format!("binary task label must be 0 or 1, got {label}"),
                    });
                }
                tape.sigmoid_bce(logits, label as u8)
            }
            TaskKind::Vqa => tape.cross_entropy(logits, label as usize),
        }
    }

    pub fn predict(&self, tape: &Tape, logits: NodeId) -> u32 {
        let v = tape.values(logits);
        match self.task {
            TaskKind::Nlvr => u32::from(v[0] > 0.0),
            TaskKind::Vqa => {
                let mut best = 0;
                for (i, &x) in v.iter().enumerate() {
                    if x > v[best] {
                        best = i;
                    }
                }
                best as u32
            }
        }
    }

    /// Forward plus loss on a fresh binding; convenience for evaluation and
    /// gradient checks.
    pub fn loss_on(&self, tape: &mut Tape, input: &ExampleInput, label: u32) -> Result<(Bound, ForwardTrace, NodeId)> {
        let bound = self.params.bind(tape);
        let trace = self.forward(tape, &bound, input)?;
        let loss = self.loss(tape, trace.logits, label)?;
        Ok((bound, trace, loss))
    }
}
