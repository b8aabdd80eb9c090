//! Cross-modality alignment: one joint self-attention stack over the
//! concatenated entity matrix of every modality source.

use crate::config::ModelConfig;
use crate::encoders::{EntitySet, Source};
use crate::error::{CmrError, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{NodeId, Tape};
use crate::transformer;

/// Concatenated entity matrix `S: [d, N_total]` with per-column source
/// spans. Column order is text first, then images by source id.
#[derive(Debug, Clone)]
pub struct JointEntityMatrix {
    pub node: NodeId,
    pub mask: Vec<bool>,
    pub spans: Vec<(Source, std::ops::Range<usize>)>,
}

pub fn register_cross_params(init: &mut Init, store: &mut ParamStore, cfg: &ModelConfig) {
    for i in 0..cfg.cross_layers {
        transformer::register_layer(init, store, &format!("xmod.layer{i}"), cfg);
    }
}

pub fn join(tape: &mut Tape, sets: &[EntitySet]) -> Result<JointEntityMatrix> {
    if sets.len() < 2 {
        return Err(CmrError::InvalidInput {
            op: "align",
            reason: format!("need at least 2 entity sets, got {}", sets.len()),
        });
    }
    debug_assert!(sets.windows(2).all(|w| w[0].source < w[1].source), "sets must arrive in source order");
    let nodes: Vec<NodeId> = sets.iter().map(|s| s.node).collect();
    let node = tape.concat_cols(&nodes)?;
    let mut mask = Vec::new();
    let mut spans = Vec::new();
    let mut off = 0;
    for s in sets {
        let n = s.n_entities();
        spans.push((s.source, off..off + n));
        mask.extend_from_slice(&s.mask);
        off += n;
    }
    Ok(JointEntityMatrix { node, mask, spans })
}

/// One cross-modality transformer layer over the joint matrix. All entities
/// attend across modality boundaries; masked columns neither attend nor are
/// attended to.
pub fn cross_attention_layer(
    tape: &mut Tape,
    bound: &Bound,
    layer: usize,
    joint: &JointEntityMatrix,
    cfg: &ModelConfig,
) -> Result<JointEntityMatrix> {
    let node = transformer::layer_forward(
        tape,
        bound,
        &format!("xmod.layer{layer}"),
        joint.node,
        &joint.mask,
        cfg,
    )?;
    Ok(JointEntityMatrix { node, mask: joint.mask.clone(), spans: joint.spans.clone() })
}

/// Aligns all modality sources in one representation space: concatenate,
/// apply the cross-modality stack, split back per source. With zero layers
/// this is the identity pipeline.
pub fn align(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    sets: &[EntitySet],
) -> Result<Vec<EntitySet>> {
    let mut joint = join(tape, sets)?;
    for i in 0..cfg.cross_layers {
        joint = cross_attention_layer(tape, bound, i, &joint, cfg)?;
    }
    let mut out = Vec::with_capacity(sets.len());
    for (source, range) in &joint.spans {
        let node = tape.slice_cols(joint.node, range.start, range.len())?;
        let mask = joint.mask[range.clone()].to_vec();
        out.push(EntitySet { source: *source, node, mask });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{self, register_encoder_params};
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig) -> ParamStore {
        let mut store = ParamStore::new();
        let mut init = Init::new(21);
        register_encoder_params(&mut init, &mut store, cfg);
        register_cross_params(&mut init, &mut store, cfg);
        store
    }

    fn rand_rois(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..cfg.n_vis * cfg.d_raw_v).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![cfg.n_vis, cfg.d_raw_v], values).unwrap()
    }

    fn encode_all(
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &ModelConfig,
        tokens: &[u32],
        images: &[Tensor],
    ) -> (Bound, Vec<EntitySet>) {
        let bound = store.bind(tape);
        let mut sets = vec![encoders::encode_text(tape, &bound, store, cfg, tokens).unwrap()];
        for (k, img) in images.iter().enumerate() {
            sets.push(
                encoders::encode_visual(tape, &bound, store, cfg, img, Source::Image(k as u8 + 1)).unwrap(),
            );
        }
        (bound, sets)
    }

    #[test]
    fn zero_layers_is_the_identity_pipeline() {
        let cfg = ModelConfig { cross_layers: 0, ..ModelConfig::tiny() };
        let store = setup(&cfg);
        let mut tape = Tape::new();
        let (bound, sets) = encode_all(&mut tape, &store, &cfg, &[1, 2], &[rand_rois(&cfg, 1)]);
        let aligned = align(&mut tape, &bound, &cfg, &sets).unwrap();
        for (before, after) in sets.iter().zip(&aligned) {
            assert_eq!(tape.values(before.node), tape.values(after.node));
            assert_eq!(before.mask, after.mask);
        }
    }

    #[test]
    fn cross_modal_information_flows_into_text() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let run = |rois: &Tensor| {
            let mut tape = Tape::new();
            let (bound, sets) = encode_all(&mut tape, &store, &cfg, &[1, 2, 3], &[rois.clone()]);
            let aligned = align(&mut tape, &bound, &cfg, &sets).unwrap();
            tape.tensor(aligned[0].node)
        };
        let base = run(&rand_rois(&cfg, 2));
        let mut perturbed = rand_rois(&cfg, 2).values().to_vec();
        perturbed[0] += 0.5;
        let moved = run(&Tensor::new(vec![cfg.n_vis, cfg.d_raw_v], perturbed).unwrap());
        let delta: f64 = base
            .values()
            .iter()
            .zip(moved.values())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 0.0, "text representations ignored a visual change");
    }

    #[test]
    fn nlvr_style_input_aligns_three_sets_with_fixed_sizes() {
        let cfg = ModelConfig { n_text: 20, n_vis: 36, k_top: 10, ..ModelConfig::tiny() };
        let store = setup(&cfg);
        let mut tape = Tape::new();
        let (bound, sets) = encode_all(
            &mut tape,
            &store,
            &cfg,
            &[1, 2, 3],
            &[rand_rois(&cfg, 3), rand_rois(&cfg, 4)],
        );
        let aligned = align(&mut tape, &bound, &cfg, &sets).unwrap();
        let sizes: Vec<usize> = aligned.iter().map(EntitySet::n_entities).collect();
        assert_eq!(sizes, vec![20, 36, 36]);
    }

    #[test]
    fn fewer_than_two_sets_is_an_error() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let mut tape = Tape::new();
        let (bound, sets) = encode_all(&mut tape, &store, &cfg, &[1], &[]);
        assert!(align(&mut tape, &bound, &cfg, &sets).is_err());
    }

    #[test]
    fn visual_permutation_equivariance_with_positions_zeroed() {
        let cfg = ModelConfig::tiny();
        let mut store = setup(&cfg);
        // zero the learned position table so entity order carries no signal
        let pos = store.get_mut("enc.vis.pos").unwrap();
        pos.values.iter_mut().for_each(|v| *v = 0.0);

        let rois = rand_rois(&cfg, 8);
        let perm: Vec<usize> = vec![2, 0, 3, 1];
        let mut permuted = vec![0.0; rois.numel()];
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..cfg.d_raw_v {
                permuted[new_row * cfg.d_raw_v + c] = rois.values()[old_row * cfg.d_raw_v + c];
            }
        }
        let permuted = Tensor::new(vec![cfg.n_vis, cfg.d_raw_v], permuted).unwrap();

        let run = |rois: &Tensor| {
            let mut tape = Tape::new();
            let (bound, sets) = encode_all(&mut tape, &store, &cfg, &[1, 2], &[rois.clone()]);
            let aligned = align(&mut tape, &bound, &cfg, &sets).unwrap();
            tape.tensor(aligned[1].node)
        };
        let base = run(&rois);
        let shuffled = run(&permuted);
        for (new_col, &old_col) in perm.iter().enumerate() {
            for r in 0..cfg.d {
                assert!(
                    (base.at(r, old_col) - shuffled.at(r, new_col)).abs() < 1e-9,
                    "outputs did not permute with the inputs"
                );
            }
        }
    }
}
