//! Single-modality representations: frozen stub feature extractors plus
//! trainable per-modality transformer stacks.
//!
//! The frozen part stands in for a pretrained language model and region
//! detector: random embedding tables seeded at model init and excluded from
//! optimization. The trainable part is a projection to the shared width d,
//! a segment embedding per modality source, a learned position embedding on
//! the visual side, and the per-modality transformer stack.

use crate::config::ModelConfig;
use crate::error::{CmrError, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::transformer;

/// One modality source: the statement text, or one of the images numbered
/// from 1. Sources index segment embeddings and name parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Text,
    Image(u8),
}

impl Source {
    pub fn label(self) -> String {
        match self {
            Source::Text => "t".to_string(),
            Source::Image(k) => format!("v{k}"),
        }
    }

    pub fn segment_index(self) -> usize {
        match self {
            Source::Text => 0,
            Source::Image(k) => k as usize,
        }
    }

    pub fn is_text(self) -> bool {
        matches!(self, Source::Text)
    }
}

/// Entity representations of one modality source as columns of a `[d, N]`
/// node, with a per-entity validity mask.
#[derive(Debug, Clone)]
pub struct EntitySet {
    pub source: Source,
    pub node: NodeId,
    pub mask: Vec<bool>,
}

impl EntitySet {
    pub fn n_entities(&self) -> usize {
        self.mask.len()
    }

    pub fn unmasked_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

const N_SEGMENTS: usize = 3;

pub fn register_encoder_params(init: &mut Init, store: &mut ParamStore, cfg: &ModelConfig) {
    // frozen stub tables; bitwise stable across training by contract
    let (shape, values) = init.normal(vec![cfg.d_raw_t, cfg.vocab_size], 1.0);
    store.insert("frozen.text_embed", shape, values, true);
    let (shape, values) = init.normal(vec![cfg.d_raw_t, cfg.n_text], 1.0);
    store.insert("frozen.text_pos", shape, values, true);
    let (shape, values) = init.normal(vec![cfg.d, N_SEGMENTS], 1.0);
    store.insert("frozen.segment", shape, values, true);

    let (shape, values) = init.xavier(vec![cfg.d, cfg.d_raw_t], cfg.d_raw_t, cfg.d);
    store.insert("enc.text.proj.w", shape, values, false);
    let (shape, values) = Init::zeros(vec![cfg.d]);
    store.insert("enc.text.proj.b", shape, values, false);
    for i in 0..cfg.text_layers {
        transformer::register_layer(init, store, &format!("enc.text.layer{i}"), cfg);
    }

    let (shape, values) = init.xavier(vec![cfg.d, cfg.d_raw_v], cfg.d_raw_v, cfg.d);
    store.insert("enc.vis.proj.w", shape, values, false);
    let (shape, values) = Init::zeros(vec![cfg.d]);
    store.insert("enc.vis.proj.b", shape, values, false);
    let (shape, values) = init.normal(vec![cfg.d, cfg.n_vis], 0.1);
    store.insert("enc.vis.pos", shape, values, false);
    for i in 0..cfg.vis_layers {
        transformer::register_layer(init, store, &format!("enc.vis.layer{i}"), cfg);
    }
}

/// Broadcast of one segment embedding column across `n` entity columns,
/// read straight from the frozen table.
fn segment_broadcast(store: &ParamStore, cfg: &ModelConfig, source: Source, n: usize) -> Result<Vec<f64>> {
    let seg = store.get("frozen.segment")?;
    let idx = source.segment_index();
    let mut out = vec![0.0; cfg.d * n];
    for r in 0..cfg.d {
        let v = seg.values[r * N_SEGMENTS + idx];
        for c in 0..n {
            out[r * n + c] = v;
        }
    }
    Ok(out)
}

/// Builds the frozen raw text matrix `[d_raw_t, n_text]`: token plus
/// position embeddings at real positions, zeros at padding.
pub fn text_raw_input(store: &ParamStore, cfg: &ModelConfig, token_ids: &[u32]) -> Result<(Tensor, Vec<bool>)> {
    let embed = store.get("frozen.text_embed")?;
    let pos = store.get("frozen.text_pos")?;
    // over-length input truncates to the fixed entity count
    let len = token_ids.len().min(cfg.n_text);
    let mut mask = vec![false; cfg.n_text];
    let mut values = vec![0.0; cfg.d_raw_t * cfg.n_text];
    for (j, &tok) in token_ids[..len].iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(CmrError::InvalidInput {
                op: "encode_text",
                reason: format!("unknown token id {tok} (vocab size {})", cfg.vocab_size),
            });
        }
        mask[j] = true;
        for r in 0..cfg.d_raw_t {
            values[r * cfg.n_text + j] =
                embed.values[r * cfg.vocab_size + tok as usize] + pos.values[r * cfg.n_text + j];
        }
    }
    Ok((Tensor::new(vec![cfg.d_raw_t, cfg.n_text], values)?, mask))
}

/// Runs the trainable text pipeline on an already-built raw matrix. Split
/// out so tests can perturb padded columns directly.
pub fn encode_text_from_raw(
    tape: &mut Tape,
    bound: &Bound,
    store: &ParamStore,
    cfg: &ModelConfig,
    raw: &Tensor,
    mask: Vec<bool>,
) -> Result<EntitySet> {
    let x = tape.leaf(raw, false);
    let mut h = tape.linear(bound.id("enc.text.proj.w")?, x, bound.id("enc.text.proj.b")?)?;
    let seg = segment_broadcast(store, cfg, Source::Text, cfg.n_text)?;
    h = tape.add_const(h, &seg)?;
    for i in 0..cfg.text_layers {
        h = transformer::layer_forward(tape, bound, &format!("enc.text.layer{i}"), h, &mask, cfg)?;
    }
    Ok(EntitySet { source: Source::Text, node: h, mask })
}

pub fn encode_text(
    tape: &mut Tape,
    bound: &Bound,
    store: &ParamStore,
    cfg: &ModelConfig,
    token_ids: &[u32],
) -> Result<EntitySet> {
    let (raw, mask) = text_raw_input(store, cfg, token_ids)?;
    encode_text_from_raw(tape, bound, store, cfg, &raw, mask)
}

/// Encodes one image's ROI features (`[n_vis, d_raw_v]`, one row per ROI).
/// All visual entities are real, so the mask is all true.
pub fn encode_visual(
    tape: &mut Tape,
    bound: &Bound,
    store: &ParamStore,
    cfg: &ModelConfig,
    roi_features: &Tensor,
    source: Source,
) -> Result<EntitySet> {
    if roi_features.shape() != [cfg.n_vis, cfg.d_raw_v] {
        return Err(CmrError::DimensionMismatch {
            op: "encode_visual",
            lhs: roi_features.shape().to_vec(),
            rhs: vec![cfg.n_vis, cfg.d_raw_v],
        });
    }
    debug_assert!(matches!(source, Source::Image(_)));
    // column-entity orientation
    let mut raw = vec![0.0; cfg.d_raw_v * cfg.n_vis];
    for e in 0..cfg.n_vis {
        for r in 0..cfg.d_raw_v {
            raw[r * cfg.n_vis + e] = roi_features.values()[e * cfg.d_raw_v + r];
        }
    }
    let raw = Tensor::new(vec![cfg.d_raw_v, cfg.n_vis], raw)?;
    let x = tape.leaf(&raw, false);
    let mut h = tape.linear(bound.id("enc.vis.proj.w")?, x, bound.id("enc.vis.proj.b")?)?;
    // learned index-based position embedding stands in for pixel geometry
    h = tape.add(h, bound.id("enc.vis.pos")?)?;
    let seg = segment_broadcast(store, cfg, source, cfg.n_vis)?;
    h = tape.add_const(h, &seg)?;
    let mask = vec![true; cfg.n_vis];
    for i in 0..cfg.vis_layers {
        h = transformer::layer_forward(tape, bound, &format!("enc.vis.layer{i}"), h, &mask, cfg)?;
    }
    Ok(EntitySet { source, node: h, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig) -> ParamStore {
        let mut store = ParamStore::new();
        let mut init = Init::new(9);
        register_encoder_params(&mut init, &mut store, cfg);
        store
    }

    fn rand_rois(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..cfg.n_vis * cfg.d_raw_v).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![cfg.n_vis, cfg.d_raw_v], values).unwrap()
    }

    #[test]
    fn empty_input_yields_all_false_mask() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let set = encode_text(&mut tape, &bound, &store, &cfg, &[]).unwrap();
        assert!(set.mask.iter().all(|&m| !m));
        assert!(tape.values(set.node).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoding_is_bitwise_deterministic() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let run = || {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let set = encode_text(&mut tape, &bound, &store, &cfg, &[1, 2, 3]).unwrap();
            tape.values(set.node).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn unknown_token_id_is_an_input_error() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        assert!(encode_text(&mut tape, &bound, &store, &cfg, &[999]).is_err());
    }

    #[test]
    fn over_length_text_truncates_to_fixed_size() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let long: Vec<u32> = (0..10).map(|i| i % 4).collect();
        let set = encode_text(&mut tape, &bound, &store, &cfg, &long).unwrap();
        assert_eq!(set.n_entities(), cfg.n_text);
        assert!(set.mask.iter().all(|&m| m));
    }

    #[test]
    fn real_positions_ignore_padding_content() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let (raw, mask) = text_raw_input(&store, &cfg, &[1, 2]).unwrap();

        // corrupt the padded columns of the raw matrix
        let mut corrupted = raw.values().to_vec();
        for j in 2..cfg.n_text {
            for r in 0..cfg.d_raw_t {
                corrupted[r * cfg.n_text + j] = 7.5 + (r + j) as f64;
            }
        }
        let corrupted = Tensor::new(vec![cfg.d_raw_t, cfg.n_text], corrupted).unwrap();

        let encode = |raw: &Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let set = encode_text_from_raw(&mut tape, &bound, &store, &cfg, raw, mask.clone()).unwrap();
            tape.tensor(set.node)
        };
        let clean = encode(&raw);
        let dirty = encode(&corrupted);
        for j in 0..2 {
            for r in 0..cfg.d {
                assert!(
                    (clean.at(r, j) - dirty.at(r, j)).abs() < 1e-9,
                    "padding content leaked into real position {j}"
                );
            }
        }
    }

    #[test]
    fn source_id_changes_visual_representations() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let rois = rand_rois(&cfg, 4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let a = encode_visual(&mut tape, &bound, &store, &cfg, &rois, Source::Image(1)).unwrap();
        let b = encode_visual(&mut tape, &bound, &store, &cfg, &rois, Source::Image(2)).unwrap();
        let da = tape.values(a.node);
        let db = tape.values(b.node);
        assert!(da.iter().zip(db).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn zero_features_stay_finite() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let zeros = Tensor::zeros(vec![cfg.n_vis, cfg.d_raw_v]);
        let set = encode_visual(&mut tape, &bound, &store, &cfg, &zeros, Source::Image(1)).unwrap();
        assert!(tape.values(set.node).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_feature_width_is_a_dimension_error() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let bad = Tensor::zeros(vec![cfg.n_vis, cfg.d_raw_v + 1]);
        assert!(encode_visual(&mut tape, &bound, &store, &cfg, &bad, Source::Image(1)).is_err());
    }

    #[test]
    fn representations_are_contextualized_across_entities() {
        let cfg = ModelConfig::tiny();
        let store = setup(&cfg);
        let rois = rand_rois(&cfg, 11);
        let encode = |features: &Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let set = encode_visual(&mut tape, &bound, &store, &cfg, features, Source::Image(1)).unwrap();
            tape.tensor(set.node)
        };
        let base = encode(&rois);
        // zero out entity 2 and watch entity 0 move
        let mut zeroed = rois.values().to_vec();
        for r in 0..cfg.d_raw_v {
            zeroed[2 * cfg.d_raw_v + r] = 0.0;
        }
        let changed = encode(&Tensor::new(vec![cfg.n_vis, cfg.d_raw_v], zeroed).unwrap());
        let moved = (0..cfg.d).any(|r| (base.at(r, 0) - changed.at(r, 0)).abs() > 1e-9);
        assert!(moved, "entity 0 ignored a change to entity 2");
    }
}
