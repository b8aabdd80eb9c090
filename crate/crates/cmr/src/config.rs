//! Run configuration: model sizes, optimizer constants, training schedule.

use serde::{Deserialize, Serialize};

use crate::error::{CmrError, Result};

/// Target task. NLVR-style inputs pair one statement with two images and a
/// binary label; VQA-style inputs pair one question with one image and a
/// class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "nlvr_like")]
    Nlvr,
    #[serde(rename = "vqa_like")]
    Vqa,
}

impl TaskKind {
    pub fn n_images(self) -> usize {
        match self {
            TaskKind::Nlvr => 2,
            TaskKind::Vqa => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Nlvr => "nlvr_like",
            TaskKind::Vqa => "vqa_like",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = CmrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nlvr_like" => Ok(TaskKind::Nlvr),
            "vqa_like" => Ok(TaskKind::Vqa),
            other => Err(CmrError::Config(format!("unknown task '{other}' (expected nlvr_like or vqa_like)"))),
        }
    }
}

/// Architecture sizes. Defaults follow the reference setting where one is
/// stated (20 textual and 36 visual entities, top-10 relation pairs, five
/// visual and five cross-modality layers); the representation width is kept
/// at desk scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared entity representation width d.
    pub d: usize,
    /// Raw text embedding width before projection to d.
    pub d_raw_t: usize,
    /// Raw visual feature width before projection to d.
    pub d_raw_v: usize,
    /// Textual entities per example.
    pub n_text: usize,
    /// Visual entities per image.
    pub n_vis: usize,
    pub vocab_size: usize,
    pub text_layers: usize,
    pub vis_layers: usize,
    pub cross_layers: usize,
    /// Top-K relation candidates kept per modality source.
    pub k_top: usize,
    /// Output channels of the relevance CNN conv layers, in order.
    pub cnn_channels: Vec<usize>,
    /// Square kernel size shared by the conv layers.
    pub cnn_kernel: usize,
    /// Width of the hidden fully connected layer in each relevance CNN.
    pub cnn_fc_hidden: usize,
    /// Hidden width of the relation map and relation score MLPs.
    pub mlp_hidden: usize,
    /// Hidden width of the task classifier (three hidden layers).
    pub head_hidden: usize,
    /// Answer classes for VQA-style heads.
    pub n_classes: usize,
    /// Keep entity relevance blocks in the final feature.
    pub include_entity: bool,
    /// Keep relational relevance blocks in the final feature.
    pub include_relational: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_raw_t: 32,
            d_raw_v: 32,
            n_text: 20,
            n_vis: 36,
            vocab_size: 64,
            text_layers: 2,
            vis_layers: 5,
            cross_layers: 5,
            k_top: 10,
            cnn_channels: vec![8, 16],
            cnn_kernel: 3,
            cnn_fc_hidden: 64,
            mlp_hidden: 32,
            head_hidden: 64,
            n_classes: 8,
            include_entity: true,
            include_relational: true,
        }
    }
}

impl ModelConfig {
    /// Compact configuration used by the training and ablation experiments.
    pub fn desk() -> Self {
        Self {
            d: 16,
            d_raw_t: 16,
            d_raw_v: 32,
            n_text: 6,
            n_vis: 6,
            vocab_size: 64,
            text_layers: 1,
            vis_layers: 1,
            cross_layers: 1,
            k_top: 4,
            cnn_channels: vec![4, 8],
            cnn_kernel: 2,
            cnn_fc_hidden: 16,
            mlp_hidden: 16,
            head_hidden: 32,
            n_classes: 8,
            include_entity: true,
            include_relational: true,
        }
    }

    /// Smallest configuration that exercises every block; used by the
    /// whole-model finite-difference check.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            d_raw_t: 8,
            d_raw_v: 8,
            n_text: 4,
            n_vis: 4,
            vocab_size: 16,
            text_layers: 1,
            vis_layers: 1,
            cross_layers: 1,
            k_top: 3,
            cnn_channels: vec![2],
            cnn_kernel: 2,
            cnn_fc_hidden: 8,
            mlp_hidden: 8,
            head_hidden: 8,
            n_classes: 4,
            include_entity: true,
            include_relational: true,
        }
    }

    pub fn ff_hidden(&self) -> usize {
        4 * self.d
    }

    fn pairs(n: usize) -> usize {
        n * (n - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_raw_t", self.d_raw_t),
            ("d_raw_v", self.d_raw_v),
            ("n_text", self.n_text),
            ("n_vis", self.n_vis),
            ("vocab_size", self.vocab_size),
            ("k_top", self.k_top),
            ("cnn_kernel", self.cnn_kernel),
            ("cnn_fc_hidden", self.cnn_fc_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("head_hidden", self.head_hidden),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CmrError::Config(format!("{name} must be positive")));
            }
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return Err(CmrError::Config("cnn_channels must be non-empty and positive".into()));
        }
        if self.n_text < 2 || self.n_vis < 2 {
            return Err(CmrError::Config("need at least 2 entities per modality".into()));
        }
        if self.k_top > Self::pairs(self.n_text) || self.k_top > Self::pairs(self.n_vis) {
            return Err(CmrError::Config(format!(
                "k_top={} exceeds the candidate count of a modality (C({},2)={}, C({},2)={})",
                self.k_top,
                self.n_text,
                Self::pairs(self.n_text),
                self.n_vis,
                Self::pairs(self.n_vis),
            )));
        }
        // every relevance CNN input must survive the conv/pool pipeline
        for (h, w) in [
            (self.n_text, self.n_vis),
            (self.n_vis, self.n_vis),
            (self.k_top, self.k_top),
        ] {
            self.cnn_output_elems(h, w)?;
        }
        Ok(())
    }

    /// Flattened element count after the conv/pool pipeline on an h x w
    /// input, or a config error if a kernel outgrows its input.
    pub fn cnn_output_elems(&self, mut h: usize, mut w: usize) -> Result<usize> {
        let k = self.cnn_kernel;
        for &ch in &self.cnn_channels {
            if k > h || k > w {
                return Err(CmrError::Config(format!(
                    "cnn kernel {k} exceeds feature map {h}x{w} (input too small for {} conv layers)",
                    self.cnn_channels.len()
                )));
            }
            h = h - k + 1;
            w = w - k + 1;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            let _ = ch;
        }
        Ok(self.cnn_channels.last().unwrap() * h * w)
    }
}

/// Adam constants and batch settings. The defaults are the published
/// training setting: alpha 1e-4, beta1 0.9, beta2 0.999, eps 1e-6, weight
/// decay 0.01, max gradient norm 1.0, batch size 32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    /// Apply weight decay to layer-norm gains and biases as well.
    pub decay_norm_params: bool,
    /// Fold the decay term into the gradient (classic L2) instead of the
    /// default decoupled update.
    pub l2_in_gradient: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            batch_size: 32,
            decay_norm_params: false,
            l2_in_gradient: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CmrError::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("eps", self.eps),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v > 0.0) {
                return Err(CmrError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CmrError::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(CmrError::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: u32,
    pub seed: u64,
    /// Held-out accuracy that must hold for two consecutive epochs to count
    /// as converged.
    pub convergence_threshold: f64,
    /// Stop once the convergence rule fires.
    pub stop_at_convergence: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            seed: 0,
            convergence_threshold: 0.8,
            stop_at_convergence: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CmrError::Config("epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.convergence_threshold) {
            return Err(CmrError::Config("convergence_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Complete run description; serializable as one JSON file. Unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.training.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_matches_reference_sizes() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_text, 20);
        assert_eq!(cfg.n_vis, 36);
        assert_eq!(cfg.k_top, 10);
        assert_eq!(cfg.vis_layers, 5);
        assert_eq!(cfg.cross_layers, 5);
    }

    #[test]
    fn desk_and_tiny_configs_are_valid() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn oversized_k_is_rejected() {
        let cfg = ModelConfig { k_top: 200, ..ModelConfig::desk() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let text = r#"{"task":"nlvr_like","mystery_knob":3}"#;
        assert!(RunConfig::from_json(text).is_err());
    }

    #[test]
    fn run_config_round_trips_through_json() {
        let cfg = RunConfig {
            task: TaskKind::Vqa,
            model: ModelConfig::desk(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
        };
        let parsed = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn cnn_geometry_is_checked_against_inputs() {
        // one 2x2 conv layer over a 3x3 relational affinity works
        let cfg = ModelConfig::tiny();
        assert_eq!(cfg.cnn_output_elems(3, 3).unwrap(), 2);
        // but a 5x5 kernel cannot fit
        let bad = ModelConfig { cnn_kernel: 5, ..ModelConfig::tiny() };
        assert!(bad.validate().is_err());
    }
}
