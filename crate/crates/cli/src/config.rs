//! TOML run configuration: model architecture, training, constraint
//! weights, validity-window overrides, and embedding parameters. Every
//! section is optional; omitted fields take the defaults below.

use serde::{Deserialize, Serialize};

use loopflow_core::constraints::ConstraintWeights;
use loopflow_core::embed3d::EmbedConfig;
use loopflow_core::error::{Error, Result};
use loopflow_core::flow::HyperParams;
use loopflow_core::geometry::{LoopClass, ValiditySpec};
use loopflow_core::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_max: usize,
    pub dist_layers: usize,
    pub amino_layers: usize,
    pub conv_channels: usize,
    pub wgnn_dim: usize,
    pub mlp_hidden: (usize, usize),
    pub wgnn_xi: f64,
    pub dequant_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let h = HyperParams::default();
        Self {
            n_max: h.n_max,
            dist_layers: h.dist_layers,
            amino_layers: h.amino_layers,
            conv_channels: h.conv_channels,
            wgnn_dim: h.wgnn_dim,
            mlp_hidden: h.mlp_hidden,
            wgnn_xi: h.wgnn_xi,
            dequant_scale: h.dequant_scale,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub alternation: usize,
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            mc_samples: t.mc_samples,
            alternation: t.alternation,
            grad_clip: t.grad_clip,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSection {
    pub xi1: f64,
    pub xi2: f64,
    pub xi3: f64,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        let w = ConstraintWeights::default();
        Self { xi1: w.xi1, xi2: w.xi2, xi3: w.xi3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValiditySection {
    pub eta1: f64,
    pub eta2: f64,
    pub eps1: f64,
    pub eps2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_sweeps: usize,
    pub inner_steps: usize,
    pub step_init: f64,
    pub tolerance: f64,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let e = EmbedConfig::default();
        Self {
            lambda1: e.lambda1,
            lambda2: e.lambda2,
            max_sweeps: e.max_sweeps,
            inner_steps: e.inner_steps,
            step_init: e.step_init,
            tolerance: e.tolerance,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub lm_order: Option<usize>,
    pub lm_smoothing: Option<f64>,
}

/// The whole resolved configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub constraints: ConstraintSection,
    pub validity: Option<ValiditySection>,
    pub embed: EmbedSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad config {path:?}: {e}")))
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            n_max: self.model.n_max,
            vocab: 20,
            dist_layers: self.model.dist_layers,
            amino_layers: self.model.amino_layers,
            conv_channels: self.model.conv_channels,
            wgnn_dim: self.model.wgnn_dim,
            mlp_hidden: self.model.mlp_hidden,
            wgnn_xi: self.model.wgnn_xi,
            dequant_scale: self.model.dequant_scale,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validity(&self, class: LoopClass) -> Result<ValiditySpec> {
        match &self.validity {
            Some(v) => ValiditySpec::new(v.eta1, v.eta2, v.eps1, v.eps2),
            None => Ok(ValiditySpec::preset(class)),
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            mc_samples: self.train.mc_samples,
            alternation: self.train.alternation,
            seed,
            constraint_weights: ConstraintWeights::new(
                self.constraints.xi1,
                self.constraints.xi2,
                self.constraints.xi3,
            )?,
            grad_clip: self.train.grad_clip,
        })
    }

    pub fn embed_config(&self, seed: u64) -> EmbedConfig {
        EmbedConfig {
            lambda1: self.embed.lambda1,
            lambda2: self.embed.lambda2,
            max_sweeps: self.embed.max_sweeps,
            inner_steps: self.embed.inner_steps,
            step_init: self.embed.step_init,
            tolerance: self.embed.tolerance,
            seed,
        }
    }

    pub fn lm_order(&self) -> usize {
        self.eval.lm_order.unwrap_or(3)
    }

    pub fn lm_smoothing(&self) -> f64 {
        self.eval.lm_smoothing.unwrap_or(0.1)
    }
}
