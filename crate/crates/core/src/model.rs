use serde::{Deserialize, Serialize};

use crate::adapter::{LayerGrads, MixtureAdapterLayer, TaskId};
use crate::backbone::{backbone_backward, backbone_forward, BackboneCache, FrozenBackbone, Routing};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine_similarity, Matrix, DEFAULT_TEMPERATURE};

fn default_dim() -> usize {
    32
}
fn default_depth() -> usize {
    4
}
fn default_adapter_layers() -> usize {
    2
}
fn default_rank() -> usize {
    2
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_gain() -> f64 {
    1.0
}
fn default_router_init() -> f64 {
    0.1
}
fn default_lora_scale() -> f64 {
    1.0
}
fn default_model_seed() -> u64 {
    0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_adapter_layers")]
    pub adapter_layers: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_gain")]
    pub backbone_gain: f64,
    /// New routers start from `U(-s, s)`.
    #[serde(default = "default_router_init")]
    pub router_init_scale: f64,
    /// Adapter output multiplier (LoRA `α/r`).
    #[serde(default = "default_lora_scale")]
    pub lora_scale: f64,
    #[serde(default = "default_model_seed")]
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: default_dim(),
            depth: default_depth(),
            adapter_layers: default_adapter_layers(),
            rank: default_rank(),
            temperature: default_temperature(),
            backbone_gain: default_gain(),
            router_init_scale: default_router_init(),
            lora_scale: default_lora_scale(),
            backbone_seed: default_model_seed(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.dim", self.dim),
            ("model.depth", self.depth),
            ("model.rank", self.rank),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.adapter_layers > self.depth {
            return Err(Error::config("model.adapter_layers", "exceeds model.depth"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("model.temperature", "must be positive"));
        }
        if !(self.lora_scale > 0.0) || !self.lora_scale.is_finite() {
            return Err(Error::config("model.lora_scale", "must be positive"));
        }
        if !(self.router_init_scale >= 0.0) {
            return Err(Error::config("model.router_init_scale", "must be >= 0"));
        }
        Ok(())
    }
}

/// Where the current task is in its two-phase lifecycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskPhase {
    Expanded,
    Identified,
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterModel {
    pub config: ModelConfig,
    pub backbone: FrozenBackbone,
    pub layers: Vec<MixtureAdapterLayer>,
    pub learned: Vec<TaskId>,
    pub pending: Option<(TaskId, TaskPhase)>,
}

impl AdapterModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = FrozenBackbone::new(
            config.dim,
            config.depth,
            config.adapter_layers,
            config.backbone_gain,
            config.backbone_seed,
        )?;
        let layers = backbone
            .adapter_after
            .iter()
            .map(|&l| {
                let mut layer = MixtureAdapterLayer::new(l, config.dim, config.rank, 2)?;
                layer.set_scale(config.lora_scale)?;
                Ok(layer)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterModel {
            config,
            backbone,
            layers,
            learned: Vec::new(),
            pending: None,
        })
    }

    pub fn has_learned(&self, task: TaskId) -> bool {
        self.learned.contains(&task)
    }

    /// Task-ID-given routing: learned tasks use their routers, anything else
    /// falls back to the frozen backbone.
    pub fn routing_for(&self, task: TaskId) -> Routing {
        if self.has_learned(task) {
            Routing::Task(task)
        } else {
            Routing::Bypass
        }
    }

    pub fn forward(&self, routing: Routing, x: &Matrix) -> Result<(Matrix, BackboneCache)> {
        backbone_forward(&self.backbone, &self.layers, routing, x)
    }

    pub fn embed(&self, routing: Routing, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(routing, x)?.0)
    }

    pub fn backward(
        &self,
        cache: &BackboneCache,
        grad_emb: &Matrix,
        gate_grads: Option<&[Vec<f64>]>,
    ) -> Result<(Matrix, Vec<Option<LayerGrads>>)> {
        backbone_backward(&self.backbone, &self.layers, cache, grad_emb, gate_grads)
    }

    /// Cosine-similarity logits of each embedding against each label.
    pub fn logits(&self, routing: Routing, x: &Matrix, labels: &Matrix) -> Result<Matrix> {
        let emb = self.embed(routing, x)?;
        cosine_similarity(&emb, labels)
    }

    pub fn predict(&self, routing: Routing, x: &Matrix, labels: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(routing, x, labels)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    pub fn expert_counts(&self) -> Vec<usize> {
        self.layers.iter().map(MixtureAdapterLayer::expert_count).collect()
    }

    pub fn total_experts(&self) -> usize {
        self.expert_counts().iter().sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(MixtureAdapterLayer::trainable_parameter_count)
            .sum()
    }

    pub fn adapter_parameter_count(&self) -> usize {
        self.layers.iter().map(MixtureAdapterLayer::parameter_count).sum()
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}
