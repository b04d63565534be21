//! Base-optimizer choice. SGD passes gradients through untouched; AdamW turns
//! them into bias-corrected moment ratios before the (SCR-scaled) step and
//! applies decoupled weight decay afterwards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{ExpertGrad, ExpertId, LayerGrads, MixtureAdapterLayer, TaskId};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adamw {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_weight_decay")]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Router(TaskId),
    A(ExpertId),
    B(ExpertId),
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<(usize, Slot), (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    fn adam(&mut self, key: (usize, Slot), g: &Matrix) -> Matrix {
        let OptimizerConfig::Adamw { beta1, beta2, eps, .. } = self.config else {
            return g.clone();
        };
        let t = self.step.max(1) as i32;
        let (m, v) = self
            .moments
            .entry(key)
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        if m.len() != g.len() {
            // shape changed under the same key (pruned router rows)
            *m = vec![0.0; g.len()];
            *v = vec![0.0; g.len()];
        }
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut out = g.clone();
        for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
            let gi = g.as_slice()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            *o = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        out
    }

    /// Update directions for one layer's gradients.
    pub fn directions(&mut self, layer: usize, grads: &LayerGrads) -> LayerGrads {
        if matches!(self.config, OptimizerConfig::Sgd) {
            return grads.clone();
        }
        let router = self.adam((layer, Slot::Router(grads.task)), &grads.router);
        let experts = grads
            .expert_ids
            .iter()
            .zip(&grads.experts)
            .map(|(&id, g)| ExpertGrad {
                a: self.adam((layer, Slot::A(id)), &g.a),
                b: self.adam((layer, Slot::B(id)), &g.b),
            })
            .collect();
        LayerGrads {
            task: grads.task,
            expert_ids: grads.expert_ids.clone(),
            experts,
            router,
        }
    }

    /// Decoupled weight decay on the unfrozen parameters owned by `task`.
    pub fn decay(&self, layer: &mut MixtureAdapterLayer, task: TaskId, lr: f64) {
        let OptimizerConfig::Adamw { weight_decay, .. } = self.config else {
            return;
        };
        let keep = 1.0 - lr * weight_decay;
        if let Some(r) = layer.router_mut(task) {
            if !r.frozen {
                r.weight = r.weight.scale(keep);
            }
        }
        let ids: Vec<ExpertId> = layer
            .experts()
            .iter()
            .filter(|e| e.owner_task == task && !e.frozen)
            .map(|e| e.id)
            .collect();
        for id in ids {
            if let Some(e) = layer.expert_mut(id) {
                e.a = e.a.scale(keep);
                e.b = e.b.scale(keep);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_passthrough() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd);
        let g = LayerGrads {
            task: 0,
            expert_ids: vec![3],
            experts: vec![ExpertGrad {
                a: Matrix::from_fn(1, 2, |_, c| c as f64 + 0.5),
                b: Matrix::from_fn(2, 1, |r, _| -(r as f64)),
            }],
            router: Matrix::from_fn(1, 2, |_, c| c as f64),
        };
        opt.begin_step();
        assert_eq!(opt.directions(0, &g), g);
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut opt = Optimizer::new(OptimizerConfig::Adamw {
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0,
            weight_decay: 0.0,
        });
        opt.begin_step();
        let g = Matrix::from_fn(1, 3, |_, c| [2.0, -0.5, 1e-3][c]);
        let d = opt.adam((0, Slot::Router(0)), &g);
        for (v, s) in d.as_slice().iter().zip([1.0, -1.0, 1.0]) {
            assert!((v - s).abs() < 1e-12);
        }
    }
}
