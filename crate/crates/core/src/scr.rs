//! Subspace-constrained regularization.
//!
//! Candidate ("new") experts are penalized by
//! `n · Σ_j π_j ‖w_j − w_j^prev‖²` where `w^prev` is the snapshot taken before
//! the last step and `n` the number of candidates that moved in that step.
//! Under SGD the penalized step has the closed form
//! `Δw_j = −η / (1 + 2ηλnπ_j) · g_j`: every candidate block is shrunk by a
//! data-dependent scale while the remaining trainable blocks take a plain step.
//! [`proximal_oracle`] solves the same per-step problem by generic quadratic
//! minimization and is used to check the closed form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{BatchRouting, ExpertId, LayerGrads, MixtureAdapterLayer, TaskId};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// λ values of the regularization-strength ablation.
pub const LAMBDA_GRID: [f64; 6] = [0.0, 0.005, 0.01, 0.015, 0.02, 0.025];

fn default_lambda() -> f64 {
    0.01
}
fn default_learning_rate() -> f64 {
    0.01
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScrConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// η
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Router step size; `learning_rate` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router_learning_rate: Option<f64>,
}

impl Default for ScrConfig {
    fn default() -> Self {
        ScrConfig {
            lambda: default_lambda(),
            learning_rate: default_learning_rate(),
            router_learning_rate: None,
        }
    }
}

impl ScrConfig {
    pub fn new(lambda: f64, learning_rate: f64) -> Result<Self> {
        let cfg = ScrConfig {
            lambda,
            learning_rate,
            router_learning_rate: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("scr.lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(
                "scr.learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            ));
        }
        if let Some(r) = self.router_learning_rate {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::config("scr.router_learning_rate", format!("must be > 0, got {r}")));
            }
        }
        Ok(())
    }

    pub fn router_lr(&self) -> f64 {
        self.router_learning_rate.unwrap_or(self.learning_rate)
    }

    /// `1 / (1 + 2ηλnπ)`
    pub fn shrink_scale(&self, n: usize, pi: f64) -> f64 {
        1.0 / (1.0 + 2.0 * self.learning_rate * self.lambda * n as f64 * pi)
    }
}

/// Per-layer regularizer state for the task currently being learned.
#[derive(Clone, Debug, PartialEq)]
pub struct ScrState {
    pub task: TaskId,
    pub layer_index: usize,
    /// `(A, B)` of each candidate expert before the last step.
    prev_params: BTreeMap<ExpertId, (Matrix, Matrix)>,
    /// Candidates that received a nonzero update in the last step.
    pub change_count: usize,
}

impl ScrState {
    /// Snapshots every unfrozen expert owned by `task`.
    pub fn new(layer: &MixtureAdapterLayer, task: TaskId) -> Self {
        let prev_params = layer
            .experts()
            .iter()
            .filter(|e| e.owner_task == task && !e.frozen)
            .map(|e| (e.id, (e.a.clone(), e.b.clone())))
            .collect();
        ScrState {
            task,
            layer_index: layer.layer_index,
            prev_params,
            change_count: 0,
        }
    }

    pub fn new_experts(&self) -> impl Iterator<Item = ExpertId> + '_ {
        self.prev_params.keys().copied()
    }

    pub fn is_new(&self, id: ExpertId) -> bool {
        self.prev_params.contains_key(&id)
    }

    pub fn forget(&mut self, id: ExpertId) {
        self.prev_params.remove(&id);
    }

    /// `‖w_j − w_j^prev‖²` for each candidate, keyed by id.
    pub fn displacement_sq(&self, layer: &MixtureAdapterLayer) -> Result<BTreeMap<ExpertId, f64>> {
        self.prev_params
            .iter()
            .map(|(&id, (a, b))| {
                let e = layer
                    .expert(id)
                    .ok_or_else(|| Error::State(format!("snapshot for missing expert {id}")))?;
                if e.a.shape() != a.shape() || e.b.shape() != b.shape() {
                    return Err(Error::Dimension(format!("snapshot shape mismatch for expert {id}")));
                }
                Ok((id, e.param_dist_sq(a, b)?))
            })
            .collect()
    }

    fn refresh(&mut self, layer: &MixtureAdapterLayer) {
        for (id, snap) in self.prev_params.iter_mut() {
            if let Some(e) = layer.expert(*id) {
                *snap = (e.a.clone(), e.b.clone());
            }
        }
    }
}

fn gate_of(routing: &BatchRouting, gates: &[f64], id: ExpertId) -> Result<f64> {
    routing
        .expert_ids
        .iter()
        .position(|&e| e == id)
        .map(|p| gates[p])
        .ok_or_else(|| Error::Dimension(format!("routing does not cover candidate expert {id}")))
}

/// Layer auxiliary loss `n · Σ_new π_j ‖w_j − w_j^prev‖²` with batch-mean π.
pub fn scr_loss(routing: &BatchRouting, layer: &MixtureAdapterLayer, state: &ScrState) -> Result<f64> {
    let gates = routing.mean_gates();
    let disp = state.displacement_sq(layer)?;
    let mut acc = 0.0;
    for (id, d) in disp {
        acc += gate_of(routing, &gates, id)? * d;
    }
    Ok(state.change_count as f64 * acc)
}

/// `∂(λ·aux)/∂g_{b,j}` for one row of a batch of `batch` rows (router-row
/// order). The snapshot is a constant, so only the routing factor carries
/// gradient into the router.
pub fn scr_gate_gradient(
    routing: &BatchRouting,
    layer: &MixtureAdapterLayer,
    state: &ScrState,
    cfg: &ScrConfig,
) -> Result<Vec<f64>> {
    let batch = routing.rows.len().max(1) as f64;
    let disp = state.displacement_sq(layer)?;
    let n = state.change_count as f64;
    Ok(routing
        .expert_ids
        .iter()
        .map(|id| disp.get(id).map_or(0.0, |d| cfg.lambda * n * d / batch))
        .collect())
}

pub fn total_loss(contrastive: f64, aux: f64, cfg: &ScrConfig) -> Result<f64> {
    if !contrastive.is_finite() || !aux.is_finite() {
        return Err(Error::Numeric(format!(
            "loss terms not finite: contrastive={contrastive} aux={aux}"
        )));
    }
    Ok(contrastive + cfg.lambda * aux)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitProjection {
    /// Always the identity on non-candidate trainable blocks.
    pub old_block_identity: bool,
    pub new_experts: Vec<ExpertId>,
    pub new_block_scales: Vec<f64>,
}

impl ImplicitProjection {
    pub fn scale_for(&self, id: ExpertId) -> Option<f64> {
        self.new_experts
            .iter()
            .position(|&e| e == id)
            .map(|p| self.new_block_scales[p])
    }
}

/// Diagonal shrinkage `Γ_jj = 1 / (1 + 2ηλnπ_j)` with `n = state.change_count`.
pub fn build_implicit_projection(
    routing: &BatchRouting,
    state: &ScrState,
    cfg: &ScrConfig,
) -> Result<ImplicitProjection> {
    let gates = routing.mean_gates();
    let mut new_experts = Vec::new();
    let mut new_block_scales = Vec::new();
    for id in state.new_experts() {
        let pi = gate_of(routing, &gates, id)?;
        new_experts.push(id);
        new_block_scales.push(cfg.shrink_scale(state.change_count, pi));
    }
    Ok(ImplicitProjection {
        old_block_identity: true,
        new_experts,
        new_block_scales,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOptions {
    /// Let experts of earlier tasks train (they are frozen in the normal
    /// lifecycle; flipping this only matters for unfrozen old experts).
    pub train_old_experts: bool,
}

/// One SCR-SGD step on a single adapter layer.
///
/// `grads` holds the update directions (raw gradients under SGD). Candidate
/// experts are scaled by the implicit projection, everything else trainable
/// takes `−η g`. Frozen experts and routers are never touched.
pub fn scr_step(
    layer: &mut MixtureAdapterLayer,
    grads: &LayerGrads,
    routing: &BatchRouting,
    state: &mut ScrState,
    cfg: &ScrConfig,
    opts: StepOptions,
) -> Result<ImplicitProjection> {
    if state.layer_index != layer.layer_index || state.task != grads.task {
        return Err(Error::State(format!(
            "regularizer state for task {} layer {} used on task {} layer {}",
            state.task, state.layer_index, grads.task, layer.layer_index
        )));
    }
    if grads.expert_ids != routing.expert_ids {
        return Err(Error::Dimension("gradients and routing cover different experts".into()));
    }
    let eta = cfg.learning_rate;
    let gates = routing.mean_gates();

    // n: candidates that will actually move this step
    state.change_count = grads
        .expert_ids
        .iter()
        .zip(&grads.experts)
        .zip(&gates)
        .filter(|((id, g), &pi)| state.is_new(**id) && pi > 0.0 && !g.is_zero())
        .count();
    let projection = build_implicit_projection(routing, state, cfg)?;

    state.refresh(layer);

    if let Some(router) = layer.router_mut(grads.task) {
        if !router.frozen {
            if router.weight.shape() != grads.router.shape() {
                return Err(Error::Dimension("router gradient shape".into()));
            }
            router.weight.axpy(-cfg.router_lr(), &grads.router)?;
        }
    }
    for (id, g) in grads.expert_ids.iter().zip(&grads.experts) {
        let step = match projection.scale_for(*id) {
            Some(scale) => eta * scale,
            None if opts.train_old_experts => eta,
            None => continue,
        };
        let expert = layer
            .expert_mut(*id)
            .ok_or_else(|| Error::State(format!("gradient for missing expert {id}")))?;
        if expert.frozen {
            continue;
        }
        expert.a.axpy(-step, &g.a)?;
        expert.b.axpy(-step, &g.b)?;
    }
    Ok(projection)
}

/// A quadratic `½ xᵀ H x + bᵀ x` assembled term by term.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    hessian: Vec<Vec<f64>>,
    linear: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(dim: usize) -> Self {
        QuadraticObjective {
            hessian: vec![vec![0.0; dim]; dim],
            linear: vec![0.0; dim],
        }
    }

    /// Adds `cᵀ x`.
    pub fn add_linear(&mut self, c: &[f64]) {
        for (l, v) in self.linear.iter_mut().zip(c) {
            *l += v;
        }
    }

    /// Adds `coeff · xᵀ Q x` for a symmetric `Q`.
    pub fn add_quadratic(&mut self, coeff: f64, q: &[Vec<f64>]) {
        for (hr, qr) in self.hessian.iter_mut().zip(q) {
            for (h, v) in hr.iter_mut().zip(qr) {
                *h += 2.0 * coeff * v;
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let quad: f64 = self
            .hessian
            .iter()
            .zip(x)
            .map(|(row, xi)| xi * row.iter().zip(x).map(|(h, xj)| h * xj).sum::<f64>())
            .sum();
        0.5 * quad + self.linear.iter().zip(x).map(|(b, xi)| b * xi).sum::<f64>()
    }

    /// Minimizer via Cholesky factorization of the Hessian.
    pub fn minimize(&self) -> Result<Vec<f64>> {
        let n = self.linear.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    let d = self.hessian[i][i] - s;
                    if d <= 0.0 {
                        return Err(Error::Numeric("objective is not strictly convex".into()));
                    }
                    l[i][j] = d.sqrt();
                } else {
                    l[i][j] = (self.hessian[i][j] - s) / l[j][j];
                }
            }
        }
        // H x = −b: forward then back substitution
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
            y[i] = (-self.linear[i] - s) / l[i][i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
            x[i] = (y[i] - s) / l[i][i];
        }
        Ok(x)
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// `argmin_w gᵀ(w − w_prev) + ‖w − w_prev‖²/(2η) + λnπ‖w − w_prev‖²`, solved
/// over the displacement by assembling and minimizing a dense quadratic.
pub fn proximal_oracle(
    g: &Matrix,
    w_prev: &Matrix,
    pi: f64,
    n: usize,
    cfg: &ScrConfig,
) -> Result<Matrix> {
    if g.shape() != w_prev.shape() {
        return Err(Error::Dimension(format!(
            "gradient {:?} vs parameters {:?}",
            g.shape(),
            w_prev.shape()
        )));
    }
    let dim = g.len();
    let eye = identity(dim);
    let mut obj = QuadraticObjective::new(dim);
    obj.add_linear(g.as_slice());
    obj.add_quadratic(1.0 / (2.0 * cfg.learning_rate), &eye);
    obj.add_quadratic(cfg.lambda * n as f64 * pi, &eye);
    let delta = obj.minimize()?;
    let data = w_prev
        .as_slice()
        .iter()
        .zip(&delta)
        .map(|(w, d)| w + d)
        .collect();
    Matrix::new(g.rows(), g.cols(), data)
}

/// Inner product of the block embeddings `[old, 0]` and `[0, new]`.
pub fn verify_block_orthogonality(old_block: &[f64], new_block: &[f64]) -> f64 {
    let total = old_block.len() + new_block.len();
    let mut old_embedded = vec![0.0; total];
    old_embedded[..old_block.len()].copy_from_slice(old_block);
    let mut new_embedded = vec![0.0; total];
    new_embedded[old_block.len()..].copy_from_slice(new_block);
    old_embedded
        .iter()
        .zip(&new_embedded)
        .map(|(a, b)| a * b)
        .sum()
}
