//! Two-phase task learning.
//!
//! 1. [`pre_expand`]: every adapter layer gains `M` zero-map candidate experts
//!    and one router for the new task; everything older is frozen.
//! 2. [`identify_subspace`]: short SCR-regularized training of the new router
//!    and the candidates, recording routing snapshots.
//! 3. [`truncate`]: candidates whose converged mean routing probability is
//!    below `τ` are deleted together with their router rows.
//! 4. [`finetune_orthogonal`]: router frozen, regularizer off, only the
//!    surviving candidates train.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{ExpertId, TaskId};
use crate::backbone::Routing;
use crate::error::{Error, Result};
use crate::model::{AdapterModel, TaskPhase};
use crate::numerics::{contrastive_loss, kl_divergence, Matrix, ProbVector};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::scr::{scr_gate_gradient, scr_loss, scr_step, total_loss, ScrConfig, ScrState, StepOptions};
use crate::stream::TaskData;

/// KL threshold of the optional plateau stop.
pub const KL_PLATEAU: f64 = 1e-3;
/// Consecutive below-threshold snapshots needed to stop early.
pub const KL_PLATEAU_RUN: usize = 3;

fn default_identify_steps() -> usize {
    150
}
fn default_finetune_steps() -> usize {
    150
}
fn default_tau() -> f64 {
    0.1
}
fn default_m() -> usize {
    1
}
fn default_top_k() -> usize {
    2
}
fn default_batch() -> usize {
    32
}
fn default_eval_batch() -> usize {
    256
}
fn default_snapshot_every() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    /// Γ, in optimizer steps.
    #[serde(default = "default_identify_steps")]
    pub identify_steps: usize,
    /// Γ in epochs over the training split; overrides `identify_steps`.
    #[serde(default)]
    pub identify_epochs: Option<usize>,
    #[serde(default = "default_finetune_steps")]
    pub finetune_steps: usize,
    #[serde(default)]
    pub finetune_epochs: Option<usize>,
    /// τ
    #[serde(default = "default_tau")]
    pub prune_threshold: f64,
    /// M
    #[serde(default = "default_m")]
    pub pre_expand: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    #[serde(default)]
    pub kl_plateau_stop: bool,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        PhaseSchedule {
            identify_steps: default_identify_steps(),
            identify_epochs: None,
            finetune_steps: default_finetune_steps(),
            finetune_epochs: None,
            prune_threshold: default_tau(),
            pre_expand: default_m(),
            top_k: default_top_k(),
            batch_size: default_batch(),
            eval_batch_size: default_eval_batch(),
            snapshot_every: default_snapshot_every(),
            kl_plateau_stop: false,
        }
    }
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.identify_steps == 0 || self.identify_epochs == Some(0) {
            return Err(Error::config("schedule.identify_steps", "Γ must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::config("schedule.prune_threshold", "τ must lie in [0, 1)"));
        }
        let positive = [
            ("schedule.pre_expand", self.pre_expand),
            ("schedule.top_k", self.top_k),
            ("schedule.batch_size", self.batch_size),
            ("schedule.eval_batch_size", self.eval_batch_size),
            ("schedule.snapshot_every", self.snapshot_every),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be at least 1"));
            }
        }
        Ok(())
    }

    fn steps_for(&self, steps: usize, epochs: Option<usize>, n_train: usize) -> usize {
        match epochs {
            Some(e) => e * n_train.div_ceil(self.batch_size),
            None => steps,
        }
    }

    pub fn identify_steps_for(&self, n_train: usize) -> usize {
        self.steps_for(self.identify_steps, self.identify_epochs, n_train)
    }

    pub fn finetune_steps_for(&self, n_train: usize) -> usize {
        self.steps_for(self.finetune_steps, self.finetune_epochs, n_train)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: PhaseSchedule,
    pub scr: ScrConfig,
    pub optimizer: OptimizerConfig,
    pub train_old_experts: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(schedule: PhaseSchedule, scr: ScrConfig) -> Self {
        TrainConfig {
            schedule,
            scr,
            optimizer: OptimizerConfig::Sgd,
            train_old_experts: false,
            seed: 0,
        }
    }

    fn rng(&self, task: TaskId, phase: u64) -> ChaCha8Rng {
        let s = self.seed
            ^ (task as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ phase.wrapping_mul(0xD1B5_4A32_D192_ED03);
        ChaCha8Rng::seed_from_u64(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub layer_index: usize,
    pub expert_ids: Vec<ExpertId>,
    /// Mean top-k-renormalized routing over the evaluation batch.
    pub mean: ProbVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSnapshot {
    pub step: usize,
    /// Contrastive loss on the evaluation batch at this step.
    pub loss: f64,
    pub layers: Vec<LayerRouting>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub task: TaskId,
    pub snapshots: Vec<RoutingSnapshot>,
}

impl RoutingTrace {
    fn push(&mut self, snap: RoutingSnapshot) -> Result<()> {
        if let Some(last) = self.snapshots.last() {
            if snap.step <= last.step {
                return Err(Error::State(format!(
                    "snapshot step {} not after {}",
                    snap.step, last.step
                )));
            }
        }
        self.snapshots.push(snap);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateDecision {
    pub expert_id: ExpertId,
    pub mean_prob: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTruncation {
    pub layer_index: usize,
    pub experts_before: usize,
    pub experts_after: usize,
    pub candidates: Vec<CandidateDecision>,
    /// X: number of candidates removed.
    pub pruned: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub task: TaskId,
    pub threshold: f64,
    pub layers: Vec<LayerTruncation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub contrastive: f64,
    pub aux: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutcome {
    pub report: TruncationReport,
    pub trace: RoutingTrace,
    pub identify_losses: Vec<StepLoss>,
    pub finetune_losses: Vec<StepLoss>,
    /// Trainable parameters right after pre-expansion.
    pub stage1_trainable: usize,
}

fn expect_phase(model: &AdapterModel, task: TaskId, phase: TaskPhase, op: &str) -> Result<()> {
    match model.pending {
        Some((t, p)) if t == task && p == phase => Ok(()),
        other => Err(Error::State(format!(
            "{op} for task {task} needs phase {phase:?}, model is at {other:?}"
        ))),
    }
}

/// Adds `m` candidate experts and a router for `task` to every adapter layer.
pub fn pre_expand(model: &mut AdapterModel, task: TaskId, m: usize, top_k: usize, seed: u64) -> Result<()> {
    if m == 0 {
        return Err(Error::config("schedule.pre_expand", "M must be at least 1"));
    }
    if model.has_learned(task) || model.layers.iter().any(|l| l.has_task(task)) {
        return Err(Error::State(format!("task {task} already present")));
    }
    if let Some((t, p)) = model.pending {
        return Err(Error::State(format!("task {t} still pending at {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    let scale = model.config.router_init_scale;
    for layer in &mut model.layers {
        layer.freeze_all();
        layer.set_top_k(top_k);
        for _ in 0..m {
            layer.add_expert(task, &mut rng);
        }
        layer.add_router(task, scale, &mut rng)?;
    }
    model.pending = Some((task, TaskPhase::Expanded));
    Ok(())
}

struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    fn new(rng: ChaCha8Rng, n: usize, batch: usize) -> Self {
        let mut s = BatchSampler {
            rng,
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let idx = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        idx
    }
}

/// One optimizer step on the task's router and candidates.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut AdapterModel,
    task: TaskId,
    x: &Matrix,
    y: &[usize],
    labels: &Matrix,
    scr: &ScrConfig,
    states: &mut [ScrState],
    opt: &mut Optimizer,
    opts: StepOptions,
) -> Result<(f64, f64)> {
    let (emb, cache) = model.forward(Routing::Task(task), x)?;
    let (contrastive, grad_emb) = contrastive_loss(&emb, labels, y, model.config.temperature)?;

    let mut aux = 0.0;
    let mut gate_grads = Vec::with_capacity(model.layers.len());
    let mut routings = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let routing = cache
            .adapter_cache(i)
            .ok_or_else(|| Error::State("adapter skipped during training".into()))?
            .routing
            .clone();
        if scr.lambda > 0.0 {
            aux += scr_loss(&routing, layer, &states[i])?;
            gate_grads.push(scr_gate_gradient(&routing, layer, &states[i], scr)?);
        } else {
            gate_grads.push(vec![0.0; routing.expert_ids.len()]);
        }
        routings.push(routing);
    }
    let (_, grads) = model.backward(&cache, &grad_emb, Some(&gate_grads))?;

    opt.begin_step();
    for (i, lg) in grads.into_iter().enumerate() {
        let lg = lg.ok_or_else(|| Error::State("missing adapter gradients".into()))?;
        let dirs = opt.directions(i, &lg);
        let layer = &mut model.layers[i];
        scr_step(layer, &dirs, &routings[i], &mut states[i], scr, opts)?;
        opt.decay(layer, task, scr.learning_rate);
    }
    Ok((contrastive, aux))
}

fn snapshot(model: &AdapterModel, task: TaskId, data: &TaskData, eval: usize, step: usize) -> Result<RoutingSnapshot> {
    let (x, y) = data.val.head(eval);
    let (emb, cache) = model.forward(Routing::Task(task), &x)?;
    let (loss, _) = contrastive_loss(&emb, &data.label_embeddings, &y, model.config.temperature)?;
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let routing = &cache
                .adapter_cache(i)
                .ok_or_else(|| Error::State("adapter skipped".into()))?
                .routing;
            let mut mean = routing.mean_gates();
            // absorb rounding so the mean is a valid distribution
            let s: f64 = mean.iter().sum();
            mean.iter_mut().for_each(|v| *v /= s);
            Ok(LayerRouting {
                layer_index: layer.layer_index,
                expert_ids: routing.expert_ids.clone(),
                mean: ProbVector::new(mean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoutingSnapshot { step, loss, layers })
}

fn mean_layer_kl(p: &RoutingSnapshot, q: &RoutingSnapshot) -> Result<f64> {
    if p.layers.len() != q.layers.len() || p.layers.is_empty() {
        return Err(Error::State("snapshots cover different layers".into()));
    }
    let mut acc = 0.0;
    for (a, b) in p.layers.iter().zip(&q.layers) {
        acc += kl_divergence(&a.mean, &b.mean)?;
    }
    Ok(acc / p.layers.len() as f64)
}

fn step_error(e: Error, task: TaskId, phase: &str, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("task {task} {phase} step {step}: {m}")),
        other => other,
    }
}

/// Stage 1: Γ steps of SCR-regularized training; returns the routing trace
/// and per-step losses.
pub fn identify_subspace(
    model: &mut AdapterModel,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<(RoutingTrace, Vec<StepLoss>)> {
    let task = data.id();
    expect_phase(model, task, TaskPhase::Expanded, "identify_subspace")?;
    cfg.schedule.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data(format!("task {task} has an empty stream")));
    }
    let sched = &cfg.schedule;
    let steps = sched.identify_steps_for(data.train.len());
    let mut states: Vec<ScrState> = model.layers.iter().map(|l| ScrState::new(l, task)).collect();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut sampler = BatchSampler::new(cfg.rng(task, 1), data.train.len(), sched.batch_size);
    let opts = StepOptions {
        train_old_experts: cfg.train_old_experts,
    };

    let mut trace = RoutingTrace {
        task,
        snapshots: Vec::new(),
    };
    trace.push(snapshot(model, task, data, sched.eval_batch_size, 0)?)?;
    let mut losses = Vec::with_capacity(steps);
    let mut plateau = 0;
    for step in 1..=steps {
        let (x, y) = data.train.batch(&sampler.next());
        let (c, aux) = train_step(
            model,
            task,
            &x,
            &y,
            &data.label_embeddings,
            &cfg.scr,
            &mut states,
            &mut opt,
            opts,
        )
        .map_err(|e| step_error(e, task, "identification", step))?;
        let total = total_loss(c, aux, &cfg.scr).map_err(|e| step_error(e, task, "identification", step))?;
        losses.push(StepLoss {
            step,
            contrastive: c,
            aux,
            total,
        });

        if step % sched.snapshot_every == 0 || step == steps {
            let snap = snapshot(model, task, data, sched.eval_batch_size, step)
                .map_err(|e| step_error(e, task, "identification", step))?;
            let prev = trace.snapshots.last().expect("initial snapshot");
            let drift = mean_layer_kl(prev, &snap)?;
            trace.push(snap)?;
            plateau = if drift < KL_PLATEAU { plateau + 1 } else { 0 };
            if sched.kl_plateau_stop && plateau >= KL_PLATEAU_RUN {
                break;
            }
        }
    }
    model.pending = Some((task, TaskPhase::Identified));
    Ok((trace, losses))
}

/// Mean KL(final ‖ snapshot) over layers, per snapshot.
pub fn convergence_curve(trace: &RoutingTrace) -> Result<Vec<(usize, f64)>> {
    if trace.snapshots.len() < 2 {
        return Err(Error::State(format!(
            "convergence curve needs 2 snapshots, trace has {}",
            trace.snapshots.len()
        )));
    }
    let last = trace.snapshots.last().unwrap();
    trace
        .snapshots
        .iter()
        .map(|s| Ok((s.step, mean_layer_kl(last, s)?)))
        .collect()
}

/// Removes candidates whose mean routing probability in the final snapshot
/// is below `tau`.
pub fn truncate(model: &mut AdapterModel, task: TaskId, trace: &RoutingTrace, tau: f64) -> Result<TruncationReport> {
    expect_phase(model, task, TaskPhase::Identified, "truncate")?;
    let last = trace
        .snapshots
        .last()
        .ok_or_else(|| Error::State("empty routing trace".into()))?;
    if trace.task != task || last.layers.len() != model.layers.len() {
        return Err(Error::State(format!(
            "trace of task {} with {} layers does not match model",
            trace.task,
            last.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (layer, routing) in model.layers.iter_mut().zip(&last.layers) {
        let router = layer.router(task).ok_or(Error::MissingRouter(task, layer.layer_index))?;
        if router.experts != routing.expert_ids {
            return Err(Error::State(format!(
                "trace routing of layer {} no longer matches the router",
                layer.layer_index
            )));
        }
        let before = layer.expert_count();
        let visible = router.experts.len();
        let mut candidates: Vec<CandidateDecision> = routing
            .expert_ids
            .iter()
            .zip(routing.mean.as_slice())
            .filter(|(id, _)| layer.expert(**id).is_some_and(|e| e.owner_task == task))
            .map(|(&expert_id, &mean_prob)| CandidateDecision {
                expert_id,
                mean_prob,
                kept: mean_prob >= tau,
            })
            .collect();
        let pruned = candidates.iter().filter(|c| !c.kept).count();
        if pruned == visible {
            // a router must keep at least one expert
            let best = candidates
                .iter_mut()
                .max_by(|a, b| a.mean_prob.total_cmp(&b.mean_prob))
                .expect("nonempty");
            best.kept = true;
        }
        for c in candidates.iter().filter(|c| !c.kept) {
            layer.remove_expert(c.expert_id)?;
        }
        let pruned = candidates.iter().filter(|c| !c.kept).count();
        layers.push(LayerTruncation {
            layer_index: layer.layer_index,
            experts_before: before,
            experts_after: layer.expert_count(),
            candidates,
            pruned,
        });
    }
    model.pending = Some((task, TaskPhase::Truncated));
    Ok(TruncationReport {
        task,
        threshold: tau,
        layers,
    })
}

/// Stage 2: router frozen, no regularizer, surviving candidates only. The
/// task is marked learned and everything is frozen afterwards.
pub fn finetune_orthogonal(model: &mut AdapterModel, data: &TaskData, cfg: &TrainConfig) -> Result<Vec<StepLoss>> {
    let task = data.id();
    expect_phase(model, task, TaskPhase::Truncated, "finetune_orthogonal")?;
    let sched = &cfg.schedule;
    let steps = sched.finetune_steps_for(data.train.len());
    for layer in &mut model.layers {
        if let Some(r) = layer.router_mut(task) {
            r.frozen = true;
        }
    }
    let has_trainable = model.trainable_parameter_count() > 0;
    let plain = ScrConfig {
        lambda: 0.0,
        ..cfg.scr
    };
    let mut losses = Vec::with_capacity(steps);
    if has_trainable && steps > 0 {
        if data.train.is_empty() {
            return Err(Error::Data(format!("task {task} has an empty stream")));
        }
        let mut states: Vec<ScrState> = model.layers.iter().map(|l| ScrState::new(l, task)).collect();
        let mut opt = Optimizer::new(cfg.optimizer);
        let mut sampler = BatchSampler::new(cfg.rng(task, 2), data.train.len(), sched.batch_size);
        for step in 1..=steps {
            let (x, y) = data.train.batch(&sampler.next());
            let (c, _) = train_step(
                model,
                task,
                &x,
                &y,
                &data.label_embeddings,
                &plain,
                &mut states,
                &mut opt,
                StepOptions::default(),
            )
            .map_err(|e| step_error(e, task, "fine-tuning", step))?;
            losses.push(StepLoss {
                step,
                contrastive: c,
                aux: 0.0,
                total: c,
            });
        }
    }
    for layer in &mut model.layers {
        layer.freeze_all();
    }
    model.learned.push(task);
    model.pending = None;
    Ok(losses)
}

/// Full pipeline for one task.
pub fn learn_task(model: &mut AdapterModel, data: &TaskData, cfg: &TrainConfig) -> Result<TaskOutcome> {
    let task = data.id();
    let sched = &cfg.schedule;
    sched.validate()?;
    pre_expand(model, task, sched.pre_expand, sched.top_k, cfg.seed)?;
    let stage1_trainable = model.trainable_parameter_count();
    let (trace, identify_losses) = identify_subspace(model, data, cfg)?;
    let report = truncate(model, task, &trace, sched.prune_threshold)?;
    let finetune_losses = finetune_orthogonal(model, data, cfg)?;
    Ok(TaskOutcome {
        report,
        trace,
        identify_losses,
        finetune_losses,
        stage1_trainable,
    })
}
