use moecl_core::lifecycle::{
    convergence_curve, finetune_orthogonal, identify_subspace, pre_expand, truncate, LayerRouting, RoutingSnapshot,
};
use moecl_core::*;

fn stream(specs: &[TaskSpec]) -> Vec<TaskData> {
    let mut g = StreamGenerator::new(32);
    specs.iter().map(|s| g.generate(s).unwrap()).collect()
}

fn orth(id: TaskId, seed: u64) -> TaskSpec {
    TaskSpec::new(id, 8, seed, Alignment::Orthogonal)
}

fn train_cfg(identify: usize, finetune: usize, m: usize, tau: f64, lambda: f64) -> TrainConfig {
    let schedule = PhaseSchedule {
        identify_steps: identify,
        finetune_steps: finetune,
        pre_expand: m,
        prune_threshold: tau,
        ..PhaseSchedule::default()
    };
    TrainConfig::new(schedule, ScrConfig::new(lambda, 0.3).unwrap())
}

fn model() -> AdapterModel {
    AdapterModel::new(ModelConfig::default()).unwrap()
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn pre_expand_adds_m_zero_experts_and_one_router() {
    let tasks = stream(&[orth(0, 1), orth(1, 2)]);
    let mut m = model();
    // three experts per layer after the first task (τ = 0 keeps all)
    learn_task(&mut m, &tasks[0], &train_cfg(5, 5, 3, 0.0, 0.01)).unwrap();
    assert_eq!(m.expert_counts(), vec![3, 3]);
    let x = &tasks[0].test.x;
    let before = m.embed(Routing::Task(0), x).unwrap();

    pre_expand(&mut m, 1, 1, 2, 0).unwrap();
    assert_eq!(m.expert_counts(), vec![4, 4]);
    for layer in &m.layers {
        assert_eq!(layer.routers().len(), 2);
        for e in layer.experts() {
            assert_eq!(e.frozen, e.owner_task == 0);
            if e.owner_task == 1 {
                assert!(e.b.as_slice().iter().all(|&v| v == 0.0));
                let (_, out) = e.apply(x).unwrap();
                assert!(out.as_slice().iter().all(|&v| v == 0.0));
            }
        }
        assert!(layer.router(0).unwrap().frozen);
    }
    assert_eq!(bits(&before), bits(&m.embed(Routing::Task(0), x).unwrap()));
}

#[test]
fn schedule_invariants() {
    let bad = |s: PhaseSchedule| match s.validate() {
        Err(Error::Config { path, .. }) => path,
        other => panic!("unexpected {other:?}"),
    };
    assert_eq!(bad(PhaseSchedule { pre_expand: 0, ..Default::default() }), "schedule.pre_expand");
    assert_eq!(bad(PhaseSchedule { identify_steps: 0, ..Default::default() }), "schedule.identify_steps");
    assert_eq!(bad(PhaseSchedule { prune_threshold: 1.0, ..Default::default() }), "schedule.prune_threshold");
    assert_eq!(bad(PhaseSchedule { top_k: 0, ..Default::default() }), "schedule.top_k");
}

#[test]
fn phases_must_run_in_order() {
    let tasks = stream(&[orth(0, 1)]);
    let cfg = train_cfg(3, 3, 1, 0.1, 0.01);
    let mut m = model();
    assert!(matches!(identify_subspace(&mut m, &tasks[0], &cfg), Err(Error::State(_))));
    pre_expand(&mut m, 0, 1, 2, 0).unwrap();
    assert!(matches!(pre_expand(&mut m, 0, 1, 2, 0), Err(Error::State(_))));
    assert!(matches!(finetune_orthogonal(&mut m, &tasks[0], &cfg), Err(Error::State(_))));
    let (trace, _) = identify_subspace(&mut m, &tasks[0], &cfg).unwrap();
    let mut wrong = trace.clone();
    wrong.task = 7;
    assert!(matches!(truncate(&mut m, 0, &wrong, 0.1), Err(Error::State(_))));
    truncate(&mut m, 0, &trace, 0.1).unwrap();
    finetune_orthogonal(&mut m, &tasks[0], &cfg).unwrap();
    assert!(m.has_learned(0));
    assert!(matches!(pre_expand(&mut m, 0, 1, 2, 0), Err(Error::State(_))));
}

fn snap(step: usize, layers: &[(&[u32], &[f64])]) -> RoutingSnapshot {
    RoutingSnapshot {
        step,
        loss: 0.0,
        layers: layers
            .iter()
            .enumerate()
            .map(|(i, (ids, p))| LayerRouting {
                layer_index: i,
                expert_ids: ids.to_vec(),
                mean: ProbVector::new(p.to_vec()).unwrap(),
            })
            .collect(),
    }
}

#[test]
fn convergence_curve_examples() {
    let ids: &[u32] = &[0, 1];
    let same = RoutingTrace {
        task: 0,
        snapshots: vec![snap(0, &[(ids, &[0.3, 0.7])]), snap(10, &[(ids, &[0.3, 0.7])])],
    };
    assert_eq!(convergence_curve(&same).unwrap(), vec![(0, 0.0), (10, 0.0)]);

    let single = RoutingTrace { task: 0, snapshots: vec![snap(0, &[(ids, &[0.5, 0.5])])] };
    assert!(matches!(convergence_curve(&single), Err(Error::State(_))));

    let drifting = RoutingTrace {
        task: 0,
        snapshots: [[0.5, 0.5], [0.3, 0.7], [0.2, 0.8], [0.2, 0.8], [0.2, 0.8]]
            .iter()
            .enumerate()
            .map(|(i, p)| snap(i * 10, &[(ids, p)]))
            .collect(),
    };
    let curve = convergence_curve(&drifting).unwrap();
    // KL(final || snapshot) by hand for the first point
    let kl0 = 0.2 * (0.2f64 / 0.5).ln() + 0.8 * (0.8f64 / 0.5).ln();
    assert!((curve[0].1 - kl0).abs() < 1e-12);
    assert!(curve[0].1 > curve[1].1 && curve[1].1 > 0.0);
    assert!(curve[2..].iter().all(|&(_, k)| k == 0.0));
}

/// Task 0 learned with one expert per layer, task 1 pre-expanded with two
/// candidates and identified for a single step.
fn identified_two_candidates() -> (AdapterModel, Vec<TaskData>, RoutingTrace) {
    let tasks = stream(&[orth(0, 1), orth(1, 2)]);
    let mut m = model();
    learn_task(&mut m, &tasks[0], &train_cfg(5, 5, 1, 0.1, 0.01)).unwrap();
    pre_expand(&mut m, 1, 2, 2, 0).unwrap();
    let (trace, _) = identify_subspace(&mut m, &tasks[1], &train_cfg(1, 0, 2, 0.1, 0.01)).unwrap();
    (m, tasks, trace)
}

fn with_means(trace: &RoutingTrace, means: &[f64]) -> RoutingTrace {
    let mut t = trace.clone();
    for l in &mut t.snapshots.last_mut().unwrap().layers {
        l.mean = ProbVector::new(means.to_vec()).unwrap();
    }
    t
}

#[test]
fn truncate_uses_strict_threshold() {
    let (mut m, _, trace) = identified_two_candidates();
    let ids = trace.snapshots[0].layers[0].expert_ids.clone();
    assert_eq!(ids.len(), 3);
    let report = truncate(&mut m, 1, &with_means(&trace, &[0.85, 0.05, 0.1]), 0.1).unwrap();
    for (layer, lt) in m.layers.iter().zip(&report.layers) {
        assert_eq!(lt.candidates.len(), 2);
        assert!(!lt.candidates[0].kept && lt.candidates[1].kept);
        assert_eq!((lt.experts_before, lt.experts_after, lt.pruned), (3, 2, 1));
        assert_eq!(layer.router(1).unwrap().weight.rows(), 2);
        assert!(layer.expert(ids[1]).is_none());
    }
}

#[test]
fn pruning_every_candidate_restores_the_old_pool() {
    let (mut m, tasks, trace) = identified_two_candidates();
    let snapshot_params: Vec<_> = m.layers.iter().map(|l| l.experts()[0].clone()).collect();
    let report = truncate(&mut m, 1, &with_means(&trace, &[0.9, 0.05, 0.05]), 0.1).unwrap();
    assert!(report.layers.iter().all(|l| l.pruned == 2 && l.experts_after == 1));
    assert_eq!(m.expert_counts(), vec![1, 1]);

    // nothing trainable is left, so fine-tuning leaves every parameter alone
    let before = m.layers.clone();
    finetune_orthogonal(&mut m, &tasks[1], &train_cfg(1, 20, 2, 0.1, 0.01)).unwrap();
    for (a, b) in before.iter().zip(&m.layers) {
        for (ea, eb) in a.experts().iter().zip(b.experts()) {
            assert_eq!(bits(&ea.a), bits(&eb.a));
            assert_eq!(bits(&ea.b), bits(&eb.b));
        }
        for (ra, rb) in a.routers().iter().zip(b.routers()) {
            assert_eq!(bits(&ra.weight), bits(&rb.weight));
        }
    }
    for (layer, old) in m.layers.iter().zip(&snapshot_params) {
        assert_eq!(&layer.experts()[0].a, &old.a);
    }
}

#[test]
fn zero_finetune_steps_leave_parameters_unchanged() {
    let (mut m, tasks, trace) = identified_two_candidates();
    truncate(&mut m, 1, &trace, 0.0).unwrap();
    let before = m.layers.clone();
    let losses = finetune_orthogonal(&mut m, &tasks[1], &train_cfg(1, 0, 2, 0.0, 0.01)).unwrap();
    assert!(losses.is_empty());
    for (a, b) in before.iter().zip(&m.layers) {
        for (ea, eb) in a.experts().iter().zip(b.experts()) {
            assert_eq!(bits(&ea.a), bits(&eb.a));
            assert_eq!(bits(&ea.b), bits(&eb.b));
        }
    }
    assert!(m.layers.iter().all(|l| l.experts().iter().all(|e| e.frozen)));
}

#[test]
fn phases_only_touch_the_new_task() {
    let tasks = stream(&[orth(0, 1), orth(1, 2)]);
    let mut m = model();
    let cfg = train_cfg(20, 20, 1, 0.1, 0.01);
    learn_task(&mut m, &tasks[0], &cfg).unwrap();
    let before = m.layers.clone();
    let outcome = learn_task(&mut m, &tasks[1], &cfg).unwrap();
    assert!(!outcome.identify_losses.is_empty());
    for (a, b) in before.iter().zip(&m.layers) {
        for e in a.experts() {
            let after = b.expert(e.id).unwrap();
            assert_eq!(bits(&e.a), bits(&after.a));
            assert_eq!(bits(&e.b), bits(&after.b));
        }
        assert_eq!(bits(&a.router(0).unwrap().weight), bits(&b.router(0).unwrap().weight));
    }
}

#[test]
fn first_task_grows_by_one_per_layer() {
    let tasks = stream(&[orth(0, 1)]);
    let mut m = model();
    let outcome = learn_task(&mut m, &tasks[0], &train_cfg(10, 10, 1, 0.1, 0.01)).unwrap();
    assert_eq!(m.expert_counts(), vec![1, 1]);
    for l in &outcome.report.layers {
        assert_eq!(l.candidates.len(), 1);
        assert_eq!(l.candidates[0].mean_prob, 1.0);
        assert!(l.candidates[0].kept);
    }
}

#[test]
fn stage1_parameters_linear_in_m() {
    let tasks = stream(&[orth(0, 1)]);
    let counts: Vec<usize> = (1..=5)
        .map(|m| {
            let mut model = model();
            learn_task(&mut model, &tasks[0], &train_cfg(1, 0, m, 0.0, 0.01)).unwrap().stage1_trainable
        })
        .collect();
    let diffs: Vec<usize> = counts.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(diffs.iter().all(|&d| d == diffs[0] && d > 0), "{counts:?}");
    // per layer: one expert (2·d·r) plus one router row (d)
    let cfg = ModelConfig::default();
    assert_eq!(diffs[0], cfg.adapter_layers * (2 * cfg.dim * cfg.rank + cfg.dim));
}

#[test]
fn orthogonal_candidates_survive_without_regularizer() {
    let tasks = stream(&[orth(0, 1), orth(1, 2)]);
    let mut m = model();
    let cfg = train_cfg(150, 20, 1, 0.1, 0.0);
    learn_task(&mut m, &tasks[0], &cfg).unwrap();
    let outcome = learn_task(&mut m, &tasks[1], &cfg).unwrap();
    assert!(outcome.report.layers.iter().all(|l| l.candidates[0].mean_prob >= 0.1));
}

#[test]
fn regularizer_pushes_routing_toward_the_reused_expert() {
    // duplicate of task 0: the old expert already fits
    let mut dup = TaskSpec::new(1, 8, 2, Alignment::ReuseOf { of: 0 });
    dup.perturbation = 0.0;
    let tasks = stream(&[orth(0, 1), dup]);
    let candidate_pi = |lambda: f64| {
        let mut m = model();
        // the old expert must actually fit the task, so train it fully
        learn_task(&mut m, &tasks[0], &train_cfg(150, 150, 1, 0.1, lambda)).unwrap();
        let cfg = train_cfg(150, 0, 1, 0.1, lambda);
        let o = learn_task(&mut m, &tasks[1], &cfg).unwrap();
        o.report.layers.iter().map(|l| l.candidates[0].mean_prob).collect::<Vec<_>>()
    };
    let free = candidate_pi(0.0);
    let strong = candidate_pi(1000.0);
    for (f, s) in free.iter().zip(&strong) {
        assert!(s < f, "free {free:?} strong {strong:?}");
    }
}

#[test]
fn finetune_loss_trends_down() {
    let tasks = stream(&[orth(0, 1)]);
    let mut m = model();
    let outcome = learn_task(&mut m, &tasks[0], &train_cfg(20, 100, 1, 0.1, 0.01)).unwrap();
    let l = &outcome.finetune_losses;
    let head: f64 = l[..10].iter().map(|s| s.total).sum::<f64>() / 10.0;
    let tail: f64 = l[l.len() - 10..].iter().map(|s| s.total).sum::<f64>() / 10.0;
    assert!(tail < head, "head {head} tail {tail}");
}

#[test]
fn numeric_blow_up_reports_the_step() {
    let tasks = stream(&[orth(0, 1)]);
    let mut m = model();
    // λ = 0 so the shrinkage cannot bound the step
    let mut cfg = train_cfg(50, 0, 1, 0.1, 0.0);
    cfg.scr.learning_rate = 1e300;
    match learn_task(&mut m, &tasks[0], &cfg) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}
