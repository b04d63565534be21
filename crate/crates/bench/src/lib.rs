//! Fixtures shared by the engine benchmarks.

use moecl_core::{Alignment, MixtureAdapterLayer, Matrix, StreamGenerator, TaskData, TaskId, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A layer holding `old` frozen experts of task 0 and `new` trainable
/// candidates of task 1, with a router for each task.
pub fn two_task_layer(dim: usize, rank: usize, old: usize, new: usize, seed: u64) -> MixtureAdapterLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = MixtureAdapterLayer::new(0, dim, rank, 2).expect("valid layer shape");
    for _ in 0..old {
        layer.add_expert(0, &mut rng);
    }
    layer.add_router(0, 0.1, &mut rng).expect("router over old experts");
    randomize_b(&mut layer, 0, &mut rng);
    layer.freeze_all();
    for _ in 0..new {
        layer.add_expert(1, &mut rng);
    }
    layer.add_router(1, 0.1, &mut rng).expect("router over all experts");
    randomize_b(&mut layer, 1, &mut rng);
    layer
}

fn randomize_b(layer: &mut MixtureAdapterLayer, task: TaskId, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = layer.experts().iter().filter(|e| e.owner_task == task).map(|e| e.id).collect();
    for id in ids {
        let e = layer.expert_mut(id).expect("expert just listed");
        for v in e.b.as_mut_slice() {
            *v = rng.random_range(-0.05..0.05);
        }
    }
}

pub fn random_batch(rows: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, dim, |_, _| rng.random_range(-1.0..1.0))
}

/// An orthogonal first task and a task reusing it.
pub fn small_stream(dim: usize, classes: usize) -> Vec<TaskData> {
    let mut g = StreamGenerator::new(dim);
    [
        TaskSpec::new(0, classes, 1, Alignment::Orthogonal),
        TaskSpec::new(1, classes, 2, Alignment::ReuseOf { of: 0 }),
    ]
    .iter()
    .map(|s| g.generate(s).expect("valid stream spec"))
    .collect()
}
