//! Frozen image tower with mixture adapters interleaved in its last layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{ForwardCache, LayerGrads, MixtureAdapterLayer, TaskId};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// `h ← tanh(W h + b)` per layer; every `W` is a scaled random orthogonal
/// matrix so that input geometry survives the tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    pub dim: usize,
    pub layers: Vec<BackboneLayer>,
    /// Backbone layers whose output passes through an adapter, ascending.
    pub adapter_after: Vec<usize>,
    pub seed: u64,
}

impl FrozenBackbone {
    pub fn new(dim: usize, depth: usize, adapter_layers: usize, gain: f64, seed: u64) -> Result<Self> {
        if dim == 0 || depth == 0 {
            return Err(Error::Domain("backbone needs positive dim and depth".into()));
        }
        if adapter_layers > depth {
            return Err(Error::config(
                "model.adapter_layers",
                format!("{adapter_layers} adapter layers exceed depth {depth}"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..depth)
            .map(|_| {
                let q = random_orthogonal(&mut rng, dim);
                let bias = (0..dim)
                    .map(|_| 0.05 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                BackboneLayer {
                    weight: q.scale(gain),
                    bias,
                }
            })
            .collect();
        Ok(FrozenBackbone {
            dim,
            layers,
            adapter_after: (depth - adapter_layers..depth).collect(),
            seed,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// FNV-1a over every parameter's bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for l in &self.layers {
            l.weight.as_slice().iter().copied().for_each(&mut eat);
            l.bias.iter().copied().for_each(&mut eat);
        }
        h
    }

    fn layer_forward(&self, l: usize, h: &Matrix) -> Result<Matrix> {
        let layer = &self.layers[l];
        let mut pre = h.matmul_t(&layer.weight)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&layer.bias) {
                *v = (*v + b).tanh();
            }
        }
        Ok(pre)
    }
}

fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for _ in 0..2 {
            for q in &rows {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= c * qi);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_rows(&rows).expect("square orthogonal matrix")
}

/// Which adapter path an input takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Use the routers owned by this task.
    Task(TaskId),
    /// Skip every adapter: the pure frozen backbone.
    Bypass,
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    /// Post-activation output of each backbone layer.
    activations: Vec<Matrix>,
    adapter_caches: Vec<Option<ForwardCache>>,
}

impl BackboneCache {
    pub fn adapter_cache(&self, adapter: usize) -> Option<&ForwardCache> {
        self.adapter_caches.get(adapter).and_then(Option::as_ref)
    }
}

fn check_adapters(bb: &FrozenBackbone, adapters: &[MixtureAdapterLayer]) -> Result<()> {
    if adapters.len() != bb.adapter_after.len() {
        return Err(Error::Dimension(format!(
            "{} adapter layers for {} insertion points",
            adapters.len(),
            bb.adapter_after.len()
        )));
    }
    Ok(())
}

/// Runs the tower, applying `adapters[i]` after backbone layer `adapter_after[i]`.
pub fn backbone_forward(
    bb: &FrozenBackbone,
    adapters: &[MixtureAdapterLayer],
    routing: Routing,
    x: &Matrix,
) -> Result<(Matrix, BackboneCache)> {
    check_adapters(bb, adapters)?;
    if x.cols() != bb.dim {
        return Err(Error::Dimension(format!("input width {} for backbone dim {}", x.cols(), bb.dim)));
    }
    let mut h = x.clone();
    let mut activations = Vec::with_capacity(bb.depth());
    let mut adapter_caches = vec![None; adapters.len()];
    for l in 0..bb.depth() {
        let z = bb.layer_forward(l, &h)?;
        h = match (bb.adapter_after.iter().position(|&a| a == l), routing) {
            (Some(i), Routing::Task(task)) => {
                let (y, cache) = adapters[i].forward(task, &z)?;
                adapter_caches[i] = Some(cache);
                y
            }
            _ => z.clone(),
        };
        activations.push(z);
    }
    Ok((
        h,
        BackboneCache {
            activations,
            adapter_caches,
        },
    ))
}

/// Backpropagates to the input and to every adapter that was used.
/// `gate_grads[i]` is forwarded to adapter `i` (see
/// [`MixtureAdapterLayer::backward`]).
pub fn backbone_backward(
    bb: &FrozenBackbone,
    adapters: &[MixtureAdapterLayer],
    cache: &BackboneCache,
    grad_out: &Matrix,
    gate_grads: Option<&[Vec<f64>]>,
) -> Result<(Matrix, Vec<Option<LayerGrads>>)> {
    check_adapters(bb, adapters)?;
    let mut g = grad_out.clone();
    let mut layer_grads = vec![None; adapters.len()];
    for l in (0..bb.depth()).rev() {
        if let Some(i) = bb.adapter_after.iter().position(|&a| a == l) {
            if let Some(ac) = &cache.adapter_caches[i] {
                let gg = gate_grads.map(|v| v[i].as_slice());
                let (gx, lg) = adapters[i].backward(ac, &g, gg)?;
                g = gx;
                layer_grads[i] = Some(lg);
            }
        }
        let z = &cache.activations[l];
        for (gv, zv) in g.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *gv *= 1.0 - zv * zv;
        }
        g = g.matmul(&bb.layers[l].weight)?;
    }
    Ok((g, layer_grads))
}
