//! Mixture-of-LoRA-experts adapter layer.
//!
//! A layer holds a growing pool of low-rank experts and one router per learned
//! task. Each router only sees the experts that existed when its task was
//! learned; its rows are kept in the same order as its `experts` list.
//!
//! Forward (per input row `x`):
//!
//! ```text
//! z = W_router x
//! p = softmax(z)
//! S = top-k(p)               (ties -> lower index)
//! g_j = p_j / Σ_{i∈S} p_i    (j ∈ S, else 0)
//! y = x + s Σ_j g_j B_j A_j x
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax, Matrix, ProbVector};

pub type TaskId = u32;
pub type ExpertId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraExpert {
    pub id: ExpertId,
    pub owner_task: TaskId,
    /// Down-projection, `rank x d_in`.
    pub a: Matrix,
    /// Up-projection, `d_out x rank`.
    pub b: Matrix,
    pub frozen: bool,
}

impl LoraExpert {
    /// `A ~ U(-1/√d_in, 1/√d_in)`, `B = 0`: a fresh expert is the zero map.
    pub fn new<R: Rng + ?Sized>(
        id: ExpertId,
        owner_task: TaskId,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = Matrix::from_fn(rank, d_in, |_, _| rng.random_range(-bound..bound));
        LoraExpert {
            id,
            owner_task,
            a,
            b: Matrix::zeros(d_out, rank),
            frozen: false,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Returns `(x Aᵀ, x Aᵀ Bᵀ)` for a batch of row inputs.
    pub fn apply(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let ax = x.matmul_t(&self.a)?;
        let out = ax.matmul_t(&self.b)?;
        Ok((ax, out))
    }

    /// Squared Euclidean distance between the flattened parameters of two
    /// same-shaped experts.
    pub fn param_dist_sq(&self, a: &Matrix, b: &Matrix) -> Result<f64> {
        Ok(self.a.sub(a)?.frobenius_sq() + self.b.sub(b)?.frobenius_sq())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub owner_task: TaskId,
    /// Experts visible to this router, one per weight row.
    pub experts: Vec<ExpertId>,
    /// `experts.len() x d_in`.
    pub weight: Matrix,
    pub frozen: bool,
}

impl Router {
    pub fn parameter_count(&self) -> usize {
        self.weight.len()
    }
}

/// Routing of one input over a router's visible experts.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDistribution {
    pub probs: ProbVector,
    pub top_k_mask: Vec<bool>,
    /// Top-k probabilities renormalized to sum to one; zero outside the mask.
    pub gates: Vec<f64>,
}

impl RoutingDistribution {
    pub fn from_logits(logits: &[f64], top_k: usize) -> Result<Self> {
        let probs = softmax(logits)?;
        let k = top_k.clamp(1, logits.len());
        let mut order: Vec<usize> = (0..logits.len()).collect();
        // descending probability, ascending index on ties
        order.sort_by(|&i, &j| {
            probs.as_slice()[j]
                .partial_cmp(&probs.as_slice()[i])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        let mut top_k_mask = vec![false; logits.len()];
        for &i in &order[..k] {
            top_k_mask[i] = true;
        }
        let mass: f64 = order[..k].iter().map(|&i| probs.as_slice()[i]).sum();
        let gates = probs
            .as_slice()
            .iter()
            .zip(&top_k_mask)
            .map(|(&p, &m)| if m { p / mass } else { 0.0 })
            .collect();
        Ok(RoutingDistribution {
            probs,
            top_k_mask,
            gates,
        })
    }
}

/// Routing of a whole batch through one router.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRouting {
    pub expert_ids: Vec<ExpertId>,
    pub rows: Vec<RoutingDistribution>,
}

impl BatchRouting {
    /// Batch-mean of the renormalized gates, one entry per visible expert.
    pub fn mean_gates(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.expert_ids.len()];
        for row in &self.rows {
            for (o, g) in out.iter_mut().zip(&row.gates) {
                *o += g;
            }
        }
        let n = self.rows.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    pub fn gate_of(&self, expert: ExpertId) -> Option<f64> {
        let pos = self.expert_ids.iter().position(|&e| e == expert)?;
        Some(self.mean_gates()[pos])
    }
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    task: TaskId,
    version: u64,
    x: Matrix,
    /// Position of each visible expert inside `MixtureAdapterLayer::experts`.
    expert_pos: Vec<usize>,
    ax: Vec<Matrix>,
    out: Vec<Matrix>,
    pub routing: BatchRouting,
}

impl ForwardCache {
    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn input(&self) -> &Matrix {
        &self.x
    }

    /// Output `s B_j A_j x` of visible expert `j` (router-row order).
    pub fn expert_output(&self, j: usize) -> &Matrix {
        &self.out[j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertGrad {
    pub a: Matrix,
    pub b: Matrix,
}

impl ExpertGrad {
    pub fn zeros_like(e: &LoraExpert) -> Self {
        ExpertGrad {
            a: Matrix::zeros(e.a.rows(), e.a.cols()),
            b: Matrix::zeros(e.b.rows(), e.b.cols()),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.a.frobenius_sq() + self.b.frobenius_sq()
    }

    pub fn is_zero(&self) -> bool {
        self.a.as_slice().iter().chain(self.b.as_slice()).all(|&v| v == 0.0)
    }

    pub fn scale(&self, s: f64) -> Self {
        ExpertGrad {
            a: self.a.scale(s),
            b: self.b.scale(s),
        }
    }
}

/// Parameter gradients of one adapter layer for the router that was used.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub task: TaskId,
    pub expert_ids: Vec<ExpertId>,
    /// Router-row order; unselected or frozen experts still get their (possibly
    /// zero) gradient for inspection.
    pub experts: Vec<ExpertGrad>,
    pub router: Matrix,
}

/// Frobenius norm of each expert gradient.
pub fn expert_gradient_norm(grads: &[ExpertGrad]) -> Vec<f64> {
    grads.iter().map(|g| g.norm_sq().sqrt()).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixtureAdapterLayer {
    pub layer_index: usize,
    dim: usize,
    rank: usize,
    top_k: usize,
    /// Output multiplier `s` in `y = x + s Σ_j g_j B_j A_j x`.
    #[serde(default = "unit_scale")]
    scale: f64,
    experts: Vec<LoraExpert>,
    routers: Vec<Router>,
    next_expert_id: ExpertId,
    #[serde(skip)]
    version: u64,
}

fn unit_scale() -> f64 {
    1.0
}

impl PartialEq for MixtureAdapterLayer {
    fn eq(&self, other: &Self) -> bool {
        self.layer_index == other.layer_index
            && self.dim == other.dim
            && self.rank == other.rank
            && self.top_k == other.top_k
            && self.scale.to_bits() == other.scale.to_bits()
            && self.experts == other.experts
            && self.routers == other.routers
            && self.next_expert_id == other.next_expert_id
    }
}

impl MixtureAdapterLayer {
    pub fn new(layer_index: usize, dim: usize, rank: usize, top_k: usize) -> Result<Self> {
        if dim == 0 || rank == 0 || top_k == 0 {
            return Err(Error::Domain(format!(
                "adapter layer needs positive dim/rank/top_k, got {dim}/{rank}/{top_k}"
            )));
        }
        Ok(MixtureAdapterLayer {
            layer_index,
            dim,
            rank,
            top_k,
            scale: 1.0,
            experts: Vec::new(),
            routers: Vec::new(),
            next_expert_id: 0,
            version: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn set_top_k(&mut self, k: usize) {
        self.top_k = k.max(1);
        self.version += 1;
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, s: f64) -> Result<()> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Domain(format!("adapter scale must be positive, got {s}")));
        }
        self.scale = s;
        self.version += 1;
        Ok(())
    }

    pub fn experts(&self) -> &[LoraExpert] {
        &self.experts
    }

    pub fn routers(&self) -> &[Router] {
        &self.routers
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn expert(&self, id: ExpertId) -> Option<&LoraExpert> {
        self.experts.iter().find(|e| e.id == id)
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn expert_mut(&mut self, id: ExpertId) -> Option<&mut LoraExpert> {
        self.version += 1;
        self.experts.iter_mut().find(|e| e.id == id)
    }

    pub fn router(&self, task: TaskId) -> Option<&Router> {
        self.routers.iter().find(|r| r.owner_task == task)
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn router_mut(&mut self, task: TaskId) -> Option<&mut Router> {
        self.version += 1;
        self.routers.iter_mut().find(|r| r.owner_task == task)
    }

    pub fn has_task(&self, task: TaskId) -> bool {
        self.router(task).is_some()
    }

    /// Adds a fresh zero-map expert owned by `task` and returns its id.
    pub fn add_expert<R: Rng + ?Sized>(&mut self, task: TaskId, rng: &mut R) -> ExpertId {
        let id = self.next_expert_id;
        self.next_expert_id += 1;
        self.experts
            .push(LoraExpert::new(id, task, self.dim, self.dim, self.rank, rng));
        self.version += 1;
        id
    }

    /// Adds a router for `task` over every expert currently in the layer, with
    /// weights drawn from `U(-scale, scale)`.
    pub fn add_router<R: Rng + ?Sized>(&mut self, task: TaskId, scale: f64, rng: &mut R) -> Result<()> {
        if self.has_task(task) {
            return Err(Error::State(format!(
                "layer {} already has a router for task {task}",
                self.layer_index
            )));
        }
        if self.experts.is_empty() {
            return Err(Error::State("router over an empty expert pool".into()));
        }
        let experts: Vec<ExpertId> = self.experts.iter().map(|e| e.id).collect();
        let weight = if scale > 0.0 {
            Matrix::from_fn(experts.len(), self.dim, |_, _| rng.random_range(-scale..scale))
        } else {
            Matrix::zeros(experts.len(), self.dim)
        };
        self.routers.push(Router {
            owner_task: task,
            experts,
            weight,
            frozen: false,
        });
        self.version += 1;
        Ok(())
    }

    /// Inserts a fully specified router.
    pub fn insert_router(&mut self, router: Router) -> Result<()> {
        if self.has_task(router.owner_task) {
            return Err(Error::State(format!("duplicate router for task {}", router.owner_task)));
        }
        if router.weight.rows() != router.experts.len() || router.weight.cols() != self.dim {
            return Err(Error::Dimension(format!(
                "router weight {:?} for {} experts of dim {}",
                router.weight.shape(),
                router.experts.len(),
                self.dim
            )));
        }
        if let Some(missing) = router.experts.iter().find(|&&id| self.expert(id).is_none()) {
            return Err(Error::State(format!("router references unknown expert {missing}")));
        }
        self.routers.push(router);
        self.version += 1;
        Ok(())
    }

    /// Removes an expert and deletes its logit row from every router.
    pub fn remove_expert(&mut self, id: ExpertId) -> Result<LoraExpert> {
        let pos = self
            .experts
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::State(format!("no expert {id} in layer {}", self.layer_index)))?;
        for router in &mut self.routers {
            if let Some(row) = router.experts.iter().position(|&e| e == id) {
                if router.experts.len() == 1 {
                    return Err(Error::State(format!(
                        "removing expert {id} would leave router of task {} empty",
                        router.owner_task
                    )));
                }
                router.experts.remove(row);
                router.weight.remove_row(row);
            }
        }
        self.version += 1;
        Ok(self.experts.remove(pos))
    }

    pub fn freeze_all(&mut self) {
        self.experts.iter_mut().for_each(|e| e.frozen = true);
        self.routers.iter_mut().for_each(|r| r.frozen = true);
        self.version += 1;
    }

    pub fn trainable_parameter_count(&self) -> usize {
        let e: usize = self
            .experts
            .iter()
            .filter(|e| !e.frozen)
            .map(LoraExpert::parameter_count)
            .sum();
        let r: usize = self
            .routers
            .iter()
            .filter(|r| !r.frozen)
            .map(Router::parameter_count)
            .sum();
        e + r
    }

    pub fn parameter_count(&self) -> usize {
        self.experts.iter().map(LoraExpert::parameter_count).sum::<usize>()
            + self.routers.iter().map(Router::parameter_count).sum::<usize>()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::Dimension(format!(
                "layer {} expects width {}, got {}",
                self.layer_index,
                self.dim,
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn route(&self, task: TaskId, x: &Matrix) -> Result<BatchRouting> {
        let router = self
            .router(task)
            .ok_or(Error::MissingRouter(task, self.layer_index))?;
        self.check_input(x)?;
        let logits = x.matmul_t(&router.weight)?;
        let rows = (0..x.rows())
            .map(|b| RoutingDistribution::from_logits(logits.row(b), self.top_k))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchRouting {
            expert_ids: router.experts.clone(),
            rows,
        })
    }

    pub fn forward(&self, task: TaskId, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let routing = self.route(task, x)?;
        let mut expert_pos = Vec::with_capacity(routing.expert_ids.len());
        let mut ax = Vec::with_capacity(routing.expert_ids.len());
        let mut out = Vec::with_capacity(routing.expert_ids.len());
        for &id in &routing.expert_ids {
            let pos = self
                .experts
                .iter()
                .position(|e| e.id == id)
                .ok_or_else(|| Error::State(format!("router references missing expert {id}")))?;
            let (a, mut o) = self.experts[pos].apply(x)?;
            if self.scale != 1.0 {
                o = o.scale(self.scale);
            }
            expert_pos.push(pos);
            ax.push(a);
            out.push(o);
        }
        let mut y = x.clone();
        for (b, dist) in routing.rows.iter().enumerate() {
            let y_row = y.row_mut(b);
            for (j, &g) in dist.gates.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (yv, ov) in y_row.iter_mut().zip(out[j].row(b)) {
                    *yv += g * ov;
                }
            }
        }
        let cache = ForwardCache {
            task,
            version: self.version,
            x: x.clone(),
            expert_pos,
            ax,
            out,
            routing,
        };
        Ok((y, cache))
    }

    /// Backpropagates `grad_y` through a cached forward pass.
    ///
    /// `gate_grad`, when given, is an extra `∂L/∂g_j` added for every selected
    /// expert of every row (router-row order); it carries the routing-dependent
    /// part of auxiliary losses into the router.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_y: &Matrix,
        gate_grad: Option<&[f64]>,
    ) -> Result<(Matrix, LayerGrads)> {
        if cache.version != self.version {
            return Err(Error::State(format!(
                "stale forward cache for layer {} (layer modified since forward)",
                self.layer_index
            )));
        }
        if grad_y.shape() != cache.x.shape() {
            return Err(Error::Dimension(format!(
                "grad_y {:?} vs input {:?}",
                grad_y.shape(),
                cache.x.shape()
            )));
        }
        let router = self
            .router(cache.task)
            .ok_or(Error::MissingRouter(cache.task, self.layer_index))?;
        let n_vis = cache.expert_pos.len();
        if let Some(gg) = gate_grad {
            if gg.len() != n_vis {
                return Err(Error::Dimension(format!(
                    "gate gradient of length {} for {n_vis} experts",
                    gg.len()
                )));
            }
        }

        let mut grad_x = grad_y.clone();
        let mut router_grad = Matrix::zeros(n_vis, self.dim);
        let mut grads: Vec<ExpertGrad> = cache
            .expert_pos
            .iter()
            .map(|&p| ExpertGrad::zeros_like(&self.experts[p]))
            .collect();

        for (b, dist) in cache.routing.rows.iter().enumerate() {
            let gy = grad_y.row(b);
            let xb = cache.x.row(b);

            // ∂L/∂g_j for selected experts, then through the restricted softmax
            let mut dg = vec![0.0; n_vis];
            let mut weighted = 0.0;
            for j in 0..n_vis {
                if !dist.top_k_mask[j] {
                    continue;
                }
                dg[j] = dot(gy, cache.out[j].row(b)) + gate_grad.map_or(0.0, |gg| gg[j]);
                weighted += dist.gates[j] * dg[j];
            }
            for j in 0..n_vis {
                if !dist.top_k_mask[j] {
                    continue;
                }
                let dz = dist.gates[j] * (dg[j] - weighted);
                if dz != 0.0 {
                    for (r, xv) in router_grad.row_mut(j).iter_mut().zip(xb) {
                        *r += dz * xv;
                    }
                    for (gx, w) in grad_x.row_mut(b).iter_mut().zip(router.weight.row(j)) {
                        *gx += dz * w;
                    }
                }

                let g = dist.gates[j];
                if g == 0.0 {
                    continue;
                }
                let g = g * self.scale;
                let expert = &self.experts[cache.expert_pos[j]];
                let rank = expert.rank();
                let axb = cache.ax[j].row(b);
                // dB += g · gy ⊗ (A x)
                for o in 0..self.dim {
                    let s = g * gy[o];
                    if s == 0.0 {
                        continue;
                    }
                    for k in 0..rank {
                        grads[j].b[(o, k)] += s * axb[k];
                    }
                }
                // u = Bᵀ gy; dA += g · u ⊗ x; dx += g · Aᵀ u
                for k in 0..rank {
                    let u: f64 = (0..self.dim).map(|o| expert.b[(o, k)] * gy[o]).sum();
                    let s = g * u;
                    if s == 0.0 {
                        continue;
                    }
                    for (i, xv) in xb.iter().enumerate() {
                        grads[j].a[(k, i)] += s * xv;
                    }
                    for (gx, av) in grad_x.row_mut(b).iter_mut().zip(expert.a.row(k)) {
                        *gx += s * av;
                    }
                }
            }
        }

        Ok((
            grad_x,
            LayerGrads {
                task: cache.task,
                expert_ids: cache.routing.expert_ids.clone(),
                experts: grads,
                router: router_grad,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Layer with `n` experts (random A and B) and one router for task 0.
    fn random_layer(rng: &mut ChaCha8Rng, n: usize, dim: usize, rank: usize, k: usize) -> MixtureAdapterLayer {
        let mut layer = MixtureAdapterLayer::new(0, dim, rank, k).unwrap();
        for _ in 0..n {
            let id = layer.add_expert(0, rng);
            let b = random_matrix(rng, dim, rank);
            layer.expert_mut(id).unwrap().b = b;
        }
        layer.add_router(0, 1.0, rng).unwrap();
        layer
    }

    #[test]
    fn single_expert_routes_with_probability_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = random_layer(&mut rng, 1, 4, 2, 2);
        let x = random_matrix(&mut rng, 3, 4);
        let routing = layer.route(0, &x).unwrap();
        for row in &routing.rows {
            assert_eq!(row.probs.as_slice(), &[1.0]);
            assert_eq!(row.gates, vec![1.0]);
        }
    }

    #[test]
    fn equal_router_rows_pick_lowest_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = random_layer(&mut rng, 4, 4, 2, 2);
        let w = layer.router_mut(0).unwrap();
        w.weight = Matrix::from_fn(4, 4, |_, c| c as f64 * 0.1);
        let x = random_matrix(&mut rng, 2, 4);
        let routing = layer.route(0, &x).unwrap();
        for row in &routing.rows {
            assert_eq!(row.top_k_mask, vec![true, true, false, false]);
            assert_eq!(row.gates, vec![0.5, 0.5, 0.0, 0.0]);
        }
    }

    #[test]
    fn full_top_k_equals_plain_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(&mut rng, 5, 6, 2, 5);
        let x = random_matrix(&mut rng, 4, 6);
        let routing = layer.route(0, &x).unwrap();
        let w = &layer.router(0).unwrap().weight;
        for (b, row) in routing.rows.iter().enumerate() {
            let logits: Vec<f64> = (0..5).map(|j| dot(x.row(b), w.row(j))).collect();
            let p = softmax(&logits).unwrap();
            for (g, q) in row.gates.iter().zip(p.as_slice()) {
                assert!((g - q).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unknown_task_is_missing_router() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(&mut rng, 2, 4, 2, 2);
        let x = random_matrix(&mut rng, 1, 4);
        assert!(matches!(layer.route(7, &x), Err(Error::MissingRouter(7, 0))));
        let bad = random_matrix(&mut rng, 1, 5);
        assert!(matches!(layer.forward(0, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_b_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = MixtureAdapterLayer::new(0, 5, 2, 2).unwrap();
        for _ in 0..3 {
            layer.add_expert(0, &mut rng);
        }
        layer.add_router(0, 1.0, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 4, 5);
        let (y, _) = layer.forward(0, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_expert_forward_is_x_plus_bax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = random_layer(&mut rng, 1, 4, 2, 2);
        let x = random_matrix(&mut rng, 3, 4);
        let (y, _) = layer.forward(0, &x).unwrap();
        let e = &layer.experts()[0];
        let expected = x.add(&x.matmul_t(&e.a).unwrap().matmul_t(&e.b).unwrap()).unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn forward_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = random_layer(&mut rng, 3, 4, 2, 2);
        let x = random_matrix(&mut rng, 5, 4);
        let (y, cache) = layer.forward(0, &x).unwrap();
        for b in 0..5 {
            let mut expected = x.row(b).to_vec();
            for (j, e) in layer.experts().iter().enumerate() {
                let g = cache.routing.rows[b].gates[j];
                // B (A x) written out element by element
                for o in 0..4 {
                    let mut acc = 0.0;
                    for k in 0..2 {
                        let ax: f64 = (0..4).map(|i| e.a[(k, i)] * x[(b, i)]).sum();
                        acc += e.b[(o, k)] * ax;
                    }
                    expected[o] += g * acc;
                }
            }
            for (a, e) in y.row(b).iter().zip(&expected) {
                assert!((a - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn unselected_expert_gets_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer = random_layer(&mut rng, 3, 4, 2, 1);
        // make expert 2 never win
        layer.router_mut(0).unwrap().weight = Matrix::from_fn(3, 4, |r, _| if r == 2 { -1.0 } else { 0.2 * r as f64 });
        let x = Matrix::from_fn(2, 4, |_, _| 1.0);
        let (_, cache) = layer.forward(0, &x).unwrap();
        let gy = random_matrix(&mut rng, 2, 4);
        let (_, grads) = layer.backward(&cache, &gy, None).unwrap();
        assert!(grads.experts[2].is_zero());
        assert!(!grads.experts[1].is_zero());
    }

    #[test]
    fn backward_is_linear_in_grad_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = random_layer(&mut rng, 3, 4, 2, 2);
        let x = random_matrix(&mut rng, 3, 4);
        let (_, cache) = layer.forward(0, &x).unwrap();
        let gy = random_matrix(&mut rng, 3, 4);
        let (gx1, g1) = layer.backward(&cache, &gy, None).unwrap();
        let (gx2, g2) = layer.backward(&cache, &gy.scale(2.0), None).unwrap();
        assert!(gx2.max_abs_diff(&gx1.scale(2.0)) < 1e-13);
        assert!(g2.router.max_abs_diff(&g1.router.scale(2.0)) < 1e-13);
        for (a, b) in g1.experts.iter().zip(&g2.experts) {
            assert!(b.a.max_abs_diff(&a.a.scale(2.0)) < 1e-13);
            assert!(b.b.max_abs_diff(&a.b.scale(2.0)) < 1e-13);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut layer = random_layer(&mut rng, 2, 4, 2, 2);
        let x = random_matrix(&mut rng, 1, 4);
        let (_, cache) = layer.forward(0, &x).unwrap();
        layer.expert_mut(0).unwrap().a[(0, 0)] += 1.0;
        assert!(matches!(
            layer.backward(&cache, &x, None),
            Err(Error::State(_))
        ));
    }

    /// Loss `⟨c, y⟩` so that `grad_y = c`.
    fn linear_loss(layer: &MixtureAdapterLayer, x: &Matrix, c: &Matrix) -> f64 {
        let (y, _) = layer.forward(0, x).unwrap();
        dot(y.as_slice(), c.as_slice())
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = random_layer(&mut rng, 2, 4, 2, 2);
        let x = random_matrix(&mut rng, 3, 4);
        let c = random_matrix(&mut rng, 3, 4);
        let (_, cache) = layer.forward(0, &x).unwrap();
        let (gx, grads) = layer.backward(&cache, &c, None).unwrap();

        let fd_x = finite_diff_grad(|m| linear_loss(&layer, m, &c), &x, 1e-5).unwrap();
        assert!(gx.sub(&fd_x).unwrap().frobenius_norm() / fd_x.frobenius_norm() < 1e-5);

        let w = layer.router(0).unwrap().weight.clone();
        let fd_w = finite_diff_grad(
            |m| {
                let mut l = layer.clone();
                l.router_mut(0).unwrap().weight = m.clone();
                linear_loss(&l, &x, &c)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(grads.router.sub(&fd_w).unwrap().frobenius_norm() / fd_w.frobenius_norm() < 1e-5);

        for (j, e) in layer.experts().iter().enumerate() {
            let id = e.id;
            let fd_a = finite_diff_grad(
                |m| {
                    let mut l = layer.clone();
                    l.expert_mut(id).unwrap().a = m.clone();
                    linear_loss(&l, &x, &c)
                },
                &e.a,
                1e-5,
            )
            .unwrap();
            let fd_b = finite_diff_grad(
                |m| {
                    let mut l = layer.clone();
                    l.expert_mut(id).unwrap().b = m.clone();
                    linear_loss(&l, &x, &c)
                },
                &e.b,
                1e-5,
            )
            .unwrap();
            assert!(grads.experts[j].a.sub(&fd_a).unwrap().frobenius_norm() <= 1e-5 * fd_a.frobenius_norm().max(1e-12));
            assert!(grads.experts[j].b.sub(&fd_b).unwrap().frobenius_norm() <= 1e-5 * fd_b.frobenius_norm().max(1e-12));
        }
    }

    #[test]
    fn gradient_norms() {
        let z = ExpertGrad {
            a: Matrix::zeros(2, 3),
            b: Matrix::zeros(3, 2),
        };
        assert_eq!(expert_gradient_norm(std::slice::from_ref(&z)), vec![0.0]);
        let mut one = z.clone();
        one.b[(1, 1)] = -2.5;
        assert_eq!(expert_gradient_norm(&[one]), vec![2.5]);
    }

    #[test]
    fn remove_expert_drops_router_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut layer = random_layer(&mut rng, 3, 4, 2, 2);
        let before = layer.router(0).unwrap().weight.clone();
        layer.remove_expert(1).unwrap();
        let r = layer.router(0).unwrap();
        assert_eq!(r.experts, vec![0, 2]);
        assert_eq!(r.weight.row(0), before.row(0));
        assert_eq!(r.weight.row(1), before.row(2));
        assert_eq!(layer.expert_count(), 2);
    }
}
