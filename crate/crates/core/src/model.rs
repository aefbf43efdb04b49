//! Forward computation: PairNorm, the two light-convolution stacks (ID
//! embeddings `E` and criteria-preference embeddings `P`), uniform layer
//! combination and dot-product scoring, plus the matching backward pass.
//!
//! The `P` stack treats every row at a criterion-item node as a constant for
//! backpropagation. Because the graph is bipartite, user rows after layer 0 are
//! built only from those constants, so `P0_user` receives gradient solely through
//! the layer-0 term of the combined user embedding.

use log::warn;
use ndarray::{s, Array1, Array2, Axis};
use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{propagate, Layout, NormalizedAdjacency};
use crate::rng::{self, Stream};

/// Centre the rows of `x`, then rescale so the mean squared row norm is `s^2`.
pub fn pairnorm(x: &Array2<f64>, s: f64) -> Result<Array2<f64>> {
    if x.nrows() == 0 {
        return Err(Error::Dimension("pairnorm needs at least one row".into()));
    }
    if !(s > 0.0) {
        return Err(Error::Config(format!("pairnorm scale must be positive, got {s}")));
    }
    let (centered, norm) = center(x);
    if !(norm > 0.0) {
        return Err(Error::Degenerate("all rows are identical; centred norm is zero".into()));
    }
    let k = s * (x.nrows() as f64).sqrt() / norm;
    Ok(centered * k)
}

fn center(x: &Array2<f64>) -> (Array2<f64>, f64) {
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centered = x - &mean;
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    (centered, norm)
}

/// Vector-Jacobian product of [`pairnorm`] at input `x`.
pub fn pairnorm_backward(x: &Array2<f64>, s: f64, grad_out: &Array2<f64>) -> Array2<f64> {
    let (m, norm) = center(x);
    let k = s * (x.nrows() as f64).sqrt() / norm;
    let inner: f64 = grad_out.iter().zip(m.iter()).map(|(g, v)| g * v).sum();
    let mut g_m = grad_out - &(&m * (inner / (norm * norm)));
    g_m *= k;
    let mean = g_m.mean_axis(Axis(0)).unwrap();
    g_m - &mean
}

/// Settings that shape the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub layers: usize,
    /// PairNorm scale `s`.
    pub scale: f64,
    pub pairnorm: bool,
    /// Apply PairNorm to the layer-0 tables before the first propagation.
    pub pairnorm_layer0: bool,
    /// Run the criteria-preference stack.
    pub preference: bool,
    /// Fail on degenerate PairNorm input instead of passing the table through.
    pub strict: bool,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            scale: 1.0,
            pairnorm: true,
            pairnorm_layer0: true,
            preference: true,
            strict: false,
        }
    }
}

/// Trainable ID embeddings, trainable user preference embeddings and fixed
/// per-criterion prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingState {
    pub layout: Layout,
    pub dim: usize,
    /// One row per node (users, then criterion-item blocks).
    pub e0: Array2<f64>,
    pub p0_user: Option<Array2<f64>>,
    pub p0_proto: Option<Array2<f64>>,
}

fn xavier(rows: usize, dim: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    let bound = (6.0 / (2.0 * dim as f64)).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_fn((rows, dim), |_| dist.sample(rng))
}

impl EmbeddingState {
    /// Xavier-uniform initialization. `E0` is drawn first from the init stream,
    /// so two states with the same seed and layout share `E0` whether or not
    /// they carry preference tables.
    pub fn init(layout: Layout, dim: usize, preference: bool, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::Init);
        let e0 = xavier(layout.node_count(), dim, &mut rng);
        let (p0_user, p0_proto) = if preference {
            let p_user = xavier(layout.n_users, dim, &mut rng);
            let mut proto_rng = rng::stream(seed, Stream::Prototype);
            let proto = xavier(layout.n_criteria_plus1, dim, &mut proto_rng);
            (Some(p_user), Some(proto))
        } else {
            (None, None)
        };
        Self {
            layout,
            dim,
            e0,
            p0_user,
            p0_proto,
        }
    }

    pub fn has_preference(&self) -> bool {
        self.p0_user.is_some()
    }

    /// Layer-0 preference table: user rows then prototype rows repeated per item.
    pub fn initial_p(&self) -> Option<Array2<f64>> {
        let (p_user, proto) = (self.p0_user.as_ref()?, self.p0_proto.as_ref()?);
        let mut out = Array2::zeros((self.layout.node_count(), self.dim));
        out.slice_mut(s![..self.layout.n_users, ..]).assign(p_user);
        for c in 0..self.layout.n_criteria_plus1 {
            let start = self.layout.item_node(0, c);
            out.slice_mut(s![start..start + self.layout.n_items, ..])
                .assign(&proto.row(c).broadcast((self.layout.n_items, self.dim)).unwrap());
        }
        Some(out)
    }

    pub fn is_finite(&self) -> bool {
        let finite = |t: &Option<Array2<f64>>| t.as_ref().is_none_or(|t| t.iter().all(|v| v.is_finite()));
        self.e0.iter().all(|v| v.is_finite()) && finite(&self.p0_user) && finite(&self.p0_proto)
    }
}

/// Per-layer tables of one convolution stack.
#[derive(Debug, Clone)]
pub struct StackTrace {
    /// Tables before normalization; `pre[0]` is the initial table.
    pub pre: Vec<Array2<f64>>,
    /// Tables after normalization, the dotted quantities.
    pub post: Vec<Array2<f64>>,
    /// Uniform mean of `post` before the final normalization.
    pub combined_pre: Array2<f64>,
    pub combined: Array2<f64>,
    /// Whether PairNorm was applied at layers `0..=L`, then at the combination.
    pub normalized: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layout: Layout,
    pub config: ForwardConfig,
    pub e: StackTrace,
    pub p: Option<StackTrace>,
}

impl ForwardTrace {
    /// Final node table `E* + P*` used for scoring.
    pub fn final_table(&self) -> Array2<f64> {
        match &self.p {
            Some(p) => &self.e.combined + &p.combined,
            None => self.e.combined.clone(),
        }
    }

    pub fn final_repr(&self) -> FinalRepr {
        FinalRepr::from_table(&self.final_table(), self.layout)
    }
}

struct Normalizer {
    enabled: bool,
    layer0: bool,
    scale: f64,
    strict: bool,
}

impl Normalizer {
    fn apply(&self, x: &Array2<f64>, layer: Option<usize>) -> Result<(Array2<f64>, bool)> {
        if !self.enabled || (layer == Some(0) && !self.layer0) {
            return Ok((x.clone(), false));
        }
        match pairnorm(x, self.scale) {
            Ok(y) => Ok((y, true)),
            Err(Error::Degenerate(msg)) if !self.strict => {
                warn!("pairnorm skipped: {msg}");
                Ok((x.clone(), false))
            }
            Err(e) => Err(e),
        }
    }
}

fn check_finite(x: &Array2<f64>, stage: &'static str, layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, layer })
    }
}

/// Uniform mean over all layer tables `0..=L`.
pub fn combine(layers: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = layers[0].clone();
    for t in &layers[1..] {
        acc += t;
    }
    acc / layers.len() as f64
}

fn run_stack(
    adj: &NormalizedAdjacency,
    initial: Array2<f64>,
    config: &ForwardConfig,
    stage: &'static str,
) -> Result<StackTrace> {
    let norm = Normalizer {
        enabled: config.pairnorm,
        layer0: config.pairnorm_layer0,
        scale: config.scale,
        strict: config.strict,
    };
    let mut pre = Vec::with_capacity(config.layers + 1);
    let mut post = Vec::with_capacity(config.layers + 1);
    let mut normalized = Vec::with_capacity(config.layers + 2);
    let (first, applied) = norm.apply(&initial, Some(0))?;
    check_finite(&first, stage, 0)?;
    pre.push(initial);
    post.push(first);
    normalized.push(applied);
    for l in 1..=config.layers {
        let x = propagate(adj, &post[l - 1])?;
        check_finite(&x, stage, l)?;
        let (y, applied) = norm.apply(&x, Some(l))?;
        check_finite(&y, stage, l)?;
        pre.push(x);
        post.push(y);
        normalized.push(applied);
    }
    let combined_pre = combine(&post);
    let (combined, applied) = norm.apply(&combined_pre, None)?;
    check_finite(&combined, stage, config.layers)?;
    normalized.push(applied);
    Ok(StackTrace {
        pre,
        post,
        combined_pre,
        combined,
        normalized,
    })
}

pub fn forward(adj: &NormalizedAdjacency, state: &EmbeddingState, config: &ForwardConfig) -> Result<ForwardTrace> {
    if config.layers == 0 {
        return Err(Error::Config("at least one layer is required".into()));
    }
    if adj.n_nodes != state.layout.node_count() {
        return Err(Error::Dimension(format!(
            "adjacency has {} nodes, embeddings have {}",
            adj.n_nodes,
            state.layout.node_count()
        )));
    }
    let e = run_stack(adj, state.e0.clone(), config, "E")?;
    let p = match (config.preference, state.initial_p()) {
        (true, Some(initial)) => Some(run_stack(adj, initial, config, "P")?),
        (true, None) => {
            return Err(Error::Config("preference stack requested but state has no P tables".into()))
        }
        (false, _) => None,
    };
    Ok(ForwardTrace {
        layout: state.layout,
        config: *config,
        e,
        p,
    })
}

/// Gradients with respect to the trainable tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub e0: Array2<f64>,
    pub p0_user: Option<Array2<f64>>,
    /// Always zero: prototypes are outside the gradient path.
    pub p0_proto: Option<Array2<f64>>,
}

fn norm_back(x: &Array2<f64>, applied: bool, scale: f64, g: Array2<f64>) -> Array2<f64> {
    if applied {
        pairnorm_backward(x, scale, &g)
    } else {
        g
    }
}

fn zero_item_rows(mut g: Array2<f64>, n_users: usize) -> Array2<f64> {
    g.slice_mut(s![n_users.., ..]).fill(0.0);
    g
}

impl ForwardTrace {
    /// Backpropagates `grad_final` (gradient of the loss with respect to the
    /// final node table) to the layer-0 tables.
    pub fn backward(&self, adj: &NormalizedAdjacency, grad_final: &Array2<f64>) -> Result<Gradients> {
        let scale = self.config.scale;
        let l_count = self.config.layers;
        let w = 1.0 / (l_count + 1) as f64;

        let e = &self.e;
        let g_mean = norm_back(&e.combined_pre, e.normalized[l_count + 1], scale, grad_final.clone());
        let mut g_post = &g_mean * w;
        for l in (1..=l_count).rev() {
            let g_pre = norm_back(&e.pre[l], e.normalized[l], scale, g_post);
            g_post = propagate(adj, &g_pre)? + &(&g_mean * w);
        }
        let g_e0 = norm_back(&e.pre[0], e.normalized[0], scale, g_post);
        check_finite(&g_e0, "E gradient", 0)?;

        let (g_p_user, g_proto) = match &self.p {
            Some(p) => {
                let n_users = self.layout.n_users;
                let g_out = zero_item_rows(grad_final.clone(), n_users);
                let g_mean = norm_back(&p.combined_pre, p.normalized[l_count + 1], scale, g_out);
                let g_post0 = zero_item_rows(g_mean, n_users) * w;
                let g_p0 = norm_back(&p.pre[0], p.normalized[0], scale, g_post0);
                let g_user = g_p0.slice(s![..n_users, ..]).to_owned();
                check_finite(&g_user, "P gradient", 0)?;
                let proto = Array2::zeros((self.layout.n_criteria_plus1, g_user.ncols()));
                (Some(g_user), Some(proto))
            }
            None => (None, None),
        };
        Ok(Gradients {
            e0: g_e0,
            p0_user: g_p_user,
            p0_proto: g_proto,
        })
    }
}

/// Final user and criterion-0 item representations, the only rows ranking needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRepr {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
}

impl FinalRepr {
    pub fn from_table(table: &Array2<f64>, layout: Layout) -> Self {
        let start = layout.item_node(0, 0);
        Self {
            user: table.slice(s![..layout.n_users, ..]).to_owned(),
            item: table.slice(s![start..start + layout.n_items, ..]).to_owned(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.user.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.item.nrows()
    }

    /// Overall-criterion scores of every item for one user.
    pub fn scores(&self, user: usize) -> Array1<f64> {
        self.item.dot(&self.user.row(user))
    }
}

/// `(E*[u] + P*[u]) . (E*[node] + P*[node])`.
pub fn predict(e_star: &Array2<f64>, p_star: Option<&Array2<f64>>, user: usize, node: usize) -> f64 {
    let mut left = e_star.row(user).to_owned();
    let mut right = e_star.row(node).to_owned();
    if let Some(p) = p_star {
        left += &p.row(user);
        right += &p.row(node);
    }
    left.dot(&right)
}

/// Scores of every item at criterion 0 for `user`.
pub fn score_all_items(e_star: &Array2<f64>, p_star: Option<&Array2<f64>>, layout: Layout, user: usize) -> Vec<f64> {
    (0..layout.n_items)
        .map(|i| predict(e_star, p_star, user, layout.item_node(i, 0)))
        .collect()
}
