//! BPR optimization: negative sampling, the pairwise loss, gradient assembly,
//! Adam, and the epoch loop with validation-based early stopping.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::{info, warn};
use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::LightGcnMc;
use crate::dataset::{InteractionSet, Splits};
use crate::error::{Error, Result};
use crate::evaluation::{rank_and_score, RankingMetrics};
use crate::graph::{build_graph, normalize, McExpansionGraph, NormalizedAdjacency};
use crate::model::{forward, EmbeddingState, FinalRepr, ForwardConfig, ForwardTrace, Gradients};
use crate::rng::{self, Stream};

/// Ablation switches. All off is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Variant {
    /// Build the graph from overall ratings only.
    pub mc_only: bool,
    /// Drop the criteria-preference stack.
    pub no_cp: bool,
    /// Drop PairNorm.
    pub no_f: bool,
}

impl Variant {
    pub const FULL: Self = Self {
        mc_only: false,
        no_cp: false,
        no_f: false,
    };
    pub const MC_ONLY: Self = Self {
        mc_only: true,
        no_cp: false,
        no_f: false,
    };
    pub const NO_CP: Self = Self {
        mc_only: false,
        no_cp: true,
        no_f: false,
    };
    pub const NO_F: Self = Self {
        mc_only: false,
        no_cp: false,
        no_f: true,
    };
    pub const ALL: [Self; 4] = [Self::FULL, Self::MC_ONLY, Self::NO_CP, Self::NO_F];

    pub fn label(&self) -> String {
        let mut s = String::from("CPA-LGC");
        if self.mc_only {
            s.push_str("-MC");
        }
        if self.no_cp {
            s.push_str("-c");
        }
        if self.no_f {
            s.push_str("-f");
        }
        s
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `full`, `mc_only`, `no_cp`, `no_f`, or a comma-separated combination.
    fn from_str(s: &str) -> Result<Self> {
        let mut v = Variant::FULL;
        for part in s.split(',').map(str::trim) {
            match part {
                "full" => {}
                "mc_only" => v.mc_only = true,
                "no_cp" => v.no_cp = true,
                "no_f" => v.no_f = true,
                other => return Err(Error::Config(format!("unknown variant {other:?}"))),
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    CpaLgc,
    Lightgcn,
    LightgcnMc,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpa_lgc" | "cpa-lgc" => Ok(Self::CpaLgc),
            "lightgcn" => Ok(Self::Lightgcn),
            "lightgcn_mc" => Ok(Self::LightgcnMc),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Which criterion-item nodes negatives are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    #[default]
    AnyCriterion,
    OverallOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub dim: usize,
    pub lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    /// PairNorm scale `s`.
    pub scale: f64,
    pub pairnorm: bool,
    pub pairnorm_layer0: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
    pub negatives: NegativeMode,
    /// Also exclude validation items from test candidates.
    pub exclude_valid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::CpaLgc,
            layers: 3,
            dim: 64,
            lr: 1e-3,
            lambda: 1e-3,
            alpha: 1.5,
            scale: 1.0,
            pairnorm: true,
            pairnorm_layer0: true,
            batch_size: 1024,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            variant: Variant::FULL,
            negatives: NegativeMode::AnyCriterion,
            exclude_valid: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("scale", self.scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.layers == 0 || self.dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("layers, dim and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::CpaLgc => self.variant.label(),
            ModelKind::Lightgcn => "LightGCN".into(),
            ModelKind::LightgcnMc => "LightGCN_MC".into(),
        }
    }

    pub fn forward_config(&self) -> ForwardConfig {
        match self.kind {
            ModelKind::CpaLgc => ForwardConfig {
                layers: self.layers,
                scale: self.scale,
                pairnorm: self.pairnorm && !self.variant.no_f,
                pairnorm_layer0: self.pairnorm_layer0,
                preference: !self.variant.no_cp,
                strict: false,
            },
            ModelKind::Lightgcn | ModelKind::LightgcnMc => ForwardConfig {
                layers: self.layers,
                scale: self.scale,
                pairnorm: false,
                pairnorm_layer0: false,
                preference: false,
                strict: false,
            },
        }
    }
}

/// A user, one of its criterion-item neighbours and a non-neighbour, all as
/// global node indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Draws BPR triples from a fixed graph.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    candidates: (usize, usize),
}

impl NegativeSampler {
    pub fn new(graph: &McExpansionGraph, mode: NegativeMode) -> Self {
        let end = match mode {
            NegativeMode::AnyCriterion => graph.node_count(),
            NegativeMode::OverallOnly => graph.n_users + graph.n_items,
        };
        Self {
            edges: graph.edges.iter().map(|e| (e.user, e.node)).collect(),
            neighbors: graph.user_neighbors(),
            candidates: (graph.n_users, end),
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Users are drawn in proportion to their edge count by picking edges
    /// uniformly; negatives are rejection-sampled. Users adjacent to every
    /// candidate are skipped, so the batch can come back short.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<BprTriple> {
        let mut out = Vec::with_capacity(batch_size);
        if self.edges.is_empty() {
            return out;
        }
        let (lo, hi) = self.candidates;
        for _ in 0..batch_size {
            let (user, pos) = self.edges[rng.gen_range(0..self.edges.len())];
            let adjacent = &self.neighbors[user];
            let blocked = adjacent.iter().filter(|&&n| n >= lo && n < hi).count();
            if blocked >= hi - lo {
                warn!("user {user} is adjacent to every candidate node; skipped");
                continue;
            }
            let neg = loop {
                let cand = rng.gen_range(lo..hi);
                if adjacent.binary_search(&cand).is_err() {
                    break cand;
                }
            };
            out.push(BprTriple { user, pos, neg });
        }
        out
    }
}

pub fn sample_batch(
    graph: &McExpansionGraph,
    batch_size: usize,
    mode: NegativeMode,
    rng: &mut impl Rng,
) -> Vec<BprTriple> {
    NegativeSampler::new(graph, mode).sample(batch_size, rng)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sum_k -ln sigma(pos_k - neg_k) + lambda * reg_norm_sq`.
pub fn bpr_loss(scores_pos: &[f64], scores_neg: &[f64], reg_norm_sq: f64, lambda: f64) -> Result<f64> {
    if scores_pos.len() != scores_neg.len() {
        return Err(Error::Dimension(format!(
            "{} positive scores vs {} negative scores",
            scores_pos.len(),
            scores_neg.len()
        )));
    }
    let data: f64 = scores_pos
        .iter()
        .zip(scores_neg)
        .map(|(p, n)| softplus(-(p - n)))
        .sum();
    Ok(data + lambda * reg_norm_sq)
}

/// Loss and gradient with respect to the final node table, for models scored
/// by plain dot products of rows of one table.
pub fn pairwise_grad(table: &Array2<f64>, batch: &[BprTriple]) -> (Vec<f64>, Vec<f64>, Array2<f64>) {
    let mut grad = Array2::zeros(table.raw_dim());
    let mut pos = Vec::with_capacity(batch.len());
    let mut neg = Vec::with_capacity(batch.len());
    for t in batch {
        let u = table.row(t.user);
        let p = table.row(t.pos);
        let n = table.row(t.neg);
        let sp = u.dot(&p);
        let sn = u.dot(&n);
        pos.push(sp);
        neg.push(sn);
        // d/dx softplus(-x) = -sigma(-x)
        let g = -sigmoid(-(sp - sn));
        let diff = &p - &n;
        let uu = u.to_owned();
        Zip::from(grad.row_mut(t.user)).and(&diff).for_each(|a, &d| *a += g * d);
        Zip::from(grad.row_mut(t.pos)).and(&uu).for_each(|a, &x| *a += g * x);
        Zip::from(grad.row_mut(t.neg)).and(&uu).for_each(|a, &x| *a -= g * x);
    }
    (pos, neg, grad)
}

/// Distinct rows of the layer-0 tables touched by a batch.
pub fn batch_rows(batch: &[BprTriple]) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut nodes = BTreeSet::new();
    let mut users = BTreeSet::new();
    for t in batch {
        nodes.extend([t.user, t.pos, t.neg]);
        users.insert(t.user);
    }
    (nodes, users)
}

fn add_regularization(table: &Array2<f64>, grad: &mut Array2<f64>, rows: &BTreeSet<usize>, lambda: f64) -> f64 {
    let mut norm_sq = 0.0;
    for &r in rows {
        let row = table.row(r);
        norm_sq += row.dot(&row);
        Zip::from(grad.row_mut(r)).and(&row).for_each(|g, &x| *g += 2.0 * lambda * x);
    }
    norm_sq
}

/// Exact gradient of the regularized batch loss with respect to `E0` and
/// `P0_user`, plus the loss value itself.
pub fn backward(
    adj: &NormalizedAdjacency,
    state: &EmbeddingState,
    trace: &ForwardTrace,
    batch: &[BprTriple],
    lambda: f64,
) -> Result<(f64, Gradients)> {
    let table = trace.final_table();
    let (pos, neg, grad_final) = pairwise_grad(&table, batch);
    let mut grads = trace.backward(adj, &grad_final)?;
    let (nodes, users) = batch_rows(batch);
    let mut reg = add_regularization(&state.e0, &mut grads.e0, &nodes, lambda);
    if let (Some(p), Some(g)) = (&state.p0_user, &mut grads.p0_user) {
        reg += add_regularization(p, g, &users, lambda);
    }
    let loss = bpr_loss(&pos, &neg, reg, lambda)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            stage: "loss",
            layer: trace.config.layers,
        });
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Array2<f64>, grads: &Array2<f64>, state: &mut AdamState, lr: f64, hp: AdamParams) {
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    Zip::from(params)
        .and(grads)
        .and(&mut state.m)
        .and(&mut state.v)
        .for_each(|p, &g, m, v| {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        });
}

/// CPA-LGC (any variant) or LightGCN, which is the same machinery on the
/// overall-only graph with both extras switched off.
#[derive(Debug, Clone)]
pub struct CpaLgc {
    pub graph: Arc<McExpansionGraph>,
    pub adj: Arc<NormalizedAdjacency>,
    pub state: EmbeddingState,
    pub forward: ForwardConfig,
    adam_e: AdamState,
    adam_p: Option<AdamState>,
}

impl CpaLgc {
    pub fn new(train: &InteractionSet, config: &TrainConfig) -> Result<Self> {
        let graph = build_graph(train, config.alpha)?;
        let adj = normalize(&graph);
        let fwd = config.forward_config();
        let state = EmbeddingState::init(graph.layout(), config.dim, fwd.preference, config.seed);
        Ok(Self::from_parts(Arc::new(graph), Arc::new(adj), state, fwd))
    }

    pub fn from_parts(
        graph: Arc<McExpansionGraph>,
        adj: Arc<NormalizedAdjacency>,
        state: EmbeddingState,
        forward: ForwardConfig,
    ) -> Self {
        let adam_e = AdamState::new(state.e0.dim());
        let adam_p = state.p0_user.as_ref().map(|p| AdamState::new(p.dim()));
        Self {
            graph,
            adj,
            state,
            forward,
            adam_e,
            adam_p,
        }
    }

    pub fn trace(&self) -> Result<ForwardTrace> {
        forward(&self.adj, &self.state, &self.forward)
    }

    pub fn step(&mut self, batch: &[BprTriple], lambda: f64, lr: f64) -> Result<f64> {
        let trace = self.trace()?;
        let (loss, grads) = backward(&self.adj, &self.state, &trace, batch, lambda)?;
        let hp = AdamParams::default();
        adam_step(&mut self.state.e0, &grads.e0, &mut self.adam_e, lr, hp);
        if let (Some(p), Some(g), Some(st)) = (&mut self.state.p0_user, &grads.p0_user, &mut self.adam_p) {
            adam_step(p, g, st, lr, hp);
        }
        Ok(loss)
    }

    pub fn final_repr(&self) -> Result<FinalRepr> {
        Ok(self.trace()?.final_repr())
    }
}

/// Trained parameters of any supported model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Params {
    CpaLgc { state: EmbeddingState },
    Lightgcn { state: EmbeddingState },
    LightgcnMc { segments: Vec<Option<EmbeddingState>> },
}

#[derive(Debug, Clone)]
pub enum Learner {
    Graph(CpaLgc),
    Concat(LightGcnMc),
}

impl Learner {
    /// Builds the model named by `config` over the training split.
    pub fn new(train: &InteractionSet, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        match config.kind {
            ModelKind::CpaLgc if config.variant.mc_only => Ok(Self::Graph(CpaLgc::new(&train.restrict_criteria(1)?, config)?)),
            ModelKind::CpaLgc => Ok(Self::Graph(CpaLgc::new(train, config)?)),
            ModelKind::Lightgcn => Ok(Self::Graph(CpaLgc::new(&train.restrict_criteria(1)?, config)?)),
            ModelKind::LightgcnMc => Ok(Self::Concat(LightGcnMc::new(train, config)?)),
        }
    }

    pub fn sampling_graph(&self) -> &McExpansionGraph {
        match self {
            Self::Graph(m) => &m.graph,
            Self::Concat(m) => m.overall_graph(),
        }
    }

    pub fn step(&mut self, batch: &[BprTriple], lambda: f64, lr: f64) -> Result<f64> {
        match self {
            Self::Graph(m) => m.step(batch, lambda, lr),
            Self::Concat(m) => m.step(batch, lambda, lr),
        }
    }

    pub fn final_repr(&self) -> Result<FinalRepr> {
        match self {
            Self::Graph(m) => m.final_repr(),
            Self::Concat(m) => m.final_repr(),
        }
    }

    pub fn params(&self, kind: ModelKind) -> Params {
        match (self, kind) {
            (Self::Graph(m), ModelKind::Lightgcn) => Params::Lightgcn { state: m.state.clone() },
            (Self::Graph(m), _) => Params::CpaLgc { state: m.state.clone() },
            (Self::Concat(m), _) => Params::LightgcnMc {
                segments: m.states(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean regularized loss per triple.
    pub loss: f64,
    pub val_ndcg10: Option<f64>,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub label: String,
    pub config: TrainConfig,
    pub params: Params,
    pub repr: FinalRepr,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_ndcg10,epoch_seconds\n");
        for e in &self.log {
            let ndcg = e.val_ndcg10.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, ndcg, e.epoch_seconds));
        }
        out
    }
}

/// Validation NDCG@10 with training items excluded, `None` when no user has
/// validation positives.
pub fn validation_ndcg(repr: &FinalRepr, train: &InteractionSet, valid: &InteractionSet) -> Result<Option<f64>> {
    if valid.overall().is_empty() {
        return Ok(None);
    }
    let metrics: RankingMetrics = rank_and_score(repr, &[train], valid, &[10])?;
    Ok(Some(metrics.ndcg(10)))
}

/// Runs one epoch of `ceil(|E| / batch_size)` mini-batches and returns the
/// mean loss per triple.
pub fn run_epoch(
    learner: &mut Learner,
    sampler: &NegativeSampler,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n_batches = sampler.n_edges().div_ceil(config.batch_size);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..n_batches {
        let batch = sampler.sample(config.batch_size, rng);
        if batch.is_empty() {
            continue;
        }
        total += learner.step(&batch, config.lambda, config.lr)?;
        count += batch.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Trains the configured model, keeping the parameters with the best
/// validation NDCG@10 and stopping once `patience` epochs pass without
/// improvement.
pub fn train(splits: &Splits, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut learner = Learner::new(&splits.train, config)?;
    let sampler = NegativeSampler::new(learner.sampling_graph(), config.negatives);
    let mut rng = rng::stream(config.seed, Stream::Sampling);

    let mut log = Vec::new();
    let mut best: Option<(f64, Learner, usize)> = None;
    let mut since_best = 0usize;
    let mut diverged = false;
    for epoch in 1..=config.max_epochs {
        let start = std::time::Instant::now();
        let loss = match run_epoch(&mut learner, &sampler, config, &mut rng) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                warn!("training diverged at epoch {epoch}; keeping last good parameters");
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let seconds = start.elapsed().as_secs_f64();
        let repr = learner.final_repr()?;
        let val = validation_ndcg(&repr, &splits.train, &splits.valid)?;
        info!(
            "{} epoch {epoch}: loss {loss:.5} val ndcg@10 {:?} ({seconds:.2}s)",
            config.label(),
            val
        );
        log.push(EpochLog {
            epoch,
            loss,
            val_ndcg10: val,
            epoch_seconds: seconds,
        });
        let score = val.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val.is_none() || score > *b,
        };
        if improved {
            best = Some((score, learner.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }
    let (_, best_learner, best_epoch) = match best {
        Some(b) => b,
        None => return Err(Error::NonFinite { stage: "training", layer: 0 }),
    };
    let repr = best_learner.final_repr()?;
    Ok(TrainOutcome {
        model: TrainedModel {
            label: config.label(),
            config: config.clone(),
            params: best_learner.params(config.kind),
            repr,
        },
        log,
        best_epoch,
        diverged,
    })
}
