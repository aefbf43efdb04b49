//! Top-K ranking metrics, smoothness diagnostics, hyperparameter sweeps and
//! the epoch-time scaling benchmark.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionSet, Positive, Splits, Vocab};
use crate::error::{Error, Result};
use crate::model::{FinalRepr, ForwardTrace};
use crate::rng::{self, Stream};
use crate::training::{train, CpaLgc, NegativeSampler, TrainConfig};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const DEFAULT_K: [usize; 2] = [5, 10];

/// Mean-over-users ranking metrics keyed by cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub k_values: Vec<usize>,
    pub precision: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users: usize,
}

impl RankingMetrics {
    pub fn precision(&self, k: usize) -> f64 {
        self.precision[&k]
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.recall[&k]
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.ndcg[&k]
    }

    /// `{metric: {K: value}}`.
    pub fn to_json(&self) -> serde_json::Value {
        let table = |m: &BTreeMap<usize, f64>| {
            serde_json::Value::Object(m.iter().map(|(k, v)| (k.to_string(), serde_json::json!(v))).collect())
        };
        serde_json::json!({
            "precision": table(&self.precision),
            "recall": table(&self.recall),
            "ndcg": table(&self.ndcg),
        })
    }

    pub fn to_csv(&self, label: &str) -> String {
        let mut out = String::from("model,k,precision,recall,ndcg\n");
        for &k in &self.k_values {
            out.push_str(&format!(
                "{label},{k},{},{},{}\n",
                self.precision(k),
                self.recall(k),
                self.ndcg(k)
            ));
        }
        out
    }
}

/// Score-descending order with ties broken by ascending item index.
fn rank_cmp(scores: ArrayView1<f64>, a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The best `k` items for one user among those not in `excluded`.
pub fn top_k(scores: ArrayView1<f64>, excluded: &HashSet<usize>, k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|i| !excluded.contains(i)).collect();
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(scores, a, b));
        cand.truncate(k);
    }
    cand.sort_by(|&a, &b| rank_cmp(scores, a, b));
    cand
}

/// Top-K items for `user` with their scores.
pub fn recommend(repr: &FinalRepr, user: usize, excluded: &HashSet<usize>, k: usize) -> Vec<(usize, f64)> {
    let scores = repr.scores(user);
    top_k(scores.view(), excluded, k)
        .into_iter()
        .map(|i| (i, scores[i]))
        .collect()
}

/// Precision, recall and NDCG at `k` for one ranked list.
pub fn user_metrics(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> (f64, f64, f64) {
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += 1.0 / (pos as f64 + 2.0).log2();
        }
    }
    let idcg: f64 = (0..k.min(relevant.len())).map(|p| 1.0 / (p as f64 + 2.0).log2()).sum();
    let ndcg = if idcg > 0.0 { dcg / idcg } else { 0.0 };
    (hits as f64 / k as f64, hits as f64 / relevant.len() as f64, ndcg)
}

/// Ranks every non-excluded item per user and averages the metrics over
/// users that have at least one overall positive in `test`. Criterion-0
/// items of every set in `exclude` are removed from the candidates.
pub fn rank_and_score(
    repr: &FinalRepr,
    exclude: &[&InteractionSet],
    test: &InteractionSet,
    ks: &[usize],
) -> Result<RankingMetrics> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cutoffs must be non-empty and positive".into()));
    }
    let n_users = test.n_users();
    if repr.n_users() < n_users || repr.n_items() < test.n_items() {
        return Err(Error::Dimension(format!(
            "model covers {} users / {} items, test set needs {} / {}",
            repr.n_users(),
            repr.n_items(),
            n_users,
            test.n_items()
        )));
    }
    let relevant = test.item_sets_by_user(0);
    let mut excluded: Vec<HashSet<usize>> = vec![HashSet::new(); n_users];
    for set in exclude {
        for p in set.overall() {
            if p.user < n_users {
                excluded[p.user].insert(p.item);
            }
        }
    }
    let users: Vec<usize> = (0..n_users).filter(|&u| !relevant[u].is_empty()).collect();
    if users.is_empty() {
        return Err(Error::Empty("no user has test items".into()));
    }
    let k_max = *ks.iter().max().expect("non-empty");
    let per_user = |&u: &usize| -> Vec<(f64, f64, f64)> {
        let scores = repr.scores(u);
        let ranked = top_k(scores.view(), &excluded[u], k_max);
        ks.iter().map(|&k| user_metrics(&ranked, &relevant[u], k)).collect()
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<(f64, f64, f64)>> = users.par_iter().map(per_user).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<(f64, f64, f64)>> = users.iter().map(per_user).collect();

    let n = rows.len() as f64;
    let mut metrics = RankingMetrics {
        k_values: ks.to_vec(),
        precision: BTreeMap::new(),
        recall: BTreeMap::new(),
        ndcg: BTreeMap::new(),
        n_users: rows.len(),
    };
    for (j, &k) in ks.iter().enumerate() {
        let (mut p, mut r, mut g) = (0.0, 0.0, 0.0);
        for row in &rows {
            p += row[j].0;
            r += row[j].1;
            g += row[j].2;
        }
        metrics.precision.insert(k, p / n);
        metrics.recall.insert(k, r / n);
        metrics.ndcg.insert(k, g / n);
    }
    Ok(metrics)
}

/// Evaluates on the test split, excluding train items and optionally
/// validation items from the candidates.
pub fn evaluate(repr: &FinalRepr, splits: &Splits, ks: &[usize], exclude_valid: bool) -> Result<RankingMetrics> {
    if exclude_valid {
        rank_and_score(repr, &[&splits.train, &splits.valid], &splits.test, ks)
    } else {
        rank_and_score(repr, &[&splits.train], &splits.test, ks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Mean pairwise Euclidean distance per layer of the E stack, with one
/// histogram per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub mean_distance: Vec<f64>,
    pub histograms: Vec<Histogram>,
}

impl SmoothnessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mean_distance\n");
        for (l, d) in self.mean_distance.iter().enumerate() {
            out.push_str(&format!("{l},{d}\n"));
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("layer,bin_start,bin_end,count\n");
        for (l, h) in self.histograms.iter().enumerate() {
            for (b, c) in h.counts.iter().enumerate() {
                out.push_str(&format!("{l},{},{},{c}\n", h.edges[b], h.edges[b + 1]));
            }
        }
        out
    }
}

pub const MAX_DISTANCE_NODES: usize = 2000;

/// Distances between all pairs of rows in `nodes`.
pub fn pairwise_distances(table: &Array2<f64>, nodes: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(nodes.len() * nodes.len().saturating_sub(1) / 2);
    for (a, &v) in nodes.iter().enumerate() {
        let x = table.row(v);
        for &w in &nodes[a + 1..] {
            let y = table.row(w);
            let sq: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            out.push(sq.sqrt());
        }
    }
    out
}

fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let hi = values.iter().copied().fold(0.0, f64::max);
    let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|b| b as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        counts[((v / width) as usize).min(bins - 1)] += 1;
    }
    Histogram { edges, counts }
}

/// Per-layer smoothness of the post-normalization E-stack tables. With
/// `sample` unset, graphs above [`MAX_DISTANCE_NODES`] nodes are subsampled
/// with the diagnostics stream of `seed`.
pub fn smoothness_report(trace: &ForwardTrace, sample_nodes: Option<&[usize]>, bins: usize, seed: u64) -> SmoothnessReport {
    let n = trace.layout.node_count();
    let nodes: Vec<usize> = match sample_nodes {
        Some(s) => s.to_vec(),
        None if n > MAX_DISTANCE_NODES => {
            let mut rng = rng::stream(seed, Stream::Diagnostics);
            let mut v = sample(&mut rng, n, MAX_DISTANCE_NODES).into_vec();
            v.sort_unstable();
            v
        }
        None => (0..n).collect(),
    };
    let mut mean_distance = Vec::with_capacity(trace.e.post.len());
    let mut histograms = Vec::with_capacity(trace.e.post.len());
    for table in &trace.e.post {
        let d = pairwise_distances(table, &nodes);
        let mean = if d.is_empty() { 0.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
        mean_distance.push(mean);
        histograms.push(histogram(&d, bins));
    }
    SmoothnessReport {
        mean_distance,
        histograms,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Layers,
    Dim,
    Alpha,
    NCriteria,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" | "L" => Ok(Self::Layers),
            "dim" | "d" => Ok(Self::Dim),
            "alpha" => Ok(Self::Alpha),
            "n_criteria" | "criteria" => Ok(Self::NCriteria),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub ndcg10: f64,
}

/// Trains and evaluates one model for a single sweep value.
pub fn sweep_point(template: &TrainConfig, param: SweepParam, value: f64, splits: &Splits) -> Result<f64> {
    let mut config = template.clone();
    let as_count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Config(format!("{param:?} needs a positive integer, got {v}")))
        }
    };
    let data = match param {
        SweepParam::Layers => {
            config.layers = as_count(value)?;
            splits.clone()
        }
        SweepParam::Dim => {
            config.dim = as_count(value)?;
            splits.clone()
        }
        SweepParam::Alpha => {
            config.alpha = value;
            splits.clone()
        }
        SweepParam::NCriteria => splits.restrict_criteria(as_count(value)?)?,
    };
    let outcome = train(&data, &config)?;
    Ok(evaluate(&outcome.model.repr, &data, &[10], config.exclude_valid)?.ndcg(10))
}

pub fn sweep(template: &TrainConfig, param: SweepParam, values: &[f64], splits: &Splits) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&value| {
            Ok(SweepRow {
                value,
                ndcg10: sweep_point(template, param, value, splits)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub edges: usize,
    pub seconds_per_epoch: f64,
}

/// Random interaction set with exactly `n_edges` distinct positives spread
/// over the overall criterion and `n_criteria` side criteria.
pub fn random_interactions(n_edges: usize, n_criteria: usize, seed: u64) -> InteractionSet {
    use rand::Rng;
    let c_plus1 = n_criteria + 1;
    let n_users = (n_edges / 20).max(2);
    let n_items = (n_edges / (10 * c_plus1)).max(40);
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let mut seen = HashSet::with_capacity(n_edges);
    let mut positives = vec![Vec::new(); c_plus1];
    while seen.len() < n_edges {
        let (u, i, c) = (rng.gen_range(0..n_users), rng.gen_range(0..n_items), rng.gen_range(0..c_plus1));
        if seen.insert((u, i, c)) {
            positives[c].push(Positive {
                user: u,
                item: i,
                value: 5.0,
                weight: None,
            });
        }
    }
    InteractionSet {
        users: Vocab::from_ids((0..n_users).map(|u| format!("u{u}")).collect()),
        items: Vocab::from_ids((0..n_items).map(|i| format!("i{i}")).collect()),
        positives,
    }
}

/// Seconds per full-batch epoch (one sampled triple per edge, one forward,
/// one backward, one Adam step) at each graph size, median of `repeats`.
pub fn bench_linear_scaling(sizes: &[usize], config: &TrainConfig, n_criteria: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("benchmark sizes must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n_edges in sizes {
        let data = random_interactions(n_edges, n_criteria, config.seed);
        let mut model = CpaLgc::new(&data, config)?;
        let sampler = NegativeSampler::new(&model.graph, config.negatives);
        let mut rng = rng::stream(config.seed, Stream::Sampling);
        let mut times = Vec::with_capacity(repeats.max(1));
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let batch = sampler.sample(n_edges, &mut rng);
            model.step(&batch, config.lambda, config.lr)?;
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            edges: n_edges,
            seconds_per_epoch: times[times.len() / 2],
        });
    }
    Ok(rows)
}

/// Least-squares fit `y = a + b x`, returning `(a, b, r_squared)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (intercept, slope, r2)
}
