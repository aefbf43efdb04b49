//! Dense, loop-based reference implementations used as test oracles.

#![allow(dead_code)]

use mcrec::dataset::{InteractionSet, Positive, Vocab};
use mcrec::training::BprTriple;
use ndarray::Array2;
use rand::Rng;
use std::collections::BTreeSet;

pub fn interaction_set(n_users: usize, n_items: usize, c_plus1: usize, triples: &[(usize, usize, usize)]) -> InteractionSet {
    let mut positives = vec![Vec::new(); c_plus1];
    for &(u, i, c) in triples {
        positives[c].push(Positive {
            user: u,
            item: i,
            value: 5.0,
            weight: None,
        });
    }
    InteractionSet {
        users: Vocab::from_ids((0..n_users).map(|u| format!("u{u}")).collect()),
        items: Vocab::from_ids((0..n_items).map(|i| format!("i{i}")).collect()),
        positives,
    }
}

/// Random interactions with at least one overall positive.
pub fn random_set(rng: &mut impl Rng, n_users: usize, n_items: usize, c_plus1: usize, p: f64) -> InteractionSet {
    let mut triples = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            for c in 0..c_plus1 {
                if rng.gen_bool(p) {
                    triples.push((u, i, c));
                }
            }
        }
    }
    if !triples.iter().any(|t| t.2 == 0) {
        triples.push((rng.gen_range(0..n_users), rng.gen_range(0..n_items), 0));
    }
    interaction_set(n_users, n_items, c_plus1, &triples)
}

/// `w / sqrt(deg_u deg_v)` written out entry by entry.
pub fn dense_adjacency(set: &InteractionSet, alpha: f64) -> Array2<f64> {
    let (nu, ni, c1) = (set.n_users(), set.n_items(), set.n_criteria_plus1());
    let n = nu + ni * c1;
    let mut w = Array2::<f64>::zeros((n, n));
    for (c, list) in set.positives.iter().enumerate() {
        for p in list {
            let node = nu + c * ni + p.item;
            let weight = if c == 0 { alpha } else { 1.0 };
            w[[p.user, node]] = weight;
            w[[node, p.user]] = weight;
        }
    }
    let deg: Vec<f64> = (0..n).map(|v| w.row(v).sum()).collect();
    let mut a = Array2::zeros((n, n));
    for v in 0..n {
        for x in 0..n {
            if w[[v, x]] != 0.0 {
                a[[v, x]] = w[[v, x]] / (deg[v].sqrt() * deg[x].sqrt());
            }
        }
    }
    a
}

pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            let aik = a[[i, k]];
            if aik == 0.0 {
                continue;
            }
            for j in 0..b.ncols() {
                out[[i, j]] += aik * b[[k, j]];
            }
        }
    }
    out
}

/// `(A^0 + A^1 + ... + A^L) X / (L + 1)` via explicit matrix powers.
pub fn power_average(a: &Array2<f64>, x: &Array2<f64>, layers: usize) -> Array2<f64> {
    let n = a.nrows();
    let mut power = Array2::<f64>::eye(n);
    let mut sum = Array2::<f64>::zeros((n, n));
    for _ in 0..=layers {
        sum += &power;
        power = matmul(&power, a);
    }
    matmul(&sum, x) / (layers + 1) as f64
}

pub fn pairnorm(x: &Array2<f64>, s: f64) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[[i, j]] / n as f64;
        }
    }
    let mut sq = 0.0;
    for i in 0..n {
        for j in 0..d {
            sq += (x[[i, j]] - mean[j]).powi(2);
        }
    }
    let scale = s / (sq / n as f64).sqrt();
    Array2::from_shape_fn((n, d), |(i, j)| (x[[i, j]] - mean[j]) * scale)
}

#[derive(Clone, Copy)]
pub struct OracleConfig {
    pub layers: usize,
    pub pairnorm: bool,
    pub scale: f64,
    pub lambda: f64,
}

/// One convolution stack. When `frozen` is given, rows from `n_users` on are
/// replaced by the recorded values after every operation; the recorded
/// values of each stage are appended to `record`.
fn stack(
    a: &Array2<f64>,
    x0: &Array2<f64>,
    cfg: OracleConfig,
    n_users: usize,
    frozen: Option<&[Array2<f64>]>,
    record: &mut Vec<Array2<f64>>,
) -> Array2<f64> {
    let mut stage = 0usize;
    let mut fix = |mut t: Array2<f64>, record: &mut Vec<Array2<f64>>| {
        if let Some(f) = frozen {
            for r in n_users..t.nrows() {
                t.row_mut(r).assign(&f[stage].row(r));
            }
        }
        record.push(t.clone());
        stage += 1;
        t
    };
    let norm = |t: &Array2<f64>| if cfg.pairnorm { pairnorm(t, cfg.scale) } else { t.clone() };
    let mut layers = Vec::new();
    let mut cur = fix(norm(x0), record);
    layers.push(cur.clone());
    for _ in 0..cfg.layers {
        let x = fix(matmul(a, &cur), record);
        cur = fix(norm(&x), record);
        layers.push(cur.clone());
    }
    let mut mean = Array2::zeros(x0.raw_dim());
    for l in &layers {
        mean += l;
    }
    mean /= layers.len() as f64;
    let mean = fix(mean, record);
    fix(norm(&mean), record)
}

/// Dense model: `E* (+ P*)` with the preference stack's criterion-item rows
/// held at `frozen` (recorded from an unperturbed run).
pub fn final_table(
    a: &Array2<f64>,
    e0: &Array2<f64>,
    p0: Option<&Array2<f64>>,
    cfg: OracleConfig,
    n_users: usize,
    frozen: Option<&[Array2<f64>]>,
    record: &mut Vec<Array2<f64>>,
) -> Array2<f64> {
    let mut ignore = Vec::new();
    let e = stack(a, e0, cfg, n_users, None, &mut ignore);
    match p0 {
        Some(p0) => e + &stack(a, p0, cfg, n_users, frozen, record),
        None => e,
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn bpr(z: &Array2<f64>, batch: &[BprTriple]) -> f64 {
    let dot = |a: usize, b: usize| (0..z.ncols()).map(|j| z[[a, j]] * z[[b, j]]).sum::<f64>();
    batch.iter().map(|t| softplus(-(dot(t.user, t.pos) - dot(t.user, t.neg)))).sum()
}

pub fn reg(table: &Array2<f64>, rows: &BTreeSet<usize>) -> f64 {
    rows.iter().map(|&r| table.row(r).iter().map(|v| v * v).sum::<f64>()).sum()
}

fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for j in k..items.len() {
        items.swap(k, j);
        permutations(items, k + 1, out);
        items.swap(k, j);
    }
}

/// Brute-force metrics: enumerate every permutation of the candidates and keep
/// the one in which each item outranks its successor (higher score, or equal
/// score and lower index).
pub fn brute_metrics(scores: &[f64], train: &BTreeSet<usize>, test: &BTreeSet<usize>, k: usize) -> (f64, f64, f64) {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|i| !train.contains(i)).collect();
    let mut all = Vec::new();
    permutations(&mut cand, 0, &mut all);
    let before = |x: usize, y: usize| scores[x] > scores[y] || (scores[x] == scores[y] && x < y);
    let valid: Vec<&Vec<usize>> = all.iter().filter(|p| p.windows(2).all(|w| before(w[0], w[1]))).collect();
    assert_eq!(valid.len(), 1, "exactly one ordering satisfies the ranking rule");
    let order = valid[0];
    let mut hits = 0.0;
    let mut dcg = 0.0;
    for (pos, item) in order.iter().take(k).enumerate() {
        if test.contains(item) {
            hits += 1.0;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for pos in 0..k.min(test.len()) {
        idcg += 1.0 / ((pos + 2) as f64).log2();
    }
    (hits / k as f64, hits / test.len() as f64, if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

pub struct GradientReport {
    pub max_rel_error: f64,
    pub loss_gap: f64,
    pub checked: usize,
    pub trainable_rows: usize,
    pub prototype_grad_zero: bool,
}

/// Compares the analytic batch gradient with central differences of the
/// dense oracle loss on a small random instance.
pub fn gradient_check(variant: mcrec::training::Variant, pairnorm_on: bool, seed: u64) -> GradientReport {
    use mcrec::graph::{build_graph, normalize};
    use mcrec::model::{forward, EmbeddingState};
    use mcrec::training::{backward, batch_rows, TrainConfig};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (nu, ni) = (3, 2);
    let c1 = if variant.mc_only { 1 } else { 3 };
    let set = random_set(&mut rng, nu, ni, c1, 0.5);
    let config = TrainConfig {
        variant,
        pairnorm: pairnorm_on,
        layers: 2,
        dim: 3,
        lambda: 0.01,
        alpha: 1.5,
        ..TrainConfig::default()
    };
    let fwd = config.forward_config();
    let graph = build_graph(&set, config.alpha).unwrap();
    let adj = normalize(&graph);
    let state = EmbeddingState::init(graph.layout(), config.dim, fwd.preference, seed);
    let n = graph.node_count();
    let batch: Vec<BprTriple> = (0..4)
        .map(|_| BprTriple {
            user: rng.gen_range(0..nu),
            pos: rng.gen_range(nu..n),
            neg: rng.gen_range(nu..n),
        })
        .collect();
    let trace = forward(&adj, &state, &fwd).unwrap();
    let (loss, grads) = backward(&adj, &state, &trace, &batch, config.lambda).unwrap();

    let a = dense_adjacency(&set, config.alpha);
    let ocfg = OracleConfig {
        layers: config.layers,
        pairnorm: fwd.pairnorm,
        scale: fwd.scale,
        lambda: config.lambda,
    };
    let (nodes, users) = batch_rows(&batch);
    let p_full = |p_user: &Array2<f64>| {
        let mut p = state.initial_p().unwrap();
        p.slice_mut(ndarray::s![..nu, ..]).assign(p_user);
        p
    };
    let mut frozen = Vec::new();
    if let Some(pu) = &state.p0_user {
        final_table(&a, &state.e0, Some(&p_full(pu)), ocfg, nu, None, &mut frozen);
    }
    let oracle = |e0: &Array2<f64>, pu: Option<&Array2<f64>>| -> f64 {
        let p0 = pu.map(|p| p_full(p));
        let z = final_table(&a, e0, p0.as_ref(), ocfg, nu, Some(&frozen), &mut Vec::new());
        let r = reg(e0, &nodes) + pu.map(|p| reg(p, &users)).unwrap_or(0.0);
        bpr(&z, &batch) + ocfg.lambda * r
    };
    let base = oracle(&state.e0, state.p0_user.as_ref());
    let h = 1e-6;
    let rel = |an: f64, num: f64| (an - num).abs() / an.abs().max(num.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for idx in 0..state.e0.len() {
        let (r, c) = (idx / config.dim, idx % config.dim);
        let mut plus = state.e0.clone();
        plus[[r, c]] += h;
        let mut minus = state.e0.clone();
        minus[[r, c]] -= h;
        let num = (oracle(&plus, state.p0_user.as_ref()) - oracle(&minus, state.p0_user.as_ref())) / (2.0 * h);
        worst = worst.max(rel(grads.e0[[r, c]], num));
        checked += 1;
    }
    if let (Some(pu), Some(g)) = (&state.p0_user, &grads.p0_user) {
        for idx in 0..pu.len() {
            let (r, c) = (idx / config.dim, idx % config.dim);
            let mut plus = pu.clone();
            plus[[r, c]] += h;
            let mut minus = pu.clone();
            minus[[r, c]] -= h;
            let num = (oracle(&state.e0, Some(&plus)) - oracle(&state.e0, Some(&minus))) / (2.0 * h);
            worst = worst.max(rel(g[[r, c]], num));
            checked += 1;
        }
    }
    GradientReport {
        max_rel_error: worst,
        loss_gap: (loss - base).abs(),
        checked,
        trainable_rows: n + state.p0_user.as_ref().map_or(0, |p| p.nrows()),
        prototype_grad_zero: grads.p0_proto.as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0)),
    }
}
