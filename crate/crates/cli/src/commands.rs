use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Context, Result};
use log::info;
use serde_json::json;

use mcrec::checkpoint::Checkpoint;
use mcrec::dataset::{self, CriterionSpec, InteractionSet, SplitRatios, Splits};
use mcrec::evaluation::{self, SweepParam};
use mcrec::graph::{build_graph, normalize};
use mcrec::model::forward;
use mcrec::synthetic::{self, SyntheticConfig};
use mcrec::training::{self, ModelKind, Params, TrainConfig};

use crate::manifest::Recorder;
use crate::{
    BenchArgs, Cli, Command, DiagnoseArgs, EvalArgs, IngestArgs, ModelArgs, RecommendArgs, SpecArgs, SplitArgs, Switch,
    SweepArgs, SynthArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        ensure!(n > 0, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Recommend(a) => recommend(a),
        Command::Bench(a) => bench(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn resolve_specs(args: &SpecArgs, fallback: Option<&Path>) -> Result<Vec<CriterionSpec>> {
    if let Some(path) = &args.specs {
        return dataset::load_specs(path).with_context(|| format!("loading specs {}", path.display()));
    }
    if let Some(path) = fallback.filter(|p| p.exists()) {
        return Ok(dataset::load_specs(path)?);
    }
    let (lo, hi) = (args.scale[0], args.scale[1]);
    let specs: Vec<_> = (0..=args.criteria)
        .map(|c| {
            let name = if c == 0 { "overall".to_string() } else { format!("criterion_{c}") };
            CriterionSpec::new(c, name, lo, hi)
        })
        .collect();
    dataset::validate_specs(&specs)?;
    Ok(specs)
}

fn ingest(args: IngestArgs) -> Result<()> {
    let mut rec = Recorder::start("ingest");
    let specs = resolve_specs(&args.specs, None)?;
    rec.input(&args.input)?;
    let log = dataset::ingest(&args.input, &specs).with_context(|| format!("ingesting {}", args.input.display()))?;
    let stats = dataset::log_stats(&log)?;
    info!("{} records, {} users, {} items", log.len(), stats.n_users, stats.n_items);
    out_dir(&args.out)?;
    log.write_tsv(args.out.join("ratings.tsv"))?;
    rec.output("ratings.tsv");
    rec.write(&args.out, "specs.json", serde_json::to_string_pretty(&specs)?)?;
    rec.write(&args.out, "stats.json", serde_json::to_string_pretty(&stats)?)?;
    rec.config(&specs)?;
    rec.finish(&args.out)
}

fn split(args: SplitArgs) -> Result<()> {
    let mut rec = Recorder::start("split");
    let (ratings, fallback) = if args.input.is_dir() {
        (args.input.join("ratings.tsv"), Some(args.input.join("specs.json")))
    } else {
        (args.input.clone(), None)
    };
    let specs = resolve_specs(&args.specs, fallback.as_deref())?;
    rec.input(&ratings)?;
    let log = dataset::ingest(&ratings, &specs).with_context(|| format!("ingesting {}", ratings.display()))?;
    let iset = dataset::filter_min_interactions(&dataset::binarize(&log, &specs), args.min_interactions)?;
    let ratios = SplitRatios {
        train: 1.0 - args.valid - args.test,
        valid: args.valid,
        test: args.test,
    };
    let splits = dataset::split(&iset, ratios, args.seed)?;
    out_dir(&args.out)?;
    splits.write_dir(&args.out)?;
    for name in ["train.tsv", "valid.tsv", "test.tsv"] {
        rec.output(name);
    }
    rec.write(&args.out, "specs.json", serde_json::to_string_pretty(&specs)?)?;
    rec.write(&args.out, "stats.json", serde_json::to_string_pretty(&dataset::stats(&iset)?)?)?;
    rec.seed("split", args.seed);
    rec.config(json!({
        "ratios": ratios,
        "min_interactions": args.min_interactions,
        "specs": specs,
    }))?;
    rec.finish(&args.out)
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut rec = Recorder::start("synth");
    let mut config = match (&args.config, args.hotel) {
        (Some(path), _) => {
            rec.input(path)?;
            serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, true) => SyntheticConfig::hotel_shaped(0),
        (None, false) => SyntheticConfig::default(),
    };
    if let Some(v) = args.users {
        config.n_users = v;
    }
    if let Some(v) = args.items {
        config.n_items = v;
    }
    if let Some(v) = args.criteria {
        config.n_criteria = v;
    }
    if let Some(v) = args.density {
        config.density = v;
    }
    if let Some(v) = args.noise {
        config.noise = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    let log = synthetic::generate(&config)?;
    let specs: Vec<_> = (0..=config.n_criteria)
        .map(|c| CriterionSpec::new(c, if c == 0 { "overall".into() } else { format!("criterion_{c}") }, 1.0, 5.0))
        .collect();
    out_dir(&args.out)?;
    log.write_tsv(args.out.join("ratings.tsv"))?;
    rec.output("ratings.tsv");
    rec.write(&args.out, "specs.json", serde_json::to_string_pretty(&specs)?)?;
    rec.write(&args.out, "stats.json", serde_json::to_string_pretty(&dataset::log_stats(&log)?)?)?;
    rec.seed("synthetic", config.seed);
    rec.config(&config)?;
    rec.finish(&args.out)
}

/// Defaults, overridden by the config file, overridden by flags.
fn train_config(args: &ModelArgs) -> Result<TrainConfig> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(m) = &args.model {
        config.kind = m.parse::<ModelKind>()?;
    }
    if let Some(v) = &args.variant {
        config.variant = v.parse()?;
    }
    if let Some(p) = args.pairnorm {
        config.pairnorm = matches!(p, Switch::On);
    }
    macro_rules! set {
        ($($field:ident => $target:ident),*) => {
            $(if let Some(v) = args.$field { config.$target = v; })*
        };
    }
    set!(alpha => alpha, layers => layers, dim => dim, lr => lr, lambda => lambda,
        batch_size => batch_size, epochs => max_epochs, patience => patience, seed => seed);
    config.validate()?;
    Ok(config)
}

fn load_splits(dir: &Path) -> Result<Splits> {
    let specs = dataset::load_specs(dir.join("specs.json"))
        .with_context(|| format!("{} is not a split directory (specs.json missing)", dir.display()))?;
    Splits::read_dir(dir, &specs).with_context(|| format!("reading splits from {}", dir.display()))
}

fn metrics_json(label: &str, metrics: &evaluation::RankingMetrics) -> Result<String> {
    Ok(serde_json::to_string_pretty(&json!({
        "model": label,
        "n_users": metrics.n_users,
        "metrics": metrics.to_json(),
    }))?)
}

fn train(args: TrainArgs) -> Result<()> {
    let mut rec = Recorder::start("train");
    let config = train_config(&args.model)?;
    ensure!(args.repeats > 0, "--repeats must be at least 1");
    let splits = load_splits(&args.data)?;
    rec.input(&args.data)?;
    out_dir(&args.out)?;

    let label = config.label();
    let mut runs = Vec::with_capacity(args.repeats);
    for r in 0..args.repeats {
        let cfg = TrainConfig {
            seed: config.seed + r as u64,
            ..config.clone()
        };
        rec.seed(&format!("run{r}"), cfg.seed);
        let outcome = training::train(&splits, &cfg)?;
        info!("{label} seed {}: best epoch {}", cfg.seed, outcome.best_epoch);
        let metrics = evaluation::evaluate(&outcome.model.repr, &splits, &args.k, cfg.exclude_valid)?;
        if r == 0 {
            Checkpoint::new(&outcome.model, &splits.train.users, &splits.train.items)?
                .save(args.out.join("checkpoint.json"))?;
            rec.output("checkpoint.json");
            rec.write(&args.out, "train_log.csv", outcome.log_csv())?;
        }
        runs.push((cfg.seed, metrics));
    }

    let mut mean = runs[0].1.clone();
    for map in [&mut mean.precision, &mut mean.recall, &mut mean.ndcg] {
        map.values_mut().for_each(|v| *v = 0.0);
    }
    let n = runs.len() as f64;
    for (_, m) in &runs {
        for (dst, src) in [(&mut mean.precision, &m.precision), (&mut mean.recall, &m.recall), (&mut mean.ndcg, &m.ndcg)] {
            for (k, v) in src {
                *dst.get_mut(k).expect("same cutoffs") += v / n;
            }
        }
    }
    if args.repeats > 1 {
        let mut csv = String::from("seed,k,precision,recall,ndcg\n");
        for (seed, m) in &runs {
            for &k in &m.k_values {
                csv.push_str(&format!("{seed},{k},{},{},{}\n", m.precision(k), m.recall(k), m.ndcg(k)));
            }
        }
        rec.write(&args.out, "repeats.csv", csv)?;
    }
    rec.write(&args.out, "metrics.json", metrics_json(&label, &mean)?)?;
    rec.write(&args.out, "metrics.csv", mean.to_csv(&label))?;
    for &k in &mean.k_values {
        println!("{label}\tNDCG@{k}\t{:.4}", mean.ndcg(k));
    }
    rec.config(&config)?;
    rec.finish(&args.out)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Checks that the checkpoint was trained on the vocabulary of `splits`.
fn check_vocab(ckpt: &Checkpoint, splits: &Splits) -> Result<()> {
    ensure!(
        ckpt.user_ids == splits.train.users.ids() && ckpt.item_ids == splits.train.items.ids(),
        "checkpoint users/items do not match the split directory"
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut rec = Recorder::start("eval");
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let splits = load_splits(&args.data)?;
    check_vocab(&ckpt, &splits)?;
    rec.input(&args.checkpoint)?;
    rec.input(&args.data)?;
    let metrics = evaluation::evaluate(&ckpt.repr, &splits, &args.k, ckpt.config.exclude_valid)?;
    out_dir(&args.out)?;
    rec.write(&args.out, "metrics.json", metrics_json(&ckpt.label, &metrics)?)?;
    rec.write(&args.out, "metrics.csv", metrics.to_csv(&ckpt.label))?;
    for &k in &metrics.k_values {
        println!("{}\tNDCG@{k}\t{:.4}", ckpt.label, metrics.ndcg(k));
    }
    rec.config(json!({ "k": args.k, "label": ckpt.label }))?;
    rec.finish(&args.out)
}

/// Known ids closest to `query` by edit distance, ties in id order.
pub fn nearest_ids<'a>(query: &str, ids: &'a [String], n: usize) -> Vec<&'a str> {
    let mut scored: Vec<(usize, &str)> = ids.iter().map(|id| (strsim::levenshtein(query, id), id.as_str())).collect();
    scored.sort();
    scored.into_iter().take(n).map(|(_, id)| id).collect()
}

fn recommend(args: RecommendArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let users = ckpt.users();
    let Some(user) = users.get(&args.user) else {
        bail!(
            "unknown user {:?}; nearest known ids: {}",
            args.user,
            nearest_ids(&args.user, &ckpt.user_ids, 5).join(", ")
        );
    };
    let mut excluded = HashSet::new();
    if let Some(dir) = &args.data {
        let splits = load_splits(dir)?;
        check_vocab(&ckpt, &splits)?;
        let mut sources: Vec<&InteractionSet> = vec![&splits.train];
        if ckpt.config.exclude_valid {
            sources.push(&splits.valid);
        }
        for set in sources {
            excluded.extend(set.overall().iter().filter(|p| p.user == user).map(|p| p.item));
        }
    }
    for (rank, (item, score)) in evaluation::recommend(&ckpt.repr, user, &excluded, args.k).into_iter().enumerate() {
        println!("{}\t{}\t{score:.6}", rank + 1, ckpt.item_ids[item]);
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let mut rec = Recorder::start("bench");
    let config = train_config(&args.model)?;
    let rows = evaluation::bench_linear_scaling(&args.sizes, &config, args.criteria, args.repeats)?;
    let x: Vec<f64> = rows.iter().map(|r| r.edges as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.seconds_per_epoch).collect();
    let (intercept, slope, r2) = evaluation::linear_fit(&x, &y);
    out_dir(&args.out)?;
    let mut csv = String::from("edges,seconds_per_epoch\n");
    for r in &rows {
        csv.push_str(&format!("{},{}\n", r.edges, r.seconds_per_epoch));
        println!("{}\t{:.4}s", r.edges, r.seconds_per_epoch);
    }
    rec.write(&args.out, "bench.csv", csv)?;
    rec.write(
        &args.out,
        "fit.json",
        serde_json::to_string_pretty(&json!({ "intercept": intercept, "slope": slope, "r2": r2 }))?,
    )?;
    println!("fit: seconds = {intercept:.4e} + {slope:.4e} * edges (R^2 {r2:.4})");
    rec.seed("init", config.seed);
    rec.config(json!({ "train": config, "sizes": args.sizes, "criteria": args.criteria, "repeats": args.repeats }))?;
    rec.finish(&args.out)
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let mut rec = Recorder::start("diagnose");
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let splits = load_splits(&args.data)?;
    check_vocab(&ckpt, &splits)?;
    rec.input(&args.checkpoint)?;
    rec.input(&args.data)?;
    let cfg = &ckpt.config;
    let (state, train) = match &ckpt.params {
        Params::CpaLgc { state } if !cfg.variant.mc_only => (state, splits.train.clone()),
        Params::CpaLgc { state } | Params::Lightgcn { state } => (state, splits.train.restrict_criteria(1)?),
        Params::LightgcnMc { .. } => bail!("diagnose needs a single-graph model, not {}", ckpt.label),
    };
    let graph = build_graph(&train, cfg.alpha)?;
    let adj = Arc::new(normalize(&graph));
    let trace = forward(&adj, state, &cfg.forward_config())?;
    let report = evaluation::smoothness_report(&trace, None, args.bins, args.seed);
    out_dir(&args.out)?;
    rec.write(&args.out, "smoothness.csv", report.to_csv())?;
    rec.write(&args.out, "smoothness_hist.csv", report.histogram_csv())?;
    for (layer, d) in report.mean_distance.iter().enumerate() {
        println!("{}\tlayer {layer}\t{d:.6}", ckpt.label);
    }
    rec.seed("diagnostics", args.seed);
    rec.config(json!({ "bins": args.bins, "label": ckpt.label }))?;
    rec.finish(&args.out)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut rec = Recorder::start("sweep");
    let config = train_config(&args.model)?;
    let param: SweepParam = args.param.parse().map_err(|e| anyhow!("{e}"))?;
    let splits = load_splits(&args.data)?;
    rec.input(&args.data)?;
    let rows = evaluation::sweep(&config, param, &args.values, &splits)?;
    out_dir(&args.out)?;
    let mut csv = format!("model,{},ndcg10\n", args.param);
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", config.label(), r.value, r.ndcg10));
        println!("{}={}\tNDCG@10\t{:.4}", args.param, r.value, r.ndcg10);
    }
    rec.write(&args.out, "sweep.csv", csv)?;
    rec.seed("init", config.seed);
    rec.config(json!({ "train": config, "param": param, "values": args.values }))?;
    rec.finish(&args.out)
}
