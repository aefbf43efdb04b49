//! Multi-criteria rating logs: ingestion, binarization into per-criterion
//! positives, k-core style filtering, per-user splitting and statistics.
//!
//! Criterion 0 is always the overall rating. Everything downstream works on
//! dense user/item indices held by [`Vocab`].

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user_id: String,
    pub item_id: String,
    pub criterion: usize,
    pub value: f64,
}

/// How a raw rating on one criterion turns into a positive interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositiveRule {
    /// `value >= (min + max) / 2`
    #[default]
    MedianOfRange,
    /// Vote counts: `value >= 1`.
    AtLeastOne,
    FixedThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionSpec {
    #[serde(rename = "index")]
    pub criterion: usize,
    pub name: String,
    #[serde(rename = "min")]
    pub scale_min: f64,
    #[serde(rename = "max")]
    pub scale_max: f64,
    #[serde(default)]
    pub rule: PositiveRule,
}

impl CriterionSpec {
    pub fn new(criterion: usize, name: impl Into<String>, scale_min: f64, scale_max: f64) -> Self {
        Self {
            criterion,
            name: name.into(),
            scale_min,
            scale_max,
            rule: PositiveRule::MedianOfRange,
        }
    }

    pub fn with_rule(mut self, rule: PositiveRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min < self.scale_max) {
            return Err(Error::Validation(format!(
                "criterion {}: scale min {} must be below max {}",
                self.criterion, self.scale_min, self.scale_max
            )));
        }
        if let PositiveRule::FixedThreshold(t) = self.rule {
            if t < self.scale_min || t > self.scale_max {
                return Err(Error::Validation(format!(
                    "criterion {}: threshold {} outside [{}, {}]",
                    self.criterion, t, self.scale_min, self.scale_max
                )));
            }
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        match self.rule {
            PositiveRule::MedianOfRange => 0.5 * (self.scale_min + self.scale_max),
            PositiveRule::AtLeastOne => 1.0,
            PositiveRule::FixedThreshold(t) => t,
        }
    }

    pub fn is_positive(&self, value: f64) -> bool {
        value >= self.threshold()
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.scale_min && value <= self.scale_max
    }
}

/// Checks that specs are listed densely as criteria `0..n` and individually valid.
pub fn validate_specs(specs: &[CriterionSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Validation("at least the overall criterion is required".into()));
    }
    for (i, spec) in specs.iter().enumerate() {
        if spec.criterion != i {
            return Err(Error::Validation(format!(
                "criterion specs must be listed in index order; found {} at position {}",
                spec.criterion, i
            )));
        }
        spec.validate()?;
    }
    Ok(())
}

pub fn load_specs(path: impl AsRef<Path>) -> Result<Vec<CriterionSpec>> {
    let text = fs::read_to_string(path)?;
    let mut specs: Vec<CriterionSpec> = serde_json::from_str(&text)?;
    specs.sort_by_key(|s| s.criterion);
    validate_specs(&specs)?;
    Ok(specs)
}

pub fn save_specs(path: impl AsRef<Path>, specs: &[CriterionSpec]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(specs)?)?;
    Ok(())
}

/// Raw ratings plus the criterion count they were validated against.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingLog {
    pub records: Vec<RatingRecord>,
    pub n_criteria_plus1: usize,
}

impl RatingLog {
    /// Number of non-overall criteria.
    pub fn n_criteria(&self) -> usize {
        self.n_criteria_plus1 - 1
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts_per_criterion(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_criteria_plus1];
        for r in &self.records {
            counts[r.criterion] += 1;
        }
        counts
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path, &self.records)
    }
}

fn validate_record(record: &RatingRecord, specs: &[CriterionSpec], line: usize) -> Result<()> {
    let Some(spec) = specs.get(record.criterion) else {
        return Err(Error::Parse {
            line,
            msg: format!(
                "criterion {} out of range (0..={})",
                record.criterion,
                specs.len() - 1
            ),
        });
    };
    if !record.value.is_finite() || !spec.contains(record.value) {
        return Err(Error::Validation(format!(
            "line {}: value {} outside [{}, {}] for criterion {}",
            line, record.value, spec.scale_min, spec.scale_max, record.criterion
        )));
    }
    Ok(())
}

/// Parses whitespace-separated `user item criterion value` lines. Blank lines
/// and `#` comments are skipped.
pub fn parse_tsv<R: BufRead>(reader: R, specs: &[CriterionSpec]) -> Result<RatingLog> {
    validate_specs(specs)?;
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let criterion: usize = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad criterion index {:?}", fields[2]),
        })?;
        let value: f64 = fields[3].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad rating value {:?}", fields[3]),
        })?;
        let record = RatingRecord {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            criterion,
            value,
        };
        validate_record(&record, specs, line_no)?;
        records.push(record);
    }
    Ok(RatingLog {
        records,
        n_criteria_plus1: specs.len(),
    })
}

#[derive(Debug, Deserialize)]
struct NestedRating {
    user: String,
    item: String,
    ratings: Vec<Option<f64>>,
}

/// Parses the nested JSON export: `[{"user": .., "item": .., "ratings": [overall, c1, ..]}]`
/// where missing criteria are `null`.
pub fn parse_json(text: &str, specs: &[CriterionSpec]) -> Result<RatingLog> {
    validate_specs(specs)?;
    let rows: Vec<NestedRating> = serde_json::from_str(text)?;
    let mut records = Vec::new();
    for (n, row) in rows.into_iter().enumerate() {
        for (criterion, value) in row.ratings.into_iter().enumerate() {
            let Some(value) = value else { continue };
            let record = RatingRecord {
                user_id: row.user.clone(),
                item_id: row.item.clone(),
                criterion,
                value,
            };
            validate_record(&record, specs, n + 1)?;
            records.push(record);
        }
    }
    Ok(RatingLog {
        records,
        n_criteria_plus1: specs.len(),
    })
}

/// Reads a rating log from disk; `.json` files use the nested layout, anything
/// else is treated as TSV.
pub fn ingest(path: impl AsRef<Path>, specs: &[CriterionSpec]) -> Result<RatingLog> {
    let path = path.as_ref();
    let log = if path.extension().is_some_and(|e| e == "json") {
        parse_json(&fs::read_to_string(path)?, specs)?
    } else {
        parse_tsv(BufReader::new(fs::File::open(path)?), specs)?
    };
    debug!(
        "ingested {} records from {}; per criterion {:?}",
        log.len(),
        path.display(),
        log.counts_per_criterion()
    );
    Ok(log)
}

fn write_records(path: impl AsRef<Path>, records: &[RatingRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}\t{}\t{}\t{}", r.user_id, r.item_id, r.criterion, r.value)?;
    }
    out.flush()?;
    Ok(())
}

/// Dense index over opaque string ids, in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_ids(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { ids, index }
    }

    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub user: usize,
    pub item: usize,
    /// Raw rating that produced this positive.
    pub value: f64,
    /// Optional edge weight; `None` means unit weight.
    pub weight: Option<f64>,
}

/// Per-criterion positive interactions over shared dense user/item indices.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    pub users: Vocab,
    pub items: Vocab,
    /// `positives[c]` lists the pairs in `N_u^c` for every user.
    pub positives: Vec<Vec<Positive>>,
}

impl InteractionSet {
    pub fn empty_like(&self) -> Self {
        Self {
            users: self.users.clone(),
            items: self.items.clone(),
            positives: vec![Vec::new(); self.positives.len()],
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_criteria_plus1(&self) -> usize {
        self.positives.len()
    }

    pub fn overall(&self) -> &[Positive] {
        &self.positives[0]
    }

    pub fn n_positives(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_positives() == 0
    }

    /// Items each user has positively rated on criterion `c`.
    pub fn items_by_user(&self, c: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users()];
        for p in &self.positives[c] {
            out[p.user].push(p.item);
        }
        out
    }

    pub fn item_sets_by_user(&self, c: usize) -> Vec<HashSet<usize>> {
        let mut out = vec![HashSet::new(); self.n_users()];
        for p in &self.positives[c] {
            out[p.user].insert(p.item);
        }
        out
    }

    /// Keeps only criteria `0..k` (the overall rating plus the first `k - 1`).
    pub fn restrict_criteria(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.n_criteria_plus1() {
            return Err(Error::Config(format!(
                "criteria count {} outside 1..={}",
                k,
                self.n_criteria_plus1()
            )));
        }
        let mut out = self.clone();
        out.positives.truncate(k);
        Ok(out)
    }

    /// Uses raw rating values as edge weights.
    pub fn with_rating_weights(mut self) -> Self {
        for list in &mut self.positives {
            for p in list {
                p.weight = Some(p.value);
            }
        }
        self
    }

    pub fn to_records(&self) -> Vec<RatingRecord> {
        let mut out = Vec::with_capacity(self.n_positives());
        for (c, list) in self.positives.iter().enumerate() {
            for p in list {
                out.push(RatingRecord {
                    user_id: self.users.id(p.user).to_string(),
                    item_id: self.items.id(p.item).to_string(),
                    criterion: c,
                    value: p.value,
                });
            }
        }
        out
    }

    /// Writes positives back out as rating lines, ordered by user then criterion.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows: Vec<(usize, usize, usize, RatingRecord)> = Vec::new();
        for (c, list) in self.positives.iter().enumerate() {
            for p in list {
                rows.push((
                    p.user,
                    c,
                    p.item,
                    RatingRecord {
                        user_id: self.users.id(p.user).to_string(),
                        item_id: self.items.id(p.item).to_string(),
                        criterion: c,
                        value: p.value,
                    },
                ));
            }
        }
        rows.sort_by_key(|r| (r.0, r.1, r.2));
        let records: Vec<RatingRecord> = rows.into_iter().map(|r| r.3).collect();
        write_records(path, &records)
    }
}

/// Binarizes several logs against one shared vocabulary, assigned in order of
/// first appearance across the logs.
pub fn binarize_many(logs: &[&RatingLog], specs: &[CriterionSpec]) -> Vec<InteractionSet> {
    let mut users = Vocab::default();
    let mut items = Vocab::default();
    for log in logs {
        for r in &log.records {
            users.intern(&r.user_id);
            items.intern(&r.item_id);
        }
    }
    logs.iter()
        .map(|log| {
            let mut positives = vec![Vec::new(); specs.len()];
            let mut seen = HashSet::new();
            for r in &log.records {
                let Some(spec) = specs.get(r.criterion) else {
                    continue;
                };
                if !spec.is_positive(r.value) {
                    continue;
                }
                let user = users.get(&r.user_id).unwrap();
                let item = items.get(&r.item_id).unwrap();
                if !seen.insert((user, item, r.criterion)) {
                    warn!(
                        "duplicate rating ({}, {}, {}) ignored",
                        r.user_id, r.item_id, r.criterion
                    );
                    continue;
                }
                positives[r.criterion].push(Positive {
                    user,
                    item,
                    value: r.value,
                    weight: None,
                });
            }
            InteractionSet {
                users: users.clone(),
                items: items.clone(),
                positives,
            }
        })
        .collect()
}

pub fn binarize(log: &RatingLog, specs: &[CriterionSpec]) -> InteractionSet {
    binarize_many(&[log], specs).pop().unwrap()
}

/// Repeatedly drops users and items with fewer than `k` overall positives until
/// nothing changes, then reindexes densely preserving relative order.
pub fn filter_min_interactions(iset: &InteractionSet, k: usize) -> Result<InteractionSet> {
    if k == 0 {
        return Err(Error::Config("minimum interaction count must be at least 1".into()));
    }
    let mut user_alive = vec![true; iset.n_users()];
    let mut item_alive = vec![true; iset.n_items()];
    loop {
        let mut user_count = vec![0usize; iset.n_users()];
        let mut item_count = vec![0usize; iset.n_items()];
        for p in iset.overall() {
            if user_alive[p.user] && item_alive[p.item] {
                user_count[p.user] += 1;
                item_count[p.item] += 1;
            }
        }
        let mut changed = false;
        for (alive, &n) in user_alive.iter_mut().zip(&user_count) {
            if *alive && n < k {
                *alive = false;
                changed = true;
            }
        }
        for (alive, &n) in item_alive.iter_mut().zip(&item_count) {
            if *alive && n < k {
                *alive = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let remap = |alive: &[bool], vocab: &Vocab| {
        let mut map = vec![usize::MAX; alive.len()];
        let mut ids = Vec::new();
        for (i, &a) in alive.iter().enumerate() {
            if a {
                map[i] = ids.len();
                ids.push(vocab.id(i).to_string());
            }
        }
        (map, Vocab::from_ids(ids))
    };
    let (user_map, users) = remap(&user_alive, &iset.users);
    let (item_map, items) = remap(&item_alive, &iset.items);
    if users.is_empty() || items.is_empty() {
        return Err(Error::Empty(format!(
            "no users or items survive the minimum of {} interactions",
            k
        )));
    }
    let positives = iset
        .positives
        .iter()
        .map(|list| {
            list.iter()
                .filter(|p| user_alive[p.user] && item_alive[p.item])
                .map(|p| Positive {
                    user: user_map[p.user],
                    item: item_map[p.item],
                    ..*p
                })
                .collect()
        })
        .collect();
    Ok(InteractionSet {
        users,
        items,
        positives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            valid: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} must be non-negative and sum to 1",
                all
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: InteractionSet,
    pub valid: InteractionSet,
    pub test: InteractionSet,
}

impl Splits {
    pub fn restrict_criteria(&self, k: usize) -> Result<Self> {
        Ok(Self {
            train: self.train.restrict_criteria(k)?,
            valid: self.valid.restrict_criteria(k)?,
            test: self.test.restrict_criteria(k)?,
        })
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.train.write_tsv(dir.join("train.tsv"))?;
        self.valid.write_tsv(dir.join("valid.tsv"))?;
        self.test.write_tsv(dir.join("test.tsv"))?;
        Ok(())
    }

    /// Reads `train.tsv`, `valid.tsv` and `test.tsv` back with a shared vocabulary.
    pub fn read_dir(dir: impl AsRef<Path>, specs: &[CriterionSpec]) -> Result<Self> {
        let dir = dir.as_ref();
        let train = ingest(dir.join("train.tsv"), specs)?;
        let valid = ingest(dir.join("valid.tsv"), specs)?;
        let test = ingest(dir.join("test.tsv"), specs)?;
        let mut sets = binarize_many(&[&train, &valid, &test], specs);
        let test = sets.pop().unwrap();
        let valid = sets.pop().unwrap();
        let train = sets.pop().unwrap();
        Ok(Self { train, valid, test })
    }
}

/// Per-user random partition of overall positives. Valid and test counts are
/// `floor(n * ratio)` and the remainder trains. Side-criterion positives go to
/// train unless their (user, item) pair was held out on the overall rating.
pub fn split(iset: &InteractionSet, ratios: SplitRatios, seed: u64) -> Result<Splits> {
    ratios.validate()?;
    let mut rng = rng::stream(seed, Stream::Split);
    let mut train = iset.empty_like();
    let mut valid = iset.empty_like();
    let mut test = iset.empty_like();

    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); iset.n_users()];
    for (idx, p) in iset.overall().iter().enumerate() {
        per_user[p.user].push(idx);
    }
    let mut held_out: HashSet<(usize, usize)> = HashSet::new();
    for indices in per_user.iter_mut() {
        let n = indices.len() as f64;
        let n_valid = (n * ratios.valid + 1e-9).floor() as usize;
        let n_test = (n * ratios.test + 1e-9).floor() as usize;
        indices.shuffle(&mut rng);
        for (rank, &idx) in indices.iter().enumerate() {
            let p = iset.overall()[idx];
            if rank < n_test {
                test.positives[0].push(p);
                held_out.insert((p.user, p.item));
            } else if rank < n_test + n_valid {
                valid.positives[0].push(p);
                held_out.insert((p.user, p.item));
            } else {
                train.positives[0].push(p);
            }
        }
    }
    for c in 1..iset.n_criteria_plus1() {
        for p in &iset.positives[c] {
            if !held_out.contains(&(p.user, p.item)) {
                train.positives[c].push(*p);
            }
        }
    }
    Ok(Splits { train, valid, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_overall_ratings: usize,
    pub n_mc_ratings: usize,
    /// Criterion count excluding the overall rating.
    pub n_criteria: usize,
    pub gamma: f64,
}

impl DatasetStats {
    fn build(n_users: usize, n_items: usize, n_overall: usize, n_mc: usize, n_criteria: usize) -> Result<Self> {
        if n_overall == 0 {
            return Err(Error::Empty("no overall ratings; gamma is undefined".into()));
        }
        Ok(Self {
            n_users,
            n_items,
            n_overall_ratings: n_overall,
            n_mc_ratings: n_mc,
            n_criteria,
            gamma: n_mc as f64 / n_overall as f64,
        })
    }
}

/// Statistics over binarized positives.
pub fn stats(iset: &InteractionSet) -> Result<DatasetStats> {
    DatasetStats::build(
        iset.n_users(),
        iset.n_items(),
        iset.overall().len(),
        iset.n_positives(),
        iset.n_criteria_plus1() - 1,
    )
}

/// Statistics over raw ratings, counting every record as one MC rating.
pub fn log_stats(log: &RatingLog) -> Result<DatasetStats> {
    let users: HashSet<&str> = log.records.iter().map(|r| r.user_id.as_str()).collect();
    let items: HashSet<&str> = log.records.iter().map(|r| r.item_id.as_str()).collect();
    let overall = log.records.iter().filter(|r| r.criterion == 0).count();
    DatasetStats::build(users.len(), items.len(), overall, log.len(), log.n_criteria())
}
