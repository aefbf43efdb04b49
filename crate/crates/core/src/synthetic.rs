//! Planted-preference rating generator.
//!
//! Every user cares mostly about one dominant criterion and every item has a
//! latent quality per criterion. Users see items biased toward quality on
//! their dominant criterion; criterion ratings track item quality and the
//! overall rating is the preference-weighted blend of those qualities plus
//! noise. Side-criterion ratings therefore carry information about which
//! items a user will like that the overall ratings alone only partly reveal.

use rand::seq::index::sample_weighted;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{RatingLog, RatingRecord};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_criteria: usize,
    /// Fraction of the catalog each user rates.
    pub density: f64,
    /// Standard deviation multiplier of the rating noise, in `[0, 1)`.
    pub noise: f64,
    /// Probability that a side-criterion rating is recorded.
    pub coverage: f64,
    /// Dimension of the latent taste that drives which items a user rates.
    pub taste_dim: usize,
    /// Strength of the exposure bias toward taste and dominant-criterion quality.
    pub exposure: f64,
    /// Offset subtracted from the overall blend; larger is harsher.
    pub strictness: f64,
    /// Offset added to criterion ratings; larger is more lenient.
    pub generosity: f64,
    /// Weight of the dominant criterion in the overall blend.
    pub dominance: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            n_criteria: 3,
            density: 0.04,
            noise: 0.3,
            coverage: 1.0,
            taste_dim: 8,
            exposure: 2.0,
            strictness: 0.15,
            generosity: 0.1,
            dominance: 0.7,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.n_criteria == 0 {
            return Err(Error::Config("users, items and criteria must be positive".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1), got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::Config(format!("coverage must lie in [0, 1], got {}", self.coverage)));
        }
        if !(0.0..=1.0).contains(&self.dominance) {
            return Err(Error::Config(format!("dominance must lie in [0, 1], got {}", self.dominance)));
        }
        Ok(())
    }

    /// Shape of the hotel-review data: 4265 users, 6275 items, about 8
    /// overall ratings per user and seven partially filled criteria.
    pub fn hotel_shaped(seed: u64) -> Self {
        let (users, items, overall, mc) = (4265usize, 6275usize, 34_383f64, 202_859f64);
        Self {
            n_users: users,
            n_items: items,
            n_criteria: 7,
            density: overall / (users * items) as f64,
            // every record counts toward the MC total, the overall one included
            coverage: (mc / overall - 1.0) / 7.0,
            seed,
            ..Self::default()
        }
    }
}

/// Maps a latent score in roughly `[0, 1]` onto the 1..5 star scale.
fn stars(x: f64) -> f64 {
    (1.0 + 4.0 * x).round().clamp(1.0, 5.0)
}

/// Generates a rating log from the planted model described in the module docs.
pub fn generate(config: &SyntheticConfig) -> Result<RatingLog> {
    config.validate()?;
    let c = config.n_criteria;
    let mut rng = rng::stream(config.seed, Stream::Synthetic);
    let quality: Vec<Vec<f64>> = (0..config.n_items)
        .map(|_| (0..c).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let k = config.taste_dim;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let item_taste: Vec<Vec<f64>> = (0..config.n_items)
        .map(|_| (0..k).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let per_user = ((config.density * config.n_items as f64).round() as usize).clamp(1, config.n_items);
    let noise = Normal::new(0.0, 0.25 * config.noise.max(f64::MIN_POSITIVE)).expect("positive sd");
    let mut records = Vec::with_capacity(config.n_users * per_user * (c + 1));

    for u in 0..config.n_users {
        let dominant = rng.gen_range(0..c);
        let taste: Vec<f64> = (0..k).map(|_| unit.sample(&mut rng) / (k.max(1) as f64).sqrt()).collect();
        let weights: Vec<f64> = (0..c)
            .map(|k| match (k == dominant, c) {
                (_, 1) => 1.0,
                (true, _) => config.dominance,
                (false, _) => (1.0 - config.dominance) / (c - 1) as f64,
            })
            .collect();
        let mut items = if per_user == config.n_items {
            (0..config.n_items).collect::<Vec<_>>()
        } else {
            let exposure = config.exposure;
            sample_weighted(
                &mut rng,
                config.n_items,
                |i| {
                    let affinity: f64 = taste.iter().zip(&item_taste[i]).map(|(a, b)| a * b).sum();
                    (exposure * (affinity + quality[i][dominant])).exp()
                },
                per_user,
            )
            .map_err(|e| Error::Config(format!("exposure sampling failed: {e}")))?
            .into_vec()
        };
        items.sort_unstable();
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| {
            if config.noise > 0.0 {
                scale * noise.sample(rng)
            } else {
                0.0
            }
        };
        for i in items {
            let q = &quality[i];
            let blend: f64 = weights.iter().zip(q).map(|(w, x)| w * x).sum();
            let user_id = format!("u{u}");
            let item_id = format!("i{i}");
            let overall = stars(blend - config.strictness + jitter(&mut rng, 1.0));
            records.push(RatingRecord {
                user_id: user_id.clone(),
                item_id: item_id.clone(),
                criterion: 0,
                value: overall,
            });
            for (k, &qk) in q.iter().enumerate() {
                let rating = stars(qk + config.generosity + jitter(&mut rng, 0.5));
                if config.coverage >= 1.0 || rng.gen::<f64>() < config.coverage {
                    records.push(RatingRecord {
                        user_id: user_id.clone(),
                        item_id: item_id.clone(),
                        criterion: k + 1,
                        value: rating,
                    });
                }
            }
        }
    }
    Ok(RatingLog {
        records,
        n_criteria_plus1: c + 1,
    })
}

pub fn generate_synthetic(
    n_users: usize,
    n_items: usize,
    n_criteria: usize,
    density: f64,
    noise: f64,
    seed: u64,
) -> Result<RatingLog> {
    generate(&SyntheticConfig {
        n_users,
        n_items,
        n_criteria,
        density,
        noise,
        seed,
        ..SyntheticConfig::default()
    })
}
