//! Seeded generator for multi-interest purchase corpora.
//!
//! Items belong to latent clusters. A cluster owns a set of categories and a
//! block of title words; titles mix cluster words with shared stop-words.
//! Each user picks a few clusters with random interest weights and buys
//! Zipf-popular items from them on both sides of the cutoff.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Catalog, Interaction, InteractionSequence, ItemRecord, Window, SECONDS_PER_DAY};
use crate::error::{GuimError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub num_clusters: usize,
    /// Inclusive range of clusters per user.
    pub interests_per_user: (usize, usize),
    /// Zipf exponent of within-cluster item popularity.
    pub popularity_skew: f64,
    /// Inclusive range of pre-cutoff purchases.
    pub seq_length_range: (usize, usize),
    /// Inclusive range of post-cutoff purchases.
    pub post_length_range: (usize, usize),
    pub title_length_range: (usize, usize),
    pub words_per_cluster: usize,
    pub stop_words: usize,
    /// Probability that a title token is a shared stop-word.
    pub stop_word_rate: f64,
    pub cutoff: i64,
    pub window: Window,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// The standard desk-scale corpus: 5k users, 2k items, 16 clusters.
    fn default() -> Self {
        Self {
            num_users: 5_000,
            num_items: 2_000,
            num_categories: 64,
            num_clusters: 16,
            interests_per_user: (2, 4),
            popularity_skew: 1.0,
            seq_length_range: (8, 40),
            post_length_range: (2, 10),
            title_length_range: (2, 6),
            words_per_cluster: 24,
            stop_words: 16,
            stop_word_rate: 0.3,
            // 2019-08-16T00:00:00Z
            cutoff: 1_565_913_600,
            window: Window::new(365, 30),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// 200 users over 100 items; used by quick training checks.
    pub fn tiny() -> Self {
        Self {
            num_users: 200,
            num_items: 100,
            num_categories: 8,
            num_clusters: 4,
            interests_per_user: (1, 2),
            seq_length_range: (5, 15),
            post_length_range: (1, 4),
            words_per_cluster: 8,
            stop_words: 4,
            ..Self::default()
        }
    }

    pub fn word_vocab_size(&self) -> usize {
        self.stop_words + self.num_clusters * self.words_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(GuimError::Config(m.to_string()));
        if self.num_users == 0 || self.num_items == 0 || self.num_categories == 0 || self.num_clusters == 0 {
            return err("num_users, num_items, num_categories and num_clusters must be positive");
        }
        if self.num_clusters > self.num_categories {
            return err("num_clusters must not exceed num_categories");
        }
        if self.num_clusters > self.num_items {
            return err("num_clusters must not exceed num_items");
        }
        let ranges = [
            ("interests_per_user", self.interests_per_user),
            ("seq_length_range", self.seq_length_range),
            ("post_length_range", self.post_length_range),
            ("title_length_range", self.title_length_range),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(GuimError::Config(format!("{name} is empty ({lo} > {hi})")));
            }
        }
        if self.interests_per_user.0 == 0 || self.interests_per_user.1 > self.num_clusters {
            return err("interests_per_user must lie within 1..=num_clusters");
        }
        if self.seq_length_range.0 == 0 || self.post_length_range.0 == 0 {
            return err("every user needs at least one pre- and one post-cutoff purchase");
        }
        if self.title_length_range.1 > 0 && self.words_per_cluster == 0 && self.stop_words == 0 {
            return err("titles need a nonempty word vocabulary");
        }
        if !(self.popularity_skew >= 0.0 && self.popularity_skew.is_finite()) {
            return err("popularity_skew must be a finite value >= 0");
        }
        if !(0.0..=1.0).contains(&self.stop_word_rate) {
            return err("stop_word_rate must lie in [0, 1]");
        }
        if self.window.pre_days == 0 || self.window.post_days == 0 {
            return err("window lengths must be positive");
        }
        Ok(())
    }
}

/// Latent structure behind a generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    /// Cluster of each item, indexed by item id.
    pub item_cluster: Vec<usize>,
    /// Popularity rank of each item within its cluster (0 = most popular).
    pub item_rank: Vec<usize>,
    /// `(cluster, weight)` pairs per user, weights summing to 1.
    pub user_interests: Vec<Vec<(usize, f64)>>,
}

impl SyntheticTruth {
    /// Cluster with the largest interest weight (smaller id on ties).
    pub fn dominant_cluster(&self, user: usize) -> usize {
        self.user_interests[user]
            .iter()
            .fold((usize::MAX, f64::NEG_INFINITY), |best, &(c, w)| {
                if w > best.1 || (w == best.1 && c < best.0) {
                    (c, w)
                } else {
                    best
                }
            })
            .0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub catalog: Catalog,
    pub sequences: Vec<InteractionSequence>,
    pub truth: SyntheticTruth,
}

impl SyntheticCorpus {
    pub fn into_corpus(self) -> super::Corpus {
        super::Corpus {
            catalog: self.catalog,
            sequences: self.sequences,
        }
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.num_clusters;

    let cluster_categories: Vec<Vec<u32>> = (0..k)
        .map(|c| (c..config.num_categories).step_by(k).map(|x| x as u32).collect())
        .collect();

    let mut item_cluster = Vec::with_capacity(config.num_items);
    let mut items = Vec::with_capacity(config.num_items);
    for item_id in 0..config.num_items {
        let cluster = item_id % k;
        let cats = &cluster_categories[cluster];
        let category_id = cats[rng.gen_range(0..cats.len())];
        let len = rng.gen_range(config.title_length_range.0..=config.title_length_range.1);
        let title_tokens = (0..len)
            .map(|_| {
                let stop = config.words_per_cluster == 0
                    || (config.stop_words > 0 && rng.gen_bool(config.stop_word_rate));
                if stop {
                    rng.gen_range(0..config.stop_words) as u32
                } else {
                    (config.stop_words
                        + cluster * config.words_per_cluster
                        + rng.gen_range(0..config.words_per_cluster)) as u32
                }
            })
            .collect();
        item_cluster.push(cluster);
        items.push(ItemRecord {
            item_id: item_id as u64,
            category_id,
            title_tokens,
        });
    }

    // Within-cluster popularity: a random permutation assigns Zipf ranks.
    let mut item_rank = vec![0; config.num_items];
    let mut cluster_samplers = Vec::with_capacity(k);
    let mut cluster_members = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> = (c..config.num_items).step_by(k).collect();
        let order = sample(&mut rng, members.len(), members.len()).into_vec();
        let mut ranked = vec![0; members.len()];
        for (rank, &slot) in order.iter().enumerate() {
            ranked[rank] = members[slot];
            item_rank[members[slot]] = rank;
        }
        let weights: Vec<f64> = (0..ranked.len())
            .map(|r| ((r + 1) as f64).powf(-config.popularity_skew))
            .collect();
        cluster_samplers.push(WeightedIndex::new(&weights).expect("positive weights"));
        cluster_members.push(ranked);
    }

    let draw_item = |cluster: usize, rng: &mut ChaCha8Rng| -> u64 {
        cluster_members[cluster][cluster_samplers[cluster].sample(rng)] as u64
    };

    let pre_span = config.window.pre_days as i64 * SECONDS_PER_DAY;
    let post_span = config.window.post_days as i64 * SECONDS_PER_DAY;
    let mut sequences = Vec::with_capacity(config.num_users);
    let mut user_interests = Vec::with_capacity(config.num_users);
    for user_id in 0..config.num_users {
        let n_int = rng.gen_range(config.interests_per_user.0..=config.interests_per_user.1);
        let clusters = sample(&mut rng, k, n_int).into_vec();
        let raw: Vec<f64> = (0..n_int).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let interests: Vec<(usize, f64)> =
            clusters.iter().zip(&raw).map(|(&c, &w)| (c, w / total)).collect();
        let picker = WeightedIndex::new(interests.iter().map(|(_, w)| *w)).expect("positive weights");

        let n_pre = rng.gen_range(config.seq_length_range.0..=config.seq_length_range.1);
        let n_post = rng.gen_range(config.post_length_range.0..=config.post_length_range.1);
        let mut interactions = Vec::with_capacity(n_pre + n_post);
        let mut stamps: Vec<i64> = (0..n_pre)
            .map(|_| config.cutoff - pre_span + rng.gen_range(0..pre_span))
            .collect();
        stamps.sort_unstable();
        let mut post: Vec<i64> = (0..n_post)
            .map(|_| config.cutoff + rng.gen_range(0..post_span))
            .collect();
        post.sort_unstable();
        stamps.extend(post);
        for timestamp in stamps {
            let cluster = interests[picker.sample(&mut rng)].0;
            interactions.push(Interaction {
                item_id: draw_item(cluster, &mut rng),
                timestamp,
            });
        }
        sequences.push(InteractionSequence {
            user_id: user_id as u64,
            interactions,
            cutoff: config.cutoff,
            window: config.window,
        });
        user_interests.push(interests);
    }

    Ok(SyntheticCorpus {
        catalog: Catalog::new(items)?,
        sequences,
        truth: SyntheticTruth {
            item_cluster,
            item_rank,
            user_interests,
        },
    })
}
