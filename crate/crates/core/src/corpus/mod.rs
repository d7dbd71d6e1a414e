//! Interaction-sequence data model, cutoff partitioning and daily time buckets.

mod io;
mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GuimError, Result};

pub use io::{
    load_catalog, load_corpus, load_sequences, read_catalog, read_sequences, save_catalog,
    save_corpus, save_sequences, write_catalog, write_sequences, CATALOG_FILE, SEQUENCES_FILE,
};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticCorpus, SyntheticTruth};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub item_id: u64,
    pub category_id: u32,
    pub title_tokens: Vec<u32>,
}

/// One purchase; item details are resolved through the [`Catalog`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub item_id: u64,
    #[serde(rename = "ts")]
    pub timestamp: i64,
}

/// Lengths in days of the encoder window before the cutoff and the target
/// window after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub pre_days: u32,
    pub post_days: u32,
}

impl Window {
    pub const fn new(pre_days: u32, post_days: u32) -> Self {
        Self {
            pre_days,
            post_days,
        }
    }

    pub fn pre_seconds(&self) -> i64 {
        self.pre_days as i64 * SECONDS_PER_DAY
    }

    pub fn post_seconds(&self) -> i64 {
        self.post_days as i64 * SECONDS_PER_DAY
    }
}

impl Default for Window {
    fn default() -> Self {
        Self::new(365, 30)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user_id: u64,
    pub interactions: Vec<Interaction>,
    pub cutoff: i64,
    pub window: Window,
}

impl InteractionSequence {
    pub fn check_sorted(&self) -> Result<()> {
        check_sorted(&self.interactions)
    }

    /// Pre-cutoff part (`timestamp < cutoff`).
    pub fn pre(&self) -> Result<&[Interaction]> {
        split_at_cutoff(self).map(|(pre, _)| pre)
    }

    /// Post-cutoff part (`timestamp >= cutoff`).
    pub fn post(&self) -> Result<&[Interaction]> {
        split_at_cutoff(self).map(|(_, post)| post)
    }
}

pub(crate) fn check_sorted(interactions: &[Interaction]) -> Result<()> {
    for (i, w) in interactions.windows(2).enumerate() {
        if w[0].timestamp > w[1].timestamp {
            return Err(GuimError::Ordering {
                index: i + 1,
                prev: w[0].timestamp,
                next: w[1].timestamp,
            });
        }
    }
    Ok(())
}

/// Splits a sorted sequence into `[.., T)` and `[T, ..)`.
pub fn split_at_cutoff(seq: &InteractionSequence) -> Result<(&[Interaction], &[Interaction])> {
    seq.check_sorted()?;
    let at = seq
        .interactions
        .partition_point(|a| a.timestamp < seq.cutoff);
    Ok(seq.interactions.split_at(at))
}

/// Input to [`day_bucket`]: either a real timestamp or the CLS sentinel `t_0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stamp {
    Cls,
    At(i64),
}

/// Number of rows in the time table for a window of `pre_days`: one per day
/// plus the `t_0` row.
pub fn time_table_rows(pre_days: u32) -> usize {
    pre_days as usize + 1
}

/// Daily bucket of a pre-cutoff timestamp. Bucket 0 is reserved for CLS
/// tokens; day `k` of the window maps to bucket `k + 1`, clamped to the last
/// table row.
pub fn day_bucket(stamp: Stamp, cutoff: i64, window_days: u32) -> Result<usize> {
    let ts = match stamp {
        Stamp::Cls => return Ok(0),
        Stamp::At(ts) => ts,
    };
    let start = cutoff - window_days as i64 * SECONDS_PER_DAY;
    if ts < start {
        return Err(GuimError::Range(format!(
            "timestamp {ts} precedes window start {start}"
        )));
    }
    let day = (ts - start).div_euclid(SECONDS_PER_DAY) as usize;
    Ok((1 + day).min(window_days as usize))
}

/// Item records indexed by their global id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    index: HashMap<u64, usize>,
}

impl Catalog {
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (pos, it) in items.iter().enumerate() {
            if index.insert(it.item_id, pos).is_some() {
                return Err(GuimError::Config(format!(
                    "duplicate item id {}",
                    it.item_id
                )));
            }
        }
        Ok(Self { items, index })
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Dense position of `item_id` in [`Catalog::items`].
    pub fn position(&self, item_id: u64) -> Option<usize> {
        self.index.get(&item_id).copied()
    }

    pub fn get(&self, item_id: u64) -> Option<&ItemRecord> {
        self.position(item_id).map(|p| &self.items[p])
    }

    pub fn num_categories(&self) -> usize {
        self.items
            .iter()
            .map(|it| it.category_id as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn word_vocab_size(&self) -> usize {
        self.items
            .iter()
            .flat_map(|it| it.title_tokens.iter())
            .map(|&w| w as usize + 1)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub catalog: Catalog,
    pub sequences: Vec<InteractionSequence>,
}

impl Corpus {
    /// Purchase counts per catalog position over every interaction of `sequences`.
    pub fn purchase_counts<'a>(
        catalog: &Catalog,
        sequences: impl IntoIterator<Item = &'a InteractionSequence>,
    ) -> Vec<u64> {
        let mut counts = vec![0u64; catalog.len()];
        for seq in sequences {
            for a in &seq.interactions {
                if let Some(p) = catalog.position(a.item_id) {
                    counts[p] += 1;
                }
            }
        }
        counts
    }
}
