//! Inference-time embeddings, merged multi-vector retrieval, recall and the
//! profile classifier.

mod cmp;
mod cpp;
mod export;
mod index;

use std::collections::HashMap;

use rayon::prelude::*;

pub use cmp::{build_cmp_dataset, quantile, run_cmp, CmpDataset, CmpResult, CmpUser, EvalConfig, Protocol};
pub use cpp::{cpp_labels, train_cpp_classifier, CppConfig, CppResult, CppTask};
pub use export::{format_vector, write_item_embeddings, write_results, write_user_embeddings, ResultRow, RESULTS_HEADER};
pub use index::{rank_order, top_by_rank, Backend, CandidateIndex};

use crate::corpus::{day_bucket, Catalog, InteractionSequence, Stamp, SECONDS_PER_DAY};
use crate::error::{GuimError, Result};
use crate::model::{Model, PreparedCatalog, PreparedSequence};
use crate::tensor::Matrix;

/// Encoder inputs from interactions in `[cutoff - D1, cutoff)` only; nothing at
/// or after `cutoff` is read, whatever its order or content.
pub fn prepare_inputs(seq: &InteractionSequence, catalog: &Catalog, model: &Model, cutoff: i64) -> Result<PreparedSequence> {
    let cfg = &model.config;
    let days = cfg.window_days();
    let start = cutoff - days as i64 * SECONDS_PER_DAY;
    let mut items = Vec::new();
    let mut buckets = Vec::new();
    let mut prev = i64::MIN;
    for (i, a) in seq.interactions.iter().enumerate() {
        if a.timestamp >= cutoff || a.timestamp < start {
            continue;
        }
        if a.timestamp < prev {
            return Err(GuimError::Ordering {
                index: i,
                prev,
                next: a.timestamp,
            });
        }
        prev = a.timestamp;
        items.push(catalog.position(a.item_id).ok_or(GuimError::Lookup {
            table: "catalog",
            index: a.item_id as usize,
            size: catalog.len(),
        })?);
        buckets.push(day_bucket(Stamp::At(a.timestamp), cutoff, days)?);
    }
    let keep = cfg.max_len - cfg.num_cls();
    if items.len() > keep {
        let drop = items.len() - keep;
        items.drain(..drop);
        buckets.drain(..drop);
    }
    Ok(PreparedSequence {
        user_id: seq.user_id,
        items,
        buckets,
        targets: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserEmbedding {
    pub user_id: u64,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// Users with at least one pre-cutoff interaction, in input order.
    pub users: Vec<UserEmbedding>,
    /// Users skipped for an empty pre-cutoff history.
    pub skipped: usize,
    pub item_ids: Vec<u64>,
    pub items: Matrix,
}

/// User vector sets from pre-cutoff history (no masking). `cutoff = None`
/// uses each sequence's own cutoff.
pub fn infer_user_embeddings<'a>(
    model: &Model,
    catalog: &Catalog,
    prepared: &PreparedCatalog,
    sequences: impl IntoIterator<Item = &'a InteractionSequence>,
    cutoff: Option<i64>,
) -> Result<(Vec<UserEmbedding>, usize)> {
    let seqs: Vec<&InteractionSequence> = sequences.into_iter().collect();
    let reps: Vec<Result<Option<UserEmbedding>>> = seqs
        .par_iter()
        .map(|s| {
            let p = prepare_inputs(s, catalog, model, cutoff.unwrap_or(s.cutoff))?;
            if p.items.is_empty() {
                return Ok(None);
            }
            Ok(Some(UserEmbedding {
                user_id: s.user_id,
                vectors: model.user_representation(prepared, &p)?,
            }))
        })
        .collect();
    let mut users = Vec::with_capacity(reps.len());
    let mut skipped = 0;
    for r in reps {
        match r? {
            Some(u) => users.push(u),
            None => skipped += 1,
        }
    }
    Ok((users, skipped))
}

/// `f_j` embeddings of the given catalog ids.
pub fn infer_item_embeddings(model: &Model, catalog: &Catalog, prepared: &PreparedCatalog, ids: &[u64]) -> Result<Matrix> {
    let pos = ids
        .iter()
        .map(|&id| {
            catalog.position(id).ok_or(GuimError::Lookup {
                table: "catalog",
                index: id as usize,
                size: catalog.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    model.item_embeddings(prepared, &pos)
}

/// Users and candidate items in one call.
pub fn infer_embeddings<'a>(
    model: &Model,
    catalog: &Catalog,
    prepared: &PreparedCatalog,
    sequences: impl IntoIterator<Item = &'a InteractionSequence>,
    cutoff: Option<i64>,
    item_ids: &[u64],
) -> Result<Embeddings> {
    let (users, skipped) = infer_user_embeddings(model, catalog, prepared, sequences, cutoff)?;
    Ok(Embeddings {
        users,
        skipped,
        item_ids: item_ids.to_vec(),
        items: infer_item_embeddings(model, catalog, prepared, item_ids)?,
    })
}

/// One top-`m` query per user vector, merged by per-item max score; returns
/// `(id, score)` ordered by score then id.
pub fn top_m_retrieve_scored<U: AsRef<[f64]>>(
    u_set: &[U],
    index: &CandidateIndex,
    m: usize,
    alpha: f64,
) -> Result<Vec<(u64, f64)>> {
    if index.is_empty() {
        return Err(GuimError::EmptyIndex);
    }
    if m > index.len() {
        return Err(GuimError::TooManyResults { m, size: index.len() });
    }
    let mut best: HashMap<u64, f64> = HashMap::new();
    for u in u_set {
        for (id, s) in index.query(u.as_ref(), m, alpha)? {
            best.entry(id).and_modify(|b| *b = b.max(s)).or_insert(s);
        }
    }
    Ok(top_by_rank(best.into_iter().collect(), m))
}

pub fn top_m_retrieve<U: AsRef<[f64]>>(u_set: &[U], index: &CandidateIndex, m: usize, alpha: f64) -> Result<Vec<u64>> {
    Ok(top_m_retrieve_scored(u_set, index, m, alpha)?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

/// Fraction of distinct positives present in `retrieved`; `None` when there
/// are no positives.
pub fn recall_at_m(retrieved: &[u64], positives: &[u64]) -> Option<f64> {
    let mut pos = positives.to_vec();
    pos.sort_unstable();
    pos.dedup();
    if pos.is_empty() {
        return None;
    }
    let hits = pos.iter().filter(|p| retrieved.contains(p)).count();
    Some(hits as f64 / pos.len() as f64)
}
