use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;

use super::{infer_item_embeddings, prepare_inputs, recall_at_m, top_m_retrieve, Backend, CandidateIndex};
use crate::corpus::{Corpus, SECONDS_PER_DAY};
use crate::error::{GuimError, Result};
use crate::model::{Model, PreparedCatalog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Every purchase in the post-cutoff window.
    L,
    /// Purchases on the first day after the cutoff.
    S,
    /// The first purchase after the cutoff.
    N,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::L, Protocol::S, Protocol::N];

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::L => "CMP-L",
            Protocol::S => "CMP-S",
            Protocol::N => "CMP-N",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Protocol {
    type Err = GuimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().trim_start_matches("CMP-") {
            "L" => Ok(Protocol::L),
            "S" => Ok(Protocol::S),
            "N" => Ok(Protocol::N),
            _ => Err(GuimError::Config(format!("unknown protocol `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub m: usize,
    /// Most-purchased items added to the candidate set besides the positives.
    pub candidate_pool: usize,
    pub backend: Backend,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            m: 20,
            candidate_pool: 1000,
            backend: Backend::Exact,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmpUser {
    pub seq_index: usize,
    pub user_id: u64,
    pub positives: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmpDataset {
    pub protocol: Protocol,
    pub users: Vec<CmpUser>,
    /// Sorted candidate ids; contains every positive.
    pub candidates: Vec<u64>,
    /// Users dropped for having no positive in the horizon.
    pub excluded: usize,
}

/// Positives per protocol for the users at `seq_indices`, with candidates =
/// top-`pool` items by pre-cutoff purchase count plus all positives.
pub fn build_cmp_dataset(corpus: &Corpus, seq_indices: &[usize], protocol: Protocol, pool: usize) -> Result<CmpDataset> {
    let mut users = Vec::new();
    let mut excluded = 0;
    for &i in seq_indices {
        let s = &corpus.sequences[i];
        let horizon = match protocol {
            Protocol::S => SECONDS_PER_DAY,
            _ => s.window.post_seconds(),
        };
        let mut post: Vec<_> = s
            .interactions
            .iter()
            .filter(|a| a.timestamp >= s.cutoff && a.timestamp < s.cutoff + horizon)
            .collect();
        post.sort_by_key(|a| a.timestamp);
        let mut positives: Vec<u64> = match protocol {
            Protocol::N => post.first().map(|a| vec![a.item_id]).unwrap_or_default(),
            _ => post.iter().map(|a| a.item_id).collect(),
        };
        positives.sort_unstable();
        positives.dedup();
        if positives.is_empty() {
            excluded += 1;
            continue;
        }
        users.push(CmpUser {
            seq_index: i,
            user_id: s.user_id,
            positives,
        });
    }
    let mut counts = vec![0u64; corpus.catalog.len()];
    for s in &corpus.sequences {
        for a in s.interactions.iter().filter(|a| a.timestamp < s.cutoff) {
            if let Some(p) = corpus.catalog.position(a.item_id) {
                counts[p] += 1;
            }
        }
    }
    let mut ranked: Vec<(u64, u64)> = corpus
        .catalog
        .items()
        .iter()
        .zip(&counts)
        .map(|(it, &c)| (it.item_id, c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cand: BTreeSet<u64> = ranked.iter().take(pool).map(|x| x.0).collect();
    for u in &users {
        cand.extend(u.positives.iter().copied());
    }
    Ok(CmpDataset {
        protocol,
        users,
        candidates: cand.into_iter().collect(),
        excluded,
    })
}

/// Type-7 (linear interpolation) quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmpResult {
    pub protocol: Protocol,
    pub m: usize,
    pub per_user: Vec<(u64, f64)>,
    pub mean: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub excluded: usize,
    /// Eligible users without pre-cutoff history.
    pub skipped: usize,
    pub candidates: usize,
}

/// Retrieval recall@M over the users at `seq_indices`.
pub fn run_cmp(
    model: &Model,
    prepared: &PreparedCatalog,
    corpus: &Corpus,
    seq_indices: &[usize],
    protocol: Protocol,
    cfg: &EvalConfig,
) -> Result<CmpResult> {
    let ds = build_cmp_dataset(corpus, seq_indices, protocol, cfg.candidate_pool)?;
    if ds.candidates.is_empty() {
        return Err(GuimError::EmptyIndex);
    }
    if cfg.m > ds.candidates.len() {
        return Err(GuimError::TooManyResults {
            m: cfg.m,
            size: ds.candidates.len(),
        });
    }
    let items = infer_item_embeddings(model, &corpus.catalog, prepared, &ds.candidates)?;
    let index = CandidateIndex::build(ds.candidates.clone(), items, &cfg.backend, cfg.seed)?;
    let alpha = model.config.alpha;
    let scored: Vec<Result<Option<(u64, f64)>>> = ds
        .users
        .par_iter()
        .map(|u| {
            let s = &corpus.sequences[u.seq_index];
            let p = prepare_inputs(s, &corpus.catalog, model, s.cutoff)?;
            if p.items.is_empty() {
                return Ok(None);
            }
            let reps = model.user_representation(prepared, &p)?;
            let got = top_m_retrieve(&reps, &index, cfg.m, alpha)?;
            Ok(recall_at_m(&got, &u.positives).map(|r| (u.user_id, r)))
        })
        .collect();
    let mut per_user = Vec::with_capacity(scored.len());
    let mut skipped = 0;
    for r in scored {
        match r? {
            Some(x) => per_user.push(x),
            None => skipped += 1,
        }
    }
    if per_user.is_empty() {
        return Err(GuimError::NoEligibleUsers(protocol.name().into()));
    }
    let vals: Vec<f64> = per_user.iter().map(|x| x.1).collect();
    Ok(CmpResult {
        protocol,
        m: cfg.m,
        mean: vals.iter().sum::<f64>() / vals.len() as f64,
        p25: quantile(&vals, 0.25),
        p50: quantile(&vals, 0.5),
        p75: quantile(&vals, 0.75),
        per_user,
        excluded: ds.excluded,
        skipped,
        candidates: ds.candidates.len(),
    })
}
