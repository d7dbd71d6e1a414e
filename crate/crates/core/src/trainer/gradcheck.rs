use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::embedder::build_item_vocab;
use crate::error::{GuimError, Result};
use crate::model::{prepare_sequence, BatchPlan, Model, ModelConfig, PreparedCatalog, PreparedSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Lower bound on the total number of coordinates; spread evenly over blocks.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    /// Combine central differences at `epsilon` and `epsilon / 2` so the
    /// `epsilon^2` truncation term cancels.
    pub richardson: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples: 240,
            seed: 0,
            abs_floor: 1e-4,
            richardson: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_block: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose perturbation moved a max-score argmax.
    pub skipped: usize,
    pub blocks: Vec<BlockError>,
}

/// Compares the analytic gradient of the summed loss under a fixed `plan`
/// with central differences on sampled coordinates of every block.
/// Coordinates are drawn from the nonzero-gradient entries of a block when it
/// has any.
pub fn grad_check(
    model: &Model,
    catalog: &PreparedCatalog,
    batch: &[PreparedSequence],
    plan: &BatchPlan,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut grads = model.params.zeros_like();
    let base = model.loss_and_grad(catalog, batch, plan, Some(&mut grads))?;
    let gblocks = grads.blocks();
    let nblocks = gblocks.len();
    let quota = cfg.samples.div_ceil(nblocks).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_block: String::new(),
        worst_index: 0,
        checked: 0,
        skipped: 0,
        blocks: Vec::with_capacity(nblocks),
    };
    for (bi, gb) in gblocks.iter().enumerate() {
        let g = gb.matrix.as_slice();
        let nonzero: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
        let pool: Vec<usize> = if nonzero.is_empty() { (0..g.len()).collect() } else { nonzero };
        let picks: Vec<usize> = sample(&mut rng, pool.len(), quota.min(pool.len()))
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let mut be = BlockError {
            name: gb.name.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for idx in picks {
            let orig = work.params.blocks_mut()[bi].as_slice()[idx];
            let mut central = |h: f64| -> Result<Option<f64>> {
                work.params.blocks_mut()[bi].as_mut_slice()[idx] = orig + h;
                let plus = work.loss_and_grad(catalog, batch, plan, None)?;
                work.params.blocks_mut()[bi].as_mut_slice()[idx] = orig - h;
                let minus = work.loss_and_grad(catalog, batch, plan, None)?;
                work.params.blocks_mut()[bi].as_mut_slice()[idx] = orig;
                let moved = plus.argmax_signature != base.argmax_signature
                    || minus.argmax_signature != base.argmax_signature;
                Ok((!moved).then(|| (plus.total() - minus.total()) / (2.0 * h)))
            };
            let Some(coarse) = central(cfg.epsilon)? else {
                be.skipped += 1;
                continue;
            };
            let numeric = if cfg.richardson {
                let Some(fine) = central(cfg.epsilon / 2.0)? else {
                    be.skipped += 1;
                    continue;
                };
                (4.0 * fine - coarse) / 3.0
            } else {
                coarse
            };
            let analytic = g[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
            if !rel.is_finite() {
                return Err(GuimError::NonFinite(format!("gradient check of {}", gb.name)));
            }
            be.checked += 1;
            be.max_rel_error = be.max_rel_error.max(rel);
            if rel > report.max_rel_error || report.worst_block.is_empty() {
                report.max_rel_error = rel;
                report.worst_block = gb.name.to_string();
                report.worst_index = idx;
            }
        }
        report.checked += be.checked;
        report.skipped += be.skipped;
        report.blocks.push(be);
    }
    Ok(report)
}

/// Picks `n` sequences with at least `seq_len` in-window pre-cutoff items and
/// one target, keeping their most recent `seq_len` items.
pub fn fixture_batch(
    corpus: &Corpus,
    config: &ModelConfig,
    n: usize,
    seq_len: usize,
) -> Result<(PreparedCatalog, Vec<PreparedSequence>)> {
    let counts = Corpus::purchase_counts(&corpus.catalog, &corpus.sequences);
    let vocab = build_item_vocab(&corpus.catalog, &counts, config.top_x)?;
    let catalog = PreparedCatalog::new(&corpus.catalog, &vocab);
    let mut batch = Vec::with_capacity(n);
    for s in &corpus.sequences {
        let mut p = prepare_sequence(s, &corpus.catalog, config, s.cutoff)?;
        if p.items.len() < seq_len || p.targets.is_empty() {
            continue;
        }
        let drop = p.items.len() - seq_len;
        p.items.drain(..drop);
        p.buckets.drain(..drop);
        batch.push(p);
        if batch.len() == n {
            return Ok((catalog, batch));
        }
    }
    Err(GuimError::Config(format!(
        "corpus has fewer than {n} sequences with {seq_len} items and a target"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use crate::model::{build_model, draw_plan, VariantKind};

    fn setup(variant: VariantKind, count: usize) -> (Model, PreparedCatalog, Vec<PreparedSequence>, BatchPlan) {
        let corpus = generate_synthetic(&SyntheticConfig {
            seed: 11,
            ..SyntheticConfig::tiny()
        })
        .unwrap()
        .into_corpus();
        let cfg = ModelConfig {
            variant,
            d: 8,
            count,
            layers: 1,
            heads: 2,
            d_c: 4,
            d_i: 4,
            d_w: 4,
            top_x: 120,
            num_categories: corpus.catalog.num_categories(),
            word_vocab_size: corpus.catalog.word_vocab_size(),
            max_len: 16,
            seed: 5,
            ..ModelConfig::default()
        };
        let model = build_model(&cfg).unwrap();
        let (catalog, batch) = fixture_batch(&corpus, &cfg, 4, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = draw_plan(&batch, 0.3, 3, &mut rng).unwrap();
        (model, catalog, batch, plan)
    }

    #[test]
    fn analytic_matches_finite_differences_for_each_variant() {
        for (variant, count) in [(VariantKind::Guim, 2), (VariantKind::GuiEdi, 2), (VariantKind::GuimMh, 3)] {
            let (model, catalog, batch, plan) = setup(variant, count);
            let r = grad_check(&model, &catalog, &batch, &plan, &GradCheckConfig::default()).unwrap();
            assert!(r.checked >= 200, "{variant}: {} checked", r.checked);
            assert!(r.blocks.iter().all(|b| b.checked > 0), "{variant}: {:?}", r.blocks);
            assert!(
                r.max_rel_error < 1e-4,
                "{variant}: {} in {}",
                r.max_rel_error,
                r.worst_block
            );
        }
    }

    #[test]
    fn unused_vocabulary_rows_have_zero_gradient() {
        let (model, catalog, batch, plan) = setup(VariantKind::Guim, 2);
        let mut g = model.params.zeros_like();
        model.loss_and_grad(&catalog, &batch, &plan, Some(&mut g)).unwrap();
        let used: std::collections::BTreeSet<usize> = (0..catalog.len()).map(|p| catalog.key(p).id_row).collect();
        let unused = (0..g.tables.item_id.rows()).find(|r| !used.contains(r)).unwrap();
        assert!(g.tables.item_id.row(unused).iter().all(|&x| x == 0.0));
        let mut work = model.clone();
        let base = model.loss_and_grad(&catalog, &batch, &plan, None).unwrap().total();
        work.params.tables.item_id.row_mut(unused)[0] += 1e-3;
        assert_eq!(work.loss_and_grad(&catalog, &batch, &plan, None).unwrap().total(), base);
    }
}
