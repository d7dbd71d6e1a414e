//! Model assembly for the three variants, the end-to-end forward / backward
//! pass over a batch, and parameter accounting.
//!
//! # Counting convention
//!
//! [`ParameterCounts::headline_total`] counts weight matrices and lookup
//! tables only: the `f_j` projection, the time and CLS tables, the transformer
//! weight matrices (`12 * d_model^2` per layer), and the `f_u` / `f_o`
//! projections. Biases, layer-norm scales/shifts and the MASK row are tallied
//! separately under [`Component::Other`]; the category, item-id and word tables
//! are reported on their own since their size does not depend on the variant.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{day_bucket, Catalog, InteractionSequence, Stamp, SECONDS_PER_DAY};
use crate::embedder::{EmbedderConfig, EmbeddingTables, ItemKey, ItemVocab};
use crate::encoder::{apply_masking, EncoderConfig, EncoderParams};
use crate::error::{GuimError, Result};
use crate::objectives::{cosine, cosine_grad, info_nce_grad, InBatchSampler, DEFAULT_ALPHA};
use crate::tensor::{add_assign, axpy, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantKind {
    /// `C` CLS tokens, one `d`-vector each.
    Guim,
    /// One CLS token, everything widened to `C * d`.
    GuiEdi,
    /// One CLS token plus an `H`-head attention layer producing `H` vectors.
    GuimMh,
}

impl VariantKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::Guim => "guim",
            VariantKind::GuiEdi => "gui-edi",
            VariantKind::GuimMh => "guim-mh",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for VariantKind {
    type Err = GuimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "guim" => Ok(VariantKind::Guim),
            "gui-edi" | "edi" => Ok(VariantKind::GuiEdi),
            "guim-mh" | "mh" => Ok(VariantKind::GuimMh),
            other => Err(GuimError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Everything needed to build a model. `count` is `C` for GUIM / GUI-EDI and
/// `H` for GUIM-MH.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: VariantKind,
    pub d: usize,
    pub count: usize,
    pub layers: usize,
    /// Attention heads at width `d`; GUI-EDI scales this with `C` so the head
    /// width stays fixed.
    pub heads: usize,
    pub d_c: usize,
    pub d_i: usize,
    pub d_w: usize,
    pub top_x: usize,
    pub num_categories: usize,
    pub word_vocab_size: usize,
    pub time_rows: usize,
    pub mask_prob: f64,
    pub max_len: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: VariantKind::Guim,
            d: 16,
            count: 1,
            layers: 1,
            heads: 2,
            d_c: 8,
            d_i: 8,
            d_w: 8,
            top_x: 1_000,
            num_categories: 64,
            word_vocab_size: 512,
            time_rows: 366,
            mask_prob: 0.15,
            max_len: 64,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Production dimensions: d = 128, three layers, X = 200k item ids,
    /// ~10k categories, 530k title words, a one-year daily time table.
    pub fn production(variant: VariantKind, count: usize) -> Self {
        Self {
            variant,
            d: 128,
            count,
            layers: 3,
            heads: 2,
            d_c: 128,
            d_i: 128,
            d_w: 32,
            top_x: 200_000,
            num_categories: 10_000,
            word_vocab_size: 530_000,
            time_rows: 366,
            max_len: 512,
            ..Self::default()
        }
    }

    pub fn d_model(&self) -> usize {
        match self.variant {
            VariantKind::GuiEdi => self.count * self.d,
            _ => self.d,
        }
    }

    pub fn num_cls(&self) -> usize {
        match self.variant {
            VariantKind::Guim => self.count,
            _ => 1,
        }
    }

    /// Number of vectors in a user representation.
    pub fn num_user_vectors(&self) -> usize {
        match self.variant {
            VariantKind::GuiEdi => 1,
            _ => self.count,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads * self.d_model() / self.d
    }

    /// Days covered by the time table (one row is the CLS `t_0`).
    pub fn window_days(&self) -> u32 {
        (self.time_rows - 1) as u32
    }

    pub fn mh_heads(&self) -> Option<usize> {
        (self.variant == VariantKind::GuimMh).then_some(self.count)
    }

    pub fn embedder_config(&self) -> EmbedderConfig {
        EmbedderConfig {
            d_c: self.d_c,
            d_i: self.d_i,
            d_w: self.d_w,
            d: self.d_model(),
            top_x: self.top_x,
            num_categories: self.num_categories,
            word_vocab_size: self.word_vocab_size,
            time_rows: self.time_rows,
            num_cls: self.num_cls(),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            mask_prob: self.mask_prob,
            ..EncoderConfig::new(self.layers, self.d_model(), self.num_heads(), self.max_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.count == 0 || self.heads == 0 {
            return Err(GuimError::Config("d, C/H and heads must be positive".into()));
        }
        if self.time_rows < 2 {
            return Err(GuimError::Config("time_rows must be at least 2".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(GuimError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.max_len <= self.num_cls() {
            return Err(GuimError::Config(format!(
                "max_len {} leaves no room after {} CLS tokens",
                self.max_len,
                self.num_cls()
            )));
        }
        self.embedder_config().validate()?;
        self.encoder_config().validate()
    }

    /// Flat `key=value` pairs; [`ModelConfig::from_pairs`] reads them back.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("d", self.d.to_string()),
            ("c", self.count.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_c", self.d_c.to_string()),
            ("d_i", self.d_i.to_string()),
            ("d_w", self.d_w.to_string()),
            ("top_x", self.top_x.to_string()),
            ("num_categories", self.num_categories.to_string()),
            ("word_vocab_size", self.word_vocab_size.to_string()),
            ("time_rows", self.time_rows.to_string()),
            ("mask_prob", self.mask_prob.to_string()),
            ("max_len", self.max_len.to_string()),
            ("alpha", self.alpha.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 16] = [
        "variant",
        "d",
        "c",
        "layers",
        "heads",
        "d_c",
        "d_i",
        "d_w",
        "top_x",
        "num_categories",
        "word_vocab_size",
        "time_rows",
        "mask_prob",
        "max_len",
        "alpha",
        "seed",
    ];

    /// Applies recognised keys on top of `self`; unknown keys are ignored here
    /// and rejected by the config-file layer.
    pub fn apply_pairs<'a>(mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| GuimError::Config(format!("invalid value `{v}` for key `{key}`")))
        }
        for (k, v) in pairs {
            match k {
                "variant" => self.variant = v.parse()?,
                "d" => self.d = num(k, v)?,
                "c" | "h" | "c_or_h" => self.count = num(k, v)?,
                "layers" | "l" => self.layers = num(k, v)?,
                "heads" | "num_heads" => self.heads = num(k, v)?,
                "d_c" => self.d_c = num(k, v)?,
                "d_i" => self.d_i = num(k, v)?,
                "d_w" => self.d_w = num(k, v)?,
                "top_x" => self.top_x = num(k, v)?,
                "num_categories" => self.num_categories = num(k, v)?,
                "word_vocab_size" => self.word_vocab_size = num(k, v)?,
                "time_rows" => self.time_rows = num(k, v)?,
                "mask_prob" => self.mask_prob = num(k, v)?,
                "max_len" => self.max_len = num(k, v)?,
                "alpha" => self.alpha = num(k, v)?,
                "seed" => self.seed = num(k, v)?,
                _ => {}
            }
        }
        Ok(self)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let cfg = Self::default().apply_pairs(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which row of the parameter breakdown a stored array belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    FjProjection,
    TimeTable,
    ClsTable,
    Transformer,
    FuProjection,
    FoProjection,
    CategoryTable,
    ItemIdTable,
    WordTable,
    MhAttention,
    /// Biases, layer-norm parameters and the MASK row.
    Other,
}

impl Component {
    pub fn label(&self) -> &'static str {
        match self {
            Component::FjProjection => "Final projection matrix in f_j()",
            Component::TimeTable => "Embedding table in f_t()",
            Component::ClsTable => "Embedding table in f_cls()",
            Component::Transformer => "Transformer layers",
            Component::FuProjection => "Projection matrix in f_u()",
            Component::FoProjection => "Projection matrix in f_o()",
            Component::CategoryTable => "Category-id embedding table",
            Component::ItemIdTable => "Item-id embedding table",
            Component::WordTable => "Word embedding table",
            Component::MhAttention => "Multi-head user attention",
            Component::Other => "Biases, layer norms, MASK row",
        }
    }

    pub const HEADLINE: [Component; 6] = [
        Component::FjProjection,
        Component::TimeTable,
        Component::ClsTable,
        Component::Transformer,
        Component::FuProjection,
        Component::FoProjection,
    ];
}

/// A named view of one stored parameter array.
#[derive(Clone, Debug)]
pub struct Block<'a> {
    pub name: Cow<'static, str>,
    pub component: Component,
    pub matrix: &'a Matrix,
}

impl<'a> Block<'a> {
    pub(crate) fn new(name: &'static str, component: Component, matrix: &'a Matrix) -> Self {
        Self {
            name: Cow::Borrowed(name),
            component,
            matrix,
        }
    }

    pub(crate) fn named(name: String, component: Component, matrix: &'a Matrix) -> Self {
        Self {
            name: Cow::Owned(name),
            component,
            matrix,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParameterCounts {
    counts: BTreeMap<Component, usize>,
}

impl ParameterCounts {
    pub fn get(&self, c: Component) -> usize {
        self.counts.get(&c).copied().unwrap_or(0)
    }

    fn add(&mut self, c: Component, n: usize) {
        *self.counts.entry(c).or_default() += n;
    }

    /// Sum of the six headline rows (see the module docs).
    pub fn headline_total(&self) -> usize {
        Component::HEADLINE.iter().map(|&c| self.get(c)).sum()
    }

    pub fn lookup_tables_total(&self) -> usize {
        self.get(Component::CategoryTable) + self.get(Component::ItemIdTable) + self.get(Component::WordTable)
    }

    /// Every stored scalar.
    pub fn stored_total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Component, usize)> + '_ {
        self.counts.iter().map(|(&c, &n)| (c, n))
    }
}

/// Closed-form parameter counts for a configuration; nothing is allocated.
pub fn count_parameters(cfg: &ModelConfig) -> ParameterCounts {
    let dm = cfg.d_model();
    let enc = cfg.encoder_config();
    let emb = cfg.embedder_config();
    let mut p = ParameterCounts::default();
    p.add(Component::FjProjection, emb.concat_width() * dm);
    p.add(Component::TimeTable, cfg.time_rows * dm);
    p.add(Component::ClsTable, cfg.num_cls() * dm);
    p.add(Component::Transformer, cfg.layers * enc.weights_per_layer());
    p.add(Component::FuProjection, dm * dm);
    p.add(Component::FoProjection, dm * dm);
    p.add(Component::CategoryTable, cfg.num_categories * cfg.d_c);
    p.add(Component::ItemIdTable, (cfg.top_x + 1) * cfg.d_i);
    p.add(Component::WordTable, cfg.word_vocab_size * cfg.d_w);
    if let Some(h) = cfg.mh_heads() {
        p.add(Component::MhAttention, 3 * h * dm * dm);
    }
    // fj bias + MASK row + f_o / f_u biases, then per layer: 4 attention
    // biases, 2 layer norms (scale + shift), FFN biases.
    let per_layer = 4 * dm + 4 * dm + enc.intermediate + dm;
    p.add(Component::Other, 4 * dm + cfg.layers * per_layer);
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tables: EmbeddingTables,
    pub encoder: EncoderParams,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            tables: self.tables.zeros_like(),
            encoder: self.encoder.zeros_like(),
        }
    }

    /// Every stored array in declaration order.
    pub fn blocks(&self) -> Vec<Block<'_>> {
        let mut out = self.tables.blocks();
        out.extend(self.encoder.blocks());
        out
    }

    /// Mutable arrays in the same order as [`ModelParams::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.tables.blocks_mut();
        out.extend(self.encoder.blocks_mut());
        out
    }

    /// Counts by inspecting the stored arrays.
    pub fn tally(&self) -> ParameterCounts {
        let mut p = ParameterCounts::default();
        for b in self.blocks() {
            p.add(b.component, b.matrix.len());
        }
        p
    }

    /// Name of the first block holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.blocks()
            .into_iter()
            .find(|b| !b.matrix.is_finite())
            .map(|b| b.name.into_owned())
    }

    pub fn fill(&mut self, v: f64) {
        for m in self.blocks_mut() {
            m.fill(v);
        }
    }
}

/// Resolved table rows for every catalog item, aligned with `catalog.items()`.
#[derive(Clone, Debug)]
pub struct PreparedCatalog {
    keys: Vec<ItemKey>,
    ids: Vec<u64>,
}

impl PreparedCatalog {
    pub fn new(catalog: &Catalog, vocab: &ItemVocab) -> Self {
        Self {
            keys: catalog.items().iter().map(|it| vocab.resolve(it)).collect(),
            ids: catalog.items().iter().map(|it| it.item_id).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, pos: usize) -> &ItemKey {
        &self.keys[pos]
    }

    pub fn item_id(&self, pos: usize) -> u64 {
        self.ids[pos]
    }
}

/// One user's sequence mapped to catalog positions and time buckets.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSequence {
    pub user_id: u64,
    /// Pre-cutoff items (catalog positions), oldest first, truncated to the
    /// most recent `max_len - num_cls`.
    pub items: Vec<usize>,
    pub buckets: Vec<usize>,
    /// Post-cutoff items inside the target window.
    pub targets: Vec<usize>,
}

impl PreparedSequence {
    /// Every item occurrence, used as the in-batch negative pool.
    pub fn occurrences(&self) -> Vec<usize> {
        self.items.iter().chain(&self.targets).copied().collect()
    }
}

/// Maps a sequence into model inputs using the window `[cutoff - D1, cutoff)`
/// for inputs and `[cutoff, cutoff + post_days)` for targets. Unknown item ids
/// are a lookup error.
pub fn prepare_sequence(
    seq: &InteractionSequence,
    catalog: &Catalog,
    cfg: &ModelConfig,
    cutoff: i64,
) -> Result<PreparedSequence> {
    seq.check_sorted()?;
    let days = cfg.window_days();
    let start = cutoff - days as i64 * SECONDS_PER_DAY;
    let end = cutoff + seq.window.post_seconds();
    let resolve = |id: u64| {
        catalog.position(id).ok_or(GuimError::Lookup {
            table: "catalog",
            index: id as usize,
            size: catalog.len(),
        })
    };
    let mut items = Vec::new();
    let mut buckets = Vec::new();
    let mut targets = Vec::new();
    for a in &seq.interactions {
        if a.timestamp < start || a.timestamp >= end {
            continue;
        }
        if a.timestamp < cutoff {
            items.push(resolve(a.item_id)?);
            buckets.push(day_bucket(Stamp::At(a.timestamp), cutoff, days)?);
        } else {
            targets.push(resolve(a.item_id)?);
        }
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
        targets,
    })
}

/// Random choices for one sequence of a batch: masked positions and the
/// negatives of every MLM and matching task (all catalog positions).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequencePlan {
    pub masked: Vec<usize>,
    pub mlm_negatives: Vec<Vec<usize>>,
    pub match_negatives: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchPlan {
    pub sequences: Vec<SequencePlan>,
}

/// Draws masks and in-batch negatives for every sequence, in batch order.
pub fn draw_plan<R: Rng>(batch: &[PreparedSequence], mask_prob: f64, k: usize, rng: &mut R) -> Result<BatchPlan> {
    if k == 0 {
        return Err(GuimError::Config("K must be at least 1".into()));
    }
    let occurrences: Vec<Vec<usize>> = batch.iter().map(PreparedSequence::occurrences).collect();
    let sampler = InBatchSampler::new(&occurrences)?;
    let mut sequences = Vec::with_capacity(batch.len());
    for (i, seq) in batch.iter().enumerate() {
        let masked = apply_masking(seq.items.len(), mask_prob, rng);
        let mlm_negatives = masked
            .iter()
            .map(|&p| sampler.sample(i, seq.items[p], k, rng))
            .collect::<Result<Vec<_>>>()?;
        let match_negatives = seq
            .targets
            .iter()
            .map(|&t| sampler.sample(i, t, k, rng))
            .collect::<Result<Vec<_>>>()?;
        sequences.push(SequencePlan {
            masked,
            mlm_negatives,
            match_negatives,
        });
    }
    Ok(BatchPlan { sequences })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Per-sequence model outputs needed by the objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub user_rep: Vec<Vec<f64>>,
    /// One entry per post-cutoff target.
    pub matching: Vec<Candidates>,
    /// `o_n` at each masked position.
    pub mlm_contexts: Vec<Vec<f64>>,
    pub mlm: Vec<Candidates>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub matching: f64,
    pub mlm: f64,
    pub matching_tasks: usize,
    pub mlm_tasks: usize,
    /// Smallest gap between the best and second-best cosine in any max-score;
    /// infinite with a single user vector.
    pub min_argmax_gap: f64,
    /// Hash of every max-score argmax in evaluation order.
    pub argmax_signature: u64,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.matching + self.mlm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Builds a model with every parameter drawn from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tables = EmbeddingTables::init(&cfg.embedder_config(), &mut rng);
    let encoder = EncoderParams::init(&cfg.encoder_config(), cfg.mh_heads(), &mut rng)?;
    Ok(Model {
        config: cfg.clone(),
        params: ModelParams { tables, encoder },
    })
}

struct BatchItems {
    positions: Vec<usize>,
    rows: HashMap<usize, usize>,
}

impl BatchItems {
    fn collect(batch: &[PreparedSequence], plan: &BatchPlan) -> Self {
        let mut set = BTreeSet::new();
        for (seq, sp) in batch.iter().zip(&plan.sequences) {
            set.extend(seq.items.iter().copied());
            set.extend(seq.targets.iter().copied());
            for negs in sp.mlm_negatives.iter().chain(&sp.match_negatives) {
                set.extend(negs.iter().copied());
            }
        }
        let positions: Vec<usize> = set.into_iter().collect();
        let rows = positions.iter().enumerate().map(|(r, &p)| (p, r)).collect();
        Self { positions, rows }
    }

    fn row(&self, pos: usize) -> usize {
        self.rows[&pos]
    }
}

/// Gradient contributions of one sequence, reduced in batch order.
struct SeqGrads {
    encoder: EncoderParams,
    time: Matrix,
    cls: Matrix,
    dv: Vec<(usize, Vec<f64>)>,
}

const SIGNATURE_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const SIGNATURE_PRIME: u64 = 0x100_0000_01b3;

impl LossReport {
    fn empty() -> Self {
        Self {
            min_argmax_gap: f64::INFINITY,
            argmax_signature: SIGNATURE_BASIS,
            ..Self::default()
        }
    }

    fn merge(&mut self, other: &LossReport) {
        self.matching += other.matching;
        self.mlm += other.mlm;
        self.matching_tasks += other.matching_tasks;
        self.mlm_tasks += other.mlm_tasks;
        self.min_argmax_gap = self.min_argmax_gap.min(other.min_argmax_gap);
        self.argmax_signature = (self.argmax_signature ^ other.argmax_signature).wrapping_mul(SIGNATURE_PRIME);
    }
}

impl Model {
    pub fn num_heads(&self) -> usize {
        self.config.num_heads()
    }

    pub fn prepare(&self, seq: &InteractionSequence, catalog: &Catalog) -> Result<PreparedSequence> {
        prepare_sequence(seq, catalog, &self.config, seq.cutoff)
    }

    /// Item embeddings `v_j` for the given catalog positions.
    pub fn item_embeddings(&self, catalog: &PreparedCatalog, positions: &[usize]) -> Result<Matrix> {
        let keys: Vec<ItemKey> = positions.iter().map(|&p| catalog.key(p).clone()).collect();
        Ok(self.params.tables.embed_items(&keys)?.0)
    }

    /// Input rows: CLS tokens fused with `t_0`, then pre-cutoff items (or the
    /// MASK row) fused with their day embedding.
    fn fused_inputs(&self, seq: &PreparedSequence, masked: &[bool], vrow: impl Fn(usize) -> Vec<f64>) -> Result<Matrix> {
        let t = &self.params.tables;
        let ncls = self.config.num_cls();
        let dm = self.config.d_model();
        let mut x = Matrix::zeros(ncls + seq.items.len(), dm);
        let t0 = t.embed_time(day_bucket(Stamp::Cls, 0, 1)?)?;
        for c in 0..ncls {
            let row = x.row_mut(c);
            row.copy_from_slice(t.embed_cls(c)?);
            add_assign(row, t0);
        }
        for (n, (&pos, &bucket)) in seq.items.iter().zip(&seq.buckets).enumerate() {
            let time = t.embed_time(bucket)?;
            let row = x.row_mut(ncls + n);
            if masked[n] {
                row.copy_from_slice(self.params.encoder.mask_row.row(0));
            } else {
                row.copy_from_slice(&vrow(pos));
            }
            add_assign(row, time);
        }
        Ok(x)
    }

    /// User vectors for a sequence without masking.
    pub fn user_representation(&self, catalog: &PreparedCatalog, seq: &PreparedSequence) -> Result<Vec<Vec<f64>>> {
        let keys: Vec<ItemKey> = seq.items.iter().map(|&p| catalog.key(p).clone()).collect();
        let (v, _) = self.params.tables.embed_items(&keys)?;
        let masked = vec![false; seq.items.len()];
        let x = self.fused_inputs(seq, &masked, |pos| {
            let i = seq.items.iter().position(|&p| p == pos).expect("item in sequence");
            v.row(i).to_vec()
        })?;
        let enc = &self.params.encoder;
        let (h, _) = enc.encode(&x, self.num_heads(), None);
        let u_in = match &enc.mh {
            Some(mh) => mh.forward(&h, None).0,
            None => h.gather_rows(&(0..self.config.num_cls()).collect::<Vec<_>>()),
        };
        Ok(enc.f_u.forward(&u_in).0.to_rows())
    }

    /// Forward pass over a batch with a fixed plan; returns the vectors the
    /// objectives consume.
    pub fn forward(&self, catalog: &PreparedCatalog, batch: &[PreparedSequence], plan: &BatchPlan) -> Result<Vec<ForwardOutput>> {
        let mut outputs = Vec::with_capacity(batch.len());
        self.run_batch(catalog, batch, plan, None, Some(&mut outputs))?;
        Ok(outputs)
    }

    /// Summed matching and MLM losses; when `grads` is given, accumulates the
    /// exact gradient of their sum into it.
    pub fn loss_and_grad(
        &self,
        catalog: &PreparedCatalog,
        batch: &[PreparedSequence],
        plan: &BatchPlan,
        grads: Option<&mut ModelParams>,
    ) -> Result<LossReport> {
        self.run_batch(catalog, batch, plan, grads, None)
    }

    fn run_batch(
        &self,
        catalog: &PreparedCatalog,
        batch: &[PreparedSequence],
        plan: &BatchPlan,
        grads: Option<&mut ModelParams>,
        mut outputs: Option<&mut Vec<ForwardOutput>>,
    ) -> Result<LossReport> {
        if plan.sequences.len() != batch.len() {
            return Err(GuimError::LengthMismatch {
                left: plan.sequences.len(),
                right: batch.len(),
            });
        }
        let items = BatchItems::collect(batch, plan);
        let keys: Vec<ItemKey> = items.positions.iter().map(|&p| catalog.key(p).clone()).collect();
        let (vbatch, vcache) = self.params.tables.embed_items(&keys)?;
        let want_grad = grads.is_some();
        let passes: Vec<Result<(ForwardOutput, LossReport, Option<SeqGrads>)>> = batch
            .par_iter()
            .zip(&plan.sequences)
            .map(|(seq, sp)| self.sequence_pass(seq, sp, &items, &vbatch, want_grad))
            .collect();
        let mut report = LossReport::empty();
        let mut dv = Matrix::zeros(vbatch.rows(), vbatch.cols());
        let mut grads = grads;
        for pass in passes {
            let (out, r, sg) = pass?;
            report.merge(&r);
            if let Some(outs) = outputs.as_deref_mut() {
                outs.push(out);
            }
            if let (Some(g), Some(sg)) = (grads.as_deref_mut(), sg) {
                for (dst, src) in g.encoder.blocks_mut().into_iter().zip(sg.encoder.blocks()) {
                    add_assign(dst.as_mut_slice(), src.matrix.as_slice());
                }
                add_assign(g.tables.time.as_mut_slice(), sg.time.as_slice());
                add_assign(g.tables.cls.as_mut_slice(), sg.cls.as_slice());
                for (row, d) in sg.dv {
                    add_assign(dv.row_mut(row), &d);
                }
            }
        }
        if let Some(g) = grads {
            self.params
                .tables
                .embed_items_backward(&keys, &vcache, &dv, &mut g.tables);
        }
        Ok(report)
    }

    fn sequence_pass(
        &self,
        seq: &PreparedSequence,
        plan: &SequencePlan,
        items: &BatchItems,
        vbatch: &Matrix,
        want_grad: bool,
    ) -> Result<(ForwardOutput, LossReport, Option<SeqGrads>)> {
        let mut report = LossReport::empty();
        let cfg = &self.config;
        let alpha = cfg.alpha;
        let enc = &self.params.encoder;
        let ncls = cfg.num_cls();
        let dm = cfg.d_model();

        let mut masked = vec![false; seq.items.len()];
        for &m in &plan.masked {
            masked[m] = true;
        }
        let x = self.fused_inputs(seq, &masked, |pos| vbatch.row(items.row(pos)).to_vec())?;
        let (h, caches) = enc.encode(&x, self.num_heads(), None);

        let (u_in, mh_cache) = match &enc.mh {
            Some(mh) => {
                let (z, c) = mh.forward(&h, None);
                (z, Some(c))
            }
            None => (h.gather_rows(&(0..ncls).collect::<Vec<_>>()), None),
        };
        let (u, u_pre) = enc.f_u.forward(&u_in);
        let ctx_rows: Vec<usize> = plan.masked.iter().map(|&m| ncls + m).collect();
        let o_in = h.gather_rows(&ctx_rows);
        let (o, o_pre) = enc.f_o.forward(&o_in);

        let mut du = Matrix::zeros(u.rows(), dm);
        let mut do_ = Matrix::zeros(o.rows(), dm);
        let mut dv_local: Vec<(usize, Vec<f64>)> = Vec::new();

        // Matching: score_max over the user vectors, gradient through the argmax.
        let mut out = ForwardOutput {
            user_rep: u.to_rows(),
            matching: Vec::with_capacity(seq.targets.len()),
            mlm_contexts: o.to_rows(),
            mlm: Vec::with_capacity(plan.masked.len()),
        };
        for (t, negs) in seq.targets.iter().zip(&plan.match_negatives) {
            let cands: Vec<usize> = std::iter::once(*t).chain(negs.iter().copied()).collect();
            let mut scores = Vec::with_capacity(cands.len());
            let mut arg = Vec::with_capacity(cands.len());
            for &cpos in &cands {
                let v = vbatch.row(items.row(cpos));
                let mut best = (f64::NEG_INFINITY, 0usize);
                let mut second = f64::NEG_INFINITY;
                for c in 0..u.rows() {
                    let s = cosine(u.row(c), v)?;
                    if s > best.0 {
                        second = best.0;
                        best = (s, c);
                    } else if s > second {
                        second = s;
                    }
                }
                report.min_argmax_gap = report.min_argmax_gap.min(best.0 - second);
                report.argmax_signature = (report.argmax_signature ^ best.1 as u64).wrapping_mul(SIGNATURE_PRIME);
                scores.push(alpha * best.0);
                arg.push(best.1);
            }
            let (loss, dscores) = info_nce_grad(&scores);
            report.matching += loss;
            report.matching_tasks += 1;
            if want_grad {
                for ((&cpos, &c), &ds) in cands.iter().zip(&arg).zip(&dscores) {
                    let row = items.row(cpos);
                    let (_, gu, gv) = cosine_grad(u.row(c), vbatch.row(row))?;
                    axpy(du.row_mut(c), alpha * ds, &gu);
                    dv_local.push((row, gv.iter().map(|g| alpha * ds * g).collect()));
                }
            }
            out.matching.push(Candidates {
                positive: vbatch.row(items.row(*t)).to_vec(),
                negatives: negs.iter().map(|&p| vbatch.row(items.row(p)).to_vec()).collect(),
            });
        }

        // MLM: alpha * cos(o_n, v) against the masked item and its negatives.
        for (n, (&m, negs)) in plan.masked.iter().zip(&plan.mlm_negatives).enumerate() {
            let truth = seq.items[m];
            let cands: Vec<usize> = std::iter::once(truth).chain(negs.iter().copied()).collect();
            let scores = cands
                .iter()
                .map(|&cpos| cosine(o.row(n), vbatch.row(items.row(cpos))).map(|c| alpha * c))
                .collect::<Result<Vec<_>>>()?;
            let (loss, dscores) = info_nce_grad(&scores);
            report.mlm += loss;
            report.mlm_tasks += 1;
            if want_grad {
                for (&cpos, &ds) in cands.iter().zip(&dscores) {
                    let row = items.row(cpos);
                    let (_, go, gv) = cosine_grad(o.row(n), vbatch.row(row))?;
                    axpy(do_.row_mut(n), alpha * ds, &go);
                    dv_local.push((row, gv.iter().map(|g| alpha * ds * g).collect()));
                }
            }
            out.mlm.push(Candidates {
                positive: vbatch.row(items.row(truth)).to_vec(),
                negatives: negs.iter().map(|&p| vbatch.row(items.row(p)).to_vec()).collect(),
            });
        }

        if !want_grad {
            return Ok((out, report, None));
        }
        let mut g = SeqGrads {
            encoder: enc.zeros_like(),
            time: Matrix::zeros(self.params.tables.time.rows(), dm),
            cls: Matrix::zeros(ncls, dm),
            dv: dv_local,
        };

        let mut dh = Matrix::zeros(h.rows(), dm);
        let d_o_in = enc.f_o.backward(&o_in, &o_pre, &do_, &mut g.encoder.f_o);
        for (i, &r) in ctx_rows.iter().enumerate() {
            add_assign(dh.row_mut(r), d_o_in.row(i));
        }
        let d_u_in = enc.f_u.backward(&u_in, &u_pre, &du, &mut g.encoder.f_u);
        match (&enc.mh, mh_cache) {
            (Some(mh), Some(cache)) => {
                let gmh = g.encoder.mh.as_mut().expect("gradient mirrors parameters");
                let dhm = mh.backward(&h, &cache, &d_u_in, gmh);
                add_assign(dh.as_mut_slice(), dhm.as_slice());
            }
            _ => {
                for c in 0..ncls {
                    add_assign(dh.row_mut(c), d_u_in.row(c));
                }
            }
        }
        let dx = enc.encode_backward(dh, &caches, &mut g.encoder);

        for c in 0..ncls {
            add_assign(g.cls.row_mut(c), dx.row(c));
            add_assign(g.time.row_mut(0), dx.row(c));
        }
        for (n, (&pos, &bucket)) in seq.items.iter().zip(&seq.buckets).enumerate() {
            let d = dx.row(ncls + n);
            add_assign(g.time.row_mut(bucket), d);
            if masked[n] {
                add_assign(g.encoder.mask_row.row_mut(0), d);
            } else {
                g.dv.push((items.row(pos), d.to_vec()));
            }
        }
        Ok((out, report, Some(g)))
    }
}
