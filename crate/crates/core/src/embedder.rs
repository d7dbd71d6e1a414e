//! Item & time embedding layer.
//!
//! An item's embedding concatenates its category row, its item-id row (top-X
//! popular ids own a row, everything else shares the OOV row) and the mean of
//! its title-word rows, then applies one GELU-activated linear layer.

use std::collections::HashMap;

use rand::Rng;

use crate::corpus::{Catalog, ItemRecord};
use crate::error::{GuimError, Result};
use crate::model::{Block, Component};
use crate::tensor::{add_column_sums, gelu, gelu_grad, gemm, Matrix};

/// Half-width of the uniform initializer for lookup tables.
pub const TABLE_INIT_SCALE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedderConfig {
    pub d_c: usize,
    pub d_i: usize,
    pub d_w: usize,
    /// Output width of the item embedder and of the time / CLS rows.
    pub d: usize,
    pub top_x: usize,
    pub num_categories: usize,
    pub word_vocab_size: usize,
    pub time_rows: usize,
    pub num_cls: usize,
}

impl EmbedderConfig {
    pub fn concat_width(&self) -> usize {
        self.d_c + self.d_i + self.d_w
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_c", self.d_c),
            ("d_i", self.d_i),
            ("d_w", self.d_w),
            ("d", self.d),
            ("top_x", self.top_x),
            ("num_categories", self.num_categories),
            ("word_vocab_size", self.word_vocab_size),
            ("time_rows", self.time_rows),
            ("num_cls", self.num_cls),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(GuimError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Item id to item-id-table row; ids outside the top-X set share row `top_x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemVocab {
    rows: HashMap<u64, usize>,
    top_x: usize,
}

impl ItemVocab {
    pub fn top_x(&self) -> usize {
        self.top_x
    }

    pub fn oov_row(&self) -> usize {
        self.top_x
    }

    pub fn row(&self, item_id: u64) -> usize {
        self.rows.get(&item_id).copied().unwrap_or(self.top_x)
    }

    /// Ids that own a dedicated row, in row order.
    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<_> = self.rows.iter().map(|(&id, &r)| (r, id)).collect();
        ids.sort_unstable();
        ids.into_iter().map(|(_, id)| id).collect()
    }

    pub fn from_ids(ids: &[u64], top_x: usize) -> Result<Self> {
        if top_x == 0 {
            return Err(GuimError::Config("top_x must be positive".into()));
        }
        if ids.len() > top_x {
            return Err(GuimError::Config(format!("{} ids exceed top_x = {top_x}", ids.len())));
        }
        let rows = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Ok(Self { rows, top_x })
    }

    pub fn resolve(&self, item: &ItemRecord) -> ItemKey {
        ItemKey {
            category: item.category_id as usize,
            id_row: self.row(item.item_id),
            words: item.title_tokens.iter().map(|&w| w as usize).collect(),
        }
    }
}

/// Builds the top-X vocabulary from purchase counts aligned with
/// `catalog.items()`. Ties go to the smaller item id.
pub fn build_item_vocab(catalog: &Catalog, purchase_counts: &[u64], top_x: usize) -> Result<ItemVocab> {
    if top_x == 0 {
        return Err(GuimError::Config("top_x must be positive".into()));
    }
    if purchase_counts.len() != catalog.len() {
        return Err(GuimError::LengthMismatch {
            left: purchase_counts.len(),
            right: catalog.len(),
        });
    }
    let mut ranked: Vec<(u64, u64)> = catalog
        .items()
        .iter()
        .zip(purchase_counts)
        .map(|(it, &c)| (it.item_id, c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let ids: Vec<u64> = ranked.iter().take(top_x).map(|(id, _)| *id).collect();
    ItemVocab::from_ids(&ids, top_x)
}

/// Table rows describing one item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemKey {
    pub category: usize,
    pub id_row: usize,
    pub words: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub category: Matrix,
    pub item_id: Matrix,
    pub word: Matrix,
    /// `(d_c + d_i + d_w) x d`
    pub fj_weight: Matrix,
    pub fj_bias: Matrix,
    pub time: Matrix,
    pub cls: Matrix,
}

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::uniform(rows, cols, a, rng)
}

pub(crate) fn dense_init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    xavier(rows, cols, rng)
}

impl EmbeddingTables {
    pub fn init<R: Rng>(cfg: &EmbedderConfig, rng: &mut R) -> Self {
        let s = TABLE_INIT_SCALE;
        Self {
            category: Matrix::uniform(cfg.num_categories, cfg.d_c, s, rng),
            item_id: Matrix::uniform(cfg.top_x + 1, cfg.d_i, s, rng),
            word: Matrix::uniform(cfg.word_vocab_size, cfg.d_w, s, rng),
            fj_weight: xavier(cfg.concat_width(), cfg.d, rng),
            fj_bias: Matrix::zeros(1, cfg.d),
            time: Matrix::uniform(cfg.time_rows, cfg.d, s, rng),
            cls: Matrix::uniform(cfg.num_cls, cfg.d, s, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            category: z(&self.category),
            item_id: z(&self.item_id),
            word: z(&self.word),
            fj_weight: z(&self.fj_weight),
            fj_bias: z(&self.fj_bias),
            time: z(&self.time),
            cls: z(&self.cls),
        }
    }

    pub fn d(&self) -> usize {
        self.fj_weight.cols()
    }

    pub(crate) fn blocks(&self) -> Vec<Block<'_>> {
        vec![
            Block::new("category_table", Component::CategoryTable, &self.category),
            Block::new("item_id_table", Component::ItemIdTable, &self.item_id),
            Block::new("word_table", Component::WordTable, &self.word),
            Block::new("fj.weight", Component::FjProjection, &self.fj_weight),
            Block::new("fj.bias", Component::Other, &self.fj_bias),
            Block::new("time_table", Component::TimeTable, &self.time),
            Block::new("cls_table", Component::ClsTable, &self.cls),
        ]
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.category,
            &mut self.item_id,
            &mut self.word,
            &mut self.fj_weight,
            &mut self.fj_bias,
            &mut self.time,
            &mut self.cls,
        ]
    }

    fn check_key(&self, key: &ItemKey) -> Result<()> {
        let checks = [
            ("category_table", key.category, self.category.rows()),
            ("item_id_table", key.id_row, self.item_id.rows()),
        ];
        for (table, index, size) in checks {
            if index >= size {
                return Err(GuimError::Lookup { table, index, size });
            }
        }
        if let Some(&w) = key.words.iter().find(|&&w| w >= self.word.rows()) {
            return Err(GuimError::Lookup {
                table: "word_table",
                index: w,
                size: self.word.rows(),
            });
        }
        Ok(())
    }

    fn concat_into(&self, key: &ItemKey, out: &mut [f64]) {
        let (dc, di) = (self.category.cols(), self.item_id.cols());
        out[..dc].copy_from_slice(self.category.row(key.category));
        out[dc..dc + di].copy_from_slice(self.item_id.row(key.id_row));
        let words = &mut out[dc + di..];
        words.iter_mut().for_each(|x| *x = 0.0);
        if !key.words.is_empty() {
            for &w in &key.words {
                crate::tensor::add_assign(words, self.word.row(w));
            }
            let inv = 1.0 / key.words.len() as f64;
            words.iter_mut().for_each(|x| *x *= inv);
        }
    }

    /// `GELU(concat(category, item_id, mean(words)) W + b)`.
    pub fn embed_item(&self, key: &ItemKey) -> Result<Vec<f64>> {
        let (v, _) = self.embed_items(std::slice::from_ref(key))?;
        Ok(v.row(0).to_vec())
    }

    /// Batched item embedding; the cache feeds [`EmbeddingTables::embed_items_backward`].
    pub fn embed_items(&self, keys: &[ItemKey]) -> Result<(Matrix, ItemEmbedCache)> {
        let width = self.fj_weight.rows();
        let d = self.d();
        let mut concat = Matrix::zeros(keys.len(), width);
        for (i, key) in keys.iter().enumerate() {
            self.check_key(key)?;
            self.concat_into(key, concat.row_mut(i));
        }
        let mut pre = Matrix::zeros(keys.len(), d);
        gemm(
            keys.len(),
            width,
            d,
            1.0,
            concat.as_slice(),
            false,
            self.fj_weight.as_slice(),
            false,
            0.0,
            pre.as_mut_slice(),
        );
        pre.add_row_bias(self.fj_bias.as_slice());
        let mut out = pre.clone();
        out.as_mut_slice().iter_mut().for_each(|x| *x = gelu(*x));
        Ok((out, ItemEmbedCache { concat, pre }))
    }

    /// Accumulates table and projection gradients from `dv` (one row per key).
    pub fn embed_items_backward(
        &self,
        keys: &[ItemKey],
        cache: &ItemEmbedCache,
        dv: &Matrix,
        grads: &mut EmbeddingTables,
    ) {
        let width = self.fj_weight.rows();
        let d = self.d();
        let n = keys.len();
        let mut dpre = dv.clone();
        for (g, &x) in dpre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *g *= gelu_grad(x);
        }
        gemm(
            width,
            n,
            d,
            1.0,
            cache.concat.as_slice(),
            true,
            dpre.as_slice(),
            false,
            1.0,
            grads.fj_weight.as_mut_slice(),
        );
        add_column_sums(grads.fj_bias.as_mut_slice(), dpre.as_slice(), d);
        let mut dconcat = Matrix::zeros(n, width);
        gemm(
            n,
            d,
            width,
            1.0,
            dpre.as_slice(),
            false,
            self.fj_weight.as_slice(),
            true,
            0.0,
            dconcat.as_mut_slice(),
        );
        let (dc, di) = (self.category.cols(), self.item_id.cols());
        for (i, key) in keys.iter().enumerate() {
            let g = dconcat.row(i);
            crate::tensor::add_assign(grads.category.row_mut(key.category), &g[..dc]);
            crate::tensor::add_assign(grads.item_id.row_mut(key.id_row), &g[dc..dc + di]);
            if !key.words.is_empty() {
                let inv = 1.0 / key.words.len() as f64;
                for &w in &key.words {
                    crate::tensor::axpy(grads.word.row_mut(w), inv, &g[dc + di..]);
                }
            }
        }
    }

    pub fn embed_time(&self, bucket: usize) -> Result<&[f64]> {
        if bucket >= self.time.rows() {
            return Err(GuimError::Lookup {
                table: "time_table",
                index: bucket,
                size: self.time.rows(),
            });
        }
        Ok(self.time.row(bucket))
    }

    pub fn embed_cls(&self, c: usize) -> Result<&[f64]> {
        if c >= self.cls.rows() {
            return Err(GuimError::Lookup {
                table: "cls_table",
                index: c,
                size: self.cls.rows(),
            });
        }
        Ok(self.cls.row(c))
    }
}

#[derive(Clone, Debug)]
pub struct ItemEmbedCache {
    concat: Matrix,
    pre: Matrix,
}
