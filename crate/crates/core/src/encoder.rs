//! Masking & time fusion, the post-LN transformer stack, the `f_o` / `f_u`
//! output projections, and the extra multi-head attention layer of the
//! multi-head baseline.

use rand::Rng;

use crate::embedder::dense_init;
use crate::error::{GuimError, Result};
use crate::model::{Block, Component};
use crate::tensor::{
    add_column_sums, gelu, gelu_grad, gemm, gemm_strided, layer_norm, layer_norm_backward,
    masked_softmax, Matrix, LayerNormCache,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub intermediate: usize,
    /// Maximum number of encoded positions, CLS tokens included.
    pub max_len: usize,
    pub mask_prob: f64,
}

impl EncoderConfig {
    /// BERT-style defaults: intermediate width `4 * d_model`.
    pub fn new(layers: usize, d_model: usize, num_heads: usize, max_len: usize) -> Self {
        Self {
            layers,
            d_model,
            num_heads,
            intermediate: 4 * d_model,
            max_len,
            mask_prob: 0.15,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.intermediate == 0 {
            return Err(GuimError::Config("d_model, num_heads and intermediate must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(GuimError::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(GuimError::Config(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        if self.max_len < 2 {
            return Err(GuimError::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Weight-matrix parameters per layer, `12 * d_model^2` with the 4x FFN.
    pub fn weights_per_layer(&self) -> usize {
        4 * self.d_model * self.d_model + 2 * self.d_model * self.intermediate
    }
}

/// Picks masked positions among `num_items` pre-cutoff items; each is masked
/// independently with probability `mask_prob`.
pub fn apply_masking<R: Rng>(num_items: usize, mask_prob: f64, rng: &mut R) -> Vec<usize> {
    (0..num_items)
        .filter(|_| mask_prob > 0.0 && rng.gen::<f64>() < mask_prob)
        .collect()
}

pub fn fuse_time(embedding: &[f64], time: &[f64]) -> Result<Vec<f64>> {
    if embedding.len() != time.len() {
        return Err(GuimError::LengthMismatch {
            left: embedding.len(),
            right: time.len(),
        });
    }
    Ok(embedding.iter().zip(time).map(|(a, b)| a + b).collect())
}

fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = x.matmul(w);
    out.add_row_bias(b.as_slice());
    out
}

/// Accumulates `dw`, `db`; returns `dx`.
fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix, dw: &mut Matrix, db: &mut Matrix) -> Matrix {
    let (n, din, dout) = (x.rows(), w.rows(), w.cols());
    gemm(din, n, dout, 1.0, x.as_slice(), true, dy.as_slice(), false, 1.0, dw.as_mut_slice());
    add_column_sums(db.as_mut_slice(), dy.as_slice(), dout);
    let mut dx = Matrix::zeros(n, din);
    gemm(n, dout, din, 1.0, dy.as_slice(), false, w.as_slice(), true, 0.0, dx.as_mut_slice());
    dx
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
}

impl LayerParams {
    pub fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let (d, f) = (cfg.d_model, cfg.intermediate);
        Self {
            wq: dense_init(d, d, rng),
            bq: Matrix::zeros(1, d),
            wk: dense_init(d, d, rng),
            bk: Matrix::zeros(1, d),
            wv: dense_init(d, d, rng),
            bv: Matrix::zeros(1, d),
            wo: dense_init(d, d, rng),
            bo: Matrix::zeros(1, d),
            ln1_gamma: Matrix::filled(1, d, 1.0),
            ln1_beta: Matrix::zeros(1, d),
            w1: dense_init(d, f, rng),
            b1: Matrix::zeros(1, f),
            w2: dense_init(f, d, rng),
            b2: Matrix::zeros(1, d),
            ln2_gamma: Matrix::filled(1, d, 1.0),
            ln2_beta: Matrix::zeros(1, d),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            wq: z(&self.wq),
            bq: z(&self.bq),
            wk: z(&self.wk),
            bk: z(&self.bk),
            wv: z(&self.wv),
            bv: z(&self.bv),
            wo: z(&self.wo),
            bo: z(&self.bo),
            ln1_gamma: z(&self.ln1_gamma),
            ln1_beta: z(&self.ln1_beta),
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
            ln2_gamma: z(&self.ln2_gamma),
            ln2_beta: z(&self.ln2_beta),
        }
    }

    fn blocks(&self, layer: usize) -> Vec<Block<'_>> {
        use Component::{Other, Transformer};
        let p = |s: &str| format!("layer{layer}.{s}");
        vec![
            Block::named(p("attn.wq"), Transformer, &self.wq),
            Block::named(p("attn.bq"), Other, &self.bq),
            Block::named(p("attn.wk"), Transformer, &self.wk),
            Block::named(p("attn.bk"), Other, &self.bk),
            Block::named(p("attn.wv"), Transformer, &self.wv),
            Block::named(p("attn.bv"), Other, &self.bv),
            Block::named(p("attn.wo"), Transformer, &self.wo),
            Block::named(p("attn.bo"), Other, &self.bo),
            Block::named(p("ln1.gamma"), Other, &self.ln1_gamma),
            Block::named(p("ln1.beta"), Other, &self.ln1_beta),
            Block::named(p("ffn.w1"), Transformer, &self.w1),
            Block::named(p("ffn.b1"), Other, &self.b1),
            Block::named(p("ffn.w2"), Transformer, &self.w2),
            Block::named(p("ffn.b2"), Other, &self.b2),
            Block::named(p("ln2.gamma"), Other, &self.ln2_gamma),
            Block::named(p("ln2.beta"), Other, &self.ln2_beta),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }

    /// One post-LN encoder layer. `valid[j] == false` removes key `j` from attention.
    pub fn forward(&self, x: &Matrix, num_heads: usize, valid: Option<&[bool]>) -> (Matrix, LayerCache) {
        let (n, d) = (x.rows(), x.cols());
        let dh = d / num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = linear(x, &self.wq, &self.bq);
        let k = linear(x, &self.wk, &self.bk);
        let v = linear(x, &self.wv, &self.bv);
        let mut ctx = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(num_heads);
        for h in 0..num_heads {
            let off = h * dh;
            let mut p = Matrix::zeros(n, n);
            gemm_strided(
                n, dh, n, scale, &q.as_slice()[off..], d, 1, &k.as_slice()[off..], 1, d, 0.0,
                p.as_mut_slice(), n, 1,
            );
            for r in 0..n {
                masked_softmax(p.row_mut(r), valid);
            }
            gemm_strided(
                n, n, dh, 1.0, p.as_slice(), n, 1, &v.as_slice()[off..], d, 1, 0.0,
                &mut ctx.as_mut_slice()[off..], d, 1,
            );
            probs.push(p);
        }
        let mut z1 = linear(&ctx, &self.wo, &self.bo);
        crate::tensor::add_assign(z1.as_mut_slice(), x.as_slice());
        let (y1, ln1) = layer_norm(&z1, self.ln1_gamma.as_slice(), self.ln1_beta.as_slice());
        let pre1 = linear(&y1, &self.w1, &self.b1);
        let mut act1 = pre1.clone();
        act1.as_mut_slice().iter_mut().for_each(|a| *a = gelu(*a));
        let mut z2 = linear(&act1, &self.w2, &self.b2);
        crate::tensor::add_assign(z2.as_mut_slice(), y1.as_slice());
        let (y2, ln2) = layer_norm(&z2, self.ln2_gamma.as_slice(), self.ln2_beta.as_slice());
        let cache = LayerCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            ctx,
            ln1,
            y1,
            pre1,
            act1,
            ln2,
        };
        (y2, cache)
    }

    /// Accumulates parameter gradients into `g`; returns the input gradient.
    pub fn backward(&self, dy: &Matrix, cache: &LayerCache, g: &mut LayerParams) -> Matrix {
        let num_heads = cache.probs.len();
        let (n, d) = (dy.rows(), dy.cols());
        let dh = d / num_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dz2 = layer_norm_backward(
            dy,
            &cache.ln2,
            self.ln2_gamma.as_slice(),
            g.ln2_gamma.as_mut_slice(),
            g.ln2_beta.as_mut_slice(),
        );
        let mut dact1 = linear_backward(&cache.act1, &self.w2, &dz2, &mut g.w2, &mut g.b2);
        for (da, &p) in dact1.as_mut_slice().iter_mut().zip(cache.pre1.as_slice()) {
            *da *= gelu_grad(p);
        }
        let mut dy1 = linear_backward(&cache.y1, &self.w1, &dact1, &mut g.w1, &mut g.b1);
        crate::tensor::add_assign(dy1.as_mut_slice(), dz2.as_slice());

        let dz1 = layer_norm_backward(
            &dy1,
            &cache.ln1,
            self.ln1_gamma.as_slice(),
            g.ln1_gamma.as_mut_slice(),
            g.ln1_beta.as_mut_slice(),
        );
        let dctx = linear_backward(&cache.ctx, &self.wo, &dz1, &mut g.wo, &mut g.bo);

        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut dp = Matrix::zeros(n, n);
        for (h, p) in cache.probs.iter().enumerate() {
            let off = h * dh;
            gemm_strided(
                n, dh, n, 1.0, &dctx.as_slice()[off..], d, 1, &cache.v.as_slice()[off..], 1, d,
                0.0, dp.as_mut_slice(), n, 1,
            );
            gemm_strided(
                n, n, dh, 1.0, p.as_slice(), 1, n, &dctx.as_slice()[off..], d, 1, 1.0,
                &mut dv.as_mut_slice()[off..], d, 1,
            );
            for r in 0..n {
                let pr = p.row(r);
                let row = dp.row_mut(r);
                let s: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, &pv) in row.iter_mut().zip(pr) {
                    *x = pv * (*x - s);
                }
            }
            gemm_strided(
                n, n, dh, scale, dp.as_slice(), n, 1, &cache.k.as_slice()[off..], d, 1, 0.0,
                &mut dq.as_mut_slice()[off..], d, 1,
            );
            gemm_strided(
                n, n, dh, scale, dp.as_slice(), 1, n, &cache.q.as_slice()[off..], d, 1, 0.0,
                &mut dk.as_mut_slice()[off..], d, 1,
            );
        }
        let mut dx = dz1;
        let parts = [
            linear_backward(&cache.x, &self.wq, &dq, &mut g.wq, &mut g.bq),
            linear_backward(&cache.x, &self.wk, &dk, &mut g.wk, &mut g.bk),
            linear_backward(&cache.x, &self.wv, &dv, &mut g.wv, &mut g.bv),
        ];
        for part in &parts {
            crate::tensor::add_assign(dx.as_mut_slice(), part.as_slice());
        }
        dx
    }
}

#[derive(Clone, Debug)]
pub struct LayerCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    ctx: Matrix,
    ln1: LayerNormCache,
    y1: Matrix,
    pre1: Matrix,
    act1: Matrix,
    ln2: LayerNormCache,
}

impl LayerCache {
    /// Attention probabilities of head `h` (rows = queries).
    pub fn attention(&self, h: usize) -> &Matrix {
        &self.probs[h]
    }
}

/// One-layer GELU feed-forward used by `f_o` and `f_u`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGelu {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl DenseGelu {
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: dense_init(d_in, d_out, rng),
            bias: Matrix::zeros(1, d_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
        }
    }

    /// Returns `(GELU(x W + b), x W + b)`.
    pub fn forward(&self, x: &Matrix) -> (Matrix, Matrix) {
        let pre = linear(x, &self.weight, &self.bias);
        let mut out = pre.clone();
        out.as_mut_slice().iter_mut().for_each(|a| *a = gelu(*a));
        (out, pre)
    }

    pub fn backward(&self, x: &Matrix, pre: &Matrix, dout: &Matrix, g: &mut DenseGelu) -> Matrix {
        let mut dpre = dout.clone();
        for (d, &p) in dpre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *d *= gelu_grad(p);
        }
        linear_backward(x, &self.weight, &dpre, &mut g.weight, &mut g.bias)
    }
}

/// Extra self-attention layer of the multi-head baseline. Every head has its
/// own `d x d` query/key/value projections, so each head output at the CLS
/// position is a full `d`-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MhHead {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct MhCache {
    q: Vec<Vec<f64>>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    probs: Vec<Vec<f64>>,
}

impl MhCache {
    pub fn attention(&self, h: usize) -> &[f64] {
        &self.probs[h]
    }
}

impl MhHead {
    pub fn init<R: Rng>(heads: usize, d: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 {
            return Err(GuimError::Config("number of heads must be positive".into()));
        }
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for _ in 0..heads {
            wq.push(dense_init(d, d, rng));
            wk.push(dense_init(d, d, rng));
            wv.push(dense_init(d, d, rng));
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Matrix>| v.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
        }
    }

    /// Attends from position 0 (the CLS token) over all valid positions of
    /// `hs`; returns one row per head.
    pub fn forward(&self, hs: &Matrix, valid: Option<&[bool]>) -> (Matrix, MhCache) {
        let d = hs.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let query_in = Matrix::from_vec(1, d, hs.row(0).to_vec()).expect("row shape");
        let mut out = Matrix::zeros(self.heads(), d);
        let mut cache = MhCache {
            q: Vec::new(),
            k: Vec::new(),
            v: Vec::new(),
            probs: Vec::new(),
        };
        for h in 0..self.heads() {
            let q = query_in.matmul(&self.wq[h]);
            let k = hs.matmul(&self.wk[h]);
            let v = hs.matmul(&self.wv[h]);
            let mut p: Vec<f64> = (0..hs.rows())
                .map(|j| scale * crate::tensor::dot(q.row(0), k.row(j)))
                .collect();
            masked_softmax(&mut p, valid);
            let z = out.row_mut(h);
            for (j, &pj) in p.iter().enumerate() {
                crate::tensor::axpy(z, pj, v.row(j));
            }
            cache.q.push(q.row(0).to_vec());
            cache.k.push(k);
            cache.v.push(v);
            cache.probs.push(p);
        }
        (out, cache)
    }

    /// Accumulates into `g`; returns the gradient with respect to `hs`.
    pub fn backward(&self, hs: &Matrix, cache: &MhCache, dz: &Matrix, g: &mut MhHead) -> Matrix {
        let (n, d) = (hs.rows(), hs.cols());
        let scale = 1.0 / (d as f64).sqrt();
        let mut dhs = Matrix::zeros(n, d);
        for h in 0..self.heads() {
            let p = &cache.probs[h];
            let dzh = dz.row(h);
            let mut dv = Matrix::zeros(n, d);
            let mut ds = vec![0.0; n];
            for j in 0..n {
                crate::tensor::axpy(dv.row_mut(j), p[j], dzh);
                ds[j] = crate::tensor::dot(dzh, cache.v[h].row(j));
            }
            let s: f64 = ds.iter().zip(p).map(|(a, b)| a * b).sum();
            for (x, &pj) in ds.iter_mut().zip(p) {
                *x = pj * (*x - s) * scale;
            }
            let mut dq = vec![0.0; d];
            let mut dk = Matrix::zeros(n, d);
            for j in 0..n {
                crate::tensor::axpy(&mut dq, ds[j], cache.k[h].row(j));
                crate::tensor::axpy(dk.row_mut(j), ds[j], &cache.q[h]);
            }
            // dW = hs^T dK etc.
            gemm(d, n, d, 1.0, hs.as_slice(), true, dk.as_slice(), false, 1.0, g.wk[h].as_mut_slice());
            gemm(d, n, d, 1.0, hs.as_slice(), true, dv.as_slice(), false, 1.0, g.wv[h].as_mut_slice());
            gemm(d, 1, d, 1.0, hs.row(0), true, &dq, false, 1.0, g.wq[h].as_mut_slice());
            gemm(n, d, d, 1.0, dk.as_slice(), false, self.wk[h].as_slice(), true, 1.0, dhs.as_mut_slice());
            gemm(n, d, d, 1.0, dv.as_slice(), false, self.wv[h].as_slice(), true, 1.0, dhs.as_mut_slice());
            gemm(1, d, d, 1.0, &dq, false, self.wq[h].as_slice(), true, 1.0, dhs.row_mut(0));
        }
        dhs
    }
}

/// Encoder-side parameters: MASK row, transformer layers, `f_o`, `f_u` and the
/// optional multi-head layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub mask_row: Matrix,
    pub layers: Vec<LayerParams>,
    pub f_o: DenseGelu,
    pub f_u: DenseGelu,
    pub mh: Option<MhHead>,
}

impl EncoderParams {
    pub fn init<R: Rng>(cfg: &EncoderConfig, mh_heads: Option<usize>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mask_row = Matrix::uniform(1, d, crate::embedder::TABLE_INIT_SCALE, rng);
        let layers = (0..cfg.layers).map(|_| LayerParams::init(cfg, rng)).collect();
        let f_o = DenseGelu::init(d, d, rng);
        let f_u = DenseGelu::init(d, d, rng);
        let mh = mh_heads.map(|h| MhHead::init(h, d, rng)).transpose()?;
        Ok(Self {
            mask_row,
            layers,
            f_o,
            f_u,
            mh,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mask_row: Matrix::zeros(1, self.mask_row.cols()),
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            f_o: self.f_o.zeros_like(),
            f_u: self.f_u.zeros_like(),
            mh: self.mh.as_ref().map(MhHead::zeros_like),
        }
    }

    pub(crate) fn blocks(&self) -> Vec<Block<'_>> {
        let mut out = vec![Block::new("mask_row", Component::Other, &self.mask_row)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.blocks(i));
        }
        out.push(Block::new("f_o.weight", Component::FoProjection, &self.f_o.weight));
        out.push(Block::new("f_o.bias", Component::Other, &self.f_o.bias));
        out.push(Block::new("f_u.weight", Component::FuProjection, &self.f_u.weight));
        out.push(Block::new("f_u.bias", Component::Other, &self.f_u.bias));
        if let Some(mh) = &self.mh {
            for h in 0..mh.heads() {
                out.push(Block::named(format!("mh{h}.wq"), Component::MhAttention, &mh.wq[h]));
                out.push(Block::named(format!("mh{h}.wk"), Component::MhAttention, &mh.wk[h]));
                out.push(Block::named(format!("mh{h}.wv"), Component::MhAttention, &mh.wv[h]));
            }
        }
        out
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.mask_row];
        for l in &mut self.layers {
            out.extend(l.blocks_mut());
        }
        out.push(&mut self.f_o.weight);
        out.push(&mut self.f_o.bias);
        out.push(&mut self.f_u.weight);
        out.push(&mut self.f_u.bias);
        if let Some(mh) = &mut self.mh {
            for ((q, k), v) in mh.wq.iter_mut().zip(mh.wk.iter_mut()).zip(mh.wv.iter_mut()) {
                out.push(q);
                out.push(k);
                out.push(v);
            }
        }
        out
    }

    /// Runs the layer stack. With zero layers the output equals the input.
    pub fn encode(&self, x: &Matrix, num_heads: usize, valid: Option<&[bool]>) -> (Matrix, Vec<LayerCache>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(&h, num_heads, valid);
            caches.push(cache);
            h = next;
        }
        (h, caches)
    }

    pub fn encode_backward(&self, dh: Matrix, caches: &[LayerCache], g: &mut EncoderParams) -> Matrix {
        let mut d = dh;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(&d, &caches[i], &mut g.layers[i]);
        }
        d
    }
}
