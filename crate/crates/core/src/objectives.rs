//! Mixture-of-representation scores, InfoNCE, and in-batch negative sampling.

use std::fmt::Debug;

use rand::Rng;

use crate::error::{GuimError, Result};
use crate::model::ForwardOutput;
use crate::tensor::{dot, norm};

pub const DEFAULT_ALPHA: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreConfig {
    pub alpha: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
        }
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(GuimError::LengthMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(GuimError::ZeroNorm);
    }
    Ok(cosine_with_norms(u, v, nu, nv))
}

/// Cosine from precomputed norms; bit-identical to [`cosine`].
#[inline]
pub fn cosine_with_norms(u: &[f64], v: &[f64], norm_u: f64, norm_v: f64) -> f64 {
    dot(u, v) / (norm_u * norm_v)
}

/// Cosine plus its gradients with respect to `u` and `v`.
pub fn cosine_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let c = cosine(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    let inv = 1.0 / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| b * inv - c * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| a * inv - c * b / (nv * nv))
        .collect();
    Ok((c, du, dv))
}

/// `alpha * sum_c weights[c] * cos(u_c, v)`; weights must form a distribution.
pub fn score_mixture<U: AsRef<[f64]>>(u_set: &[U], v: &[f64], weights: &[f64], alpha: f64) -> Result<f64> {
    if weights.len() != u_set.len() {
        return Err(GuimError::LengthMismatch {
            left: weights.len(),
            right: u_set.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(GuimError::WeightConstraint(sum));
    }
    let mut acc = 0.0;
    for (u, &w) in u_set.iter().zip(weights) {
        acc += w * cosine(u.as_ref(), v)?;
    }
    Ok(alpha * acc)
}

/// `alpha * max_c cos(u_c, v)` and the winning index (smallest on ties).
pub fn score_max_arg<U: AsRef<[f64]>>(u_set: &[U], v: &[f64], alpha: f64) -> Result<(f64, usize)> {
    if u_set.is_empty() {
        return Err(GuimError::Config("empty user representation".into()));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (c, u) in u_set.iter().enumerate() {
        let s = alpha * cosine(u.as_ref(), v)?;
        if s > best.0 {
            best = (s, c);
        }
    }
    Ok(best)
}

pub fn score_max<U: AsRef<[f64]>>(u_set: &[U], v: &[f64], alpha: f64) -> Result<f64> {
    score_max_arg(u_set, v, alpha).map(|(s, _)| s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    /// Softmax over `[positive, negatives...]`.
    pub posterior: Vec<f64>,
}

/// `-log softmax(scores)[0]` with `scores = [pos, negs...]`, max-shifted.
pub fn info_nce(pos_score: f64, neg_scores: &[f64]) -> InfoNce {
    let max = neg_scores.iter().copied().fold(pos_score, f64::max);
    let exps: Vec<f64> = std::iter::once(pos_score)
        .chain(neg_scores.iter().copied())
        .map(|s| (s - max).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    let loss = if pos_score == max {
        exps[1..].iter().sum::<f64>().ln_1p()
    } else {
        sum.ln() - (pos_score - max)
    };
    let posterior = exps.iter().map(|e| e / sum).collect();
    InfoNce { loss, posterior }
}

/// Loss and `d loss / d scores` for `scores = [pos, negs...]`.
pub fn info_nce_grad(scores: &[f64]) -> (f64, Vec<f64>) {
    let r = info_nce(scores[0], &scores[1..]);
    let mut grad = r.posterior;
    grad[0] -= 1.0;
    (r.loss, grad)
}

/// Draws negatives from item occurrences of the *other* sequences in a batch.
#[derive(Clone, Debug)]
pub struct InBatchSampler<T> {
    items: Vec<T>,
    starts: Vec<usize>,
}

const MAX_REJECTIONS_PER_DRAW: usize = 10_000;

impl<T: Copy + PartialEq + Debug> InBatchSampler<T> {
    /// `per_sequence[i]` lists every item occurrence of sequence `i`.
    pub fn new(per_sequence: &[Vec<T>]) -> Result<Self> {
        if per_sequence.len() < 2 {
            return Err(GuimError::InsufficientNegatives(per_sequence.len()));
        }
        let mut starts = Vec::with_capacity(per_sequence.len() + 1);
        let mut items = Vec::new();
        for s in per_sequence {
            starts.push(items.len());
            items.extend_from_slice(s);
        }
        starts.push(items.len());
        Ok(Self { items, starts })
    }

    pub fn num_sequences(&self) -> usize {
        self.starts.len() - 1
    }

    /// Occurrences outside sequence `owner`, in batch order.
    pub fn foreign(&self, owner: usize) -> impl Iterator<Item = T> + '_ {
        let (a, b) = (self.starts[owner], self.starts[owner + 1]);
        self.items[..a].iter().chain(&self.items[b..]).copied()
    }

    /// `k` draws with replacement, uniform over foreign occurrences, redrawing
    /// any occurrence equal to `positive`.
    pub fn sample<R: Rng>(&self, owner: usize, positive: T, k: usize, rng: &mut R) -> Result<Vec<T>> {
        let (a, b) = (self.starts[owner], self.starts[owner + 1]);
        let own = b - a;
        let pool = self.items.len() - own;
        if pool == 0 || !self.foreign(owner).any(|x| x != positive) {
            return Err(GuimError::NegativeExhaustion(format!("{positive:?}")));
        }
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let mut tries = 0;
            loop {
                let r = rng.gen_range(0..pool);
                let idx = if r < a { r } else { r + own };
                let item = self.items[idx];
                if item != positive {
                    out.push(item);
                    break;
                }
                tries += 1;
                if tries >= MAX_REJECTIONS_PER_DRAW {
                    return Err(GuimError::NegativeExhaustion(format!("{positive:?}")));
                }
            }
        }
        Ok(out)
    }
}

/// Matching loss over forward outputs: every post-cutoff target of every user
/// is one InfoNCE task scored with the max-of-cosines score.
pub fn matching_loss(outputs: &[ForwardOutput], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for out in outputs {
        for cand in &out.matching {
            let pos = score_max(&out.user_rep, &cand.positive, alpha)?;
            let negs = cand
                .negatives
                .iter()
                .map(|v| score_max(&out.user_rep, v, alpha))
                .collect::<Result<Vec<_>>>()?;
            total += info_nce(pos, &negs).loss;
        }
    }
    Ok(total)
}

/// MLM loss: each masked position's `o_n` scored by `alpha * cos` against the
/// true item and its sampled negatives.
pub fn mlm_loss(outputs: &[ForwardOutput], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for out in outputs {
        for (ctx, cand) in out.mlm_contexts.iter().zip(&out.mlm) {
            let pos = alpha * cosine(ctx, &cand.positive)?;
            let negs = cand
                .negatives
                .iter()
                .map(|v| cosine(ctx, v).map(|c| alpha * c))
                .collect::<Result<Vec<_>>>()?;
            total += info_nce(pos, &negs).loss;
        }
    }
    Ok(total)
}

pub fn total_loss(outputs: &[ForwardOutput], alpha: f64) -> Result<f64> {
    Ok(matching_loss(outputs, alpha)? + mlm_loss(outputs, alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Candidates;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(GuimError::ZeroNorm)));
    }

    #[test]
    fn cosine_grad_matches_finite_difference() {
        let u = [0.3, -1.2, 0.8];
        let v = [1.1, 0.4, -0.5];
        let (_, du, dv) = cosine_grad(&u, &v).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let mut up = u;
            up[i] += h;
            let mut um = u;
            um[i] -= h;
            let fd = (cosine(&up, &v).unwrap() - cosine(&um, &v).unwrap()) / (2.0 * h);
            assert!((du[i] - fd).abs() < 1e-9);
            let mut vp = v;
            vp[i] += h;
            let mut vm = v;
            vm[i] -= h;
            let fd = (cosine(&u, &vp).unwrap() - cosine(&u, &vm).unwrap()) / (2.0 * h);
            assert!((dv[i] - fd).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_examples() {
        let u = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = [1.0, 0.0];
        // cosines (1, 0), weights (0.25, 0.75)
        assert!((score_mixture(&u, &v, &[0.25, 0.75], 20.0).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(score_mixture(&u, &v, &[0.0, 1.0], 20.0).unwrap(), 0.0);
        assert!(matches!(
            score_mixture(&u, &v, &[0.5, 0.6], 20.0),
            Err(GuimError::WeightConstraint(_))
        ));
        assert!(score_mixture(&u, &v, &[1.5, -0.5], 20.0).is_err());
        let same = vec![vec![0.2, 0.9]; 3];
        let want = 20.0 * cosine(&same[0], &[1.0, 2.0]).unwrap();
        let got = score_mixture(&same, &[1.0, 2.0], &[0.2, 0.3, 0.5], 20.0).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn max_examples() {
        let u = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = [FRAC_1_SQRT_2, FRAC_1_SQRT_2];
        let s = score_max(&u, &v, 20.0).unwrap();
        assert!((s - 20.0 * FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((s - 14.142_135_623_730_951).abs() < 1e-9);
        // tie resolves toward the first vector
        assert_eq!(score_max_arg(&u, &v, 20.0).unwrap().1, 0);
        let one = vec![vec![0.5, 0.5]];
        assert!((score_max(&one, &[0.5, 0.5], 20.0).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn info_nce_examples() {
        let r = info_nce(1.7, &[1.7; 31]);
        assert!((r.loss - 32f64.ln()).abs() < 1e-12);
        assert!((r.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let r = info_nce(20.0, &[-20.0; 31]);
        let want = (31.0 * (-40f64).exp()).ln_1p();
        assert!((r.loss - want).abs() < 1e-28, "{} vs {want}", r.loss);
        assert!((r.loss - 1.317e-16).abs() < 1e-19);
        assert!((info_nce(0.3, &[0.3]).loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn info_nce_decreases_in_positive_score() {
        let negs = [0.5, -1.0, 2.0];
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let l = info_nce(-5.0 + 0.3 * i as f64, &negs).loss;
            assert!(l < prev);
            prev = l;
        }
    }

    fn batch() -> Vec<Vec<u64>> {
        vec![vec![1, 2, 2], vec![3, 4], vec![5, 5, 5, 6]]
    }

    #[test]
    fn sampler_needs_two_sequences() {
        assert!(matches!(
            InBatchSampler::new(&[vec![1u64, 2]]),
            Err(GuimError::InsufficientNegatives(1))
        ));
    }

    #[test]
    fn sampler_supports_full_batch_of_32() {
        let seqs: Vec<Vec<u64>> = (0..32).map(|u| vec![u]).collect();
        let s = InBatchSampler::new(&seqs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let negs = s.sample(0, 0, 31, &mut rng).unwrap();
        assert_eq!(negs.len(), 31);
        assert!(negs.iter().all(|&x| x != 0));
    }

    #[test]
    fn sampler_exhaustion() {
        let s = InBatchSampler::new(&[vec![1u64], vec![7, 7], vec![7]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(s.sample(0, 7, 3, &mut rng), Err(GuimError::NegativeExhaustion(_))));
        assert_eq!(s.sample(0, 1, 3, &mut rng).unwrap(), vec![7, 7, 7]);
    }

    #[test]
    fn sampler_frequencies_follow_foreign_occurrences() {
        let s = InBatchSampler::new(&batch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        // owner 0, positive 4: after rejection the pool is {3, 5, 5, 5, 6}
        let draws = s.sample(0, 4, n, &mut rng).unwrap();
        let probs = [(3u64, 1.0 / 5.0), (5, 3.0 / 5.0), (6, 1.0 / 5.0)];
        for (item, p) in probs {
            let count = draws.iter().filter(|&&x| x == item).count() as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((count - n as f64 * p).abs() < 3.0 * sigma, "item {item}: {count}");
        }
        assert!(draws.iter().all(|&x| x != 4 && x != 1 && x != 2));
    }

    fn cand(pos: Vec<f64>, negs: Vec<Vec<f64>>) -> Candidates {
        Candidates { positive: pos, negatives: negs }
    }

    #[test]
    fn matching_loss_composes_info_nce() {
        let alpha = 20.0;
        let out1 = ForwardOutput {
            user_rep: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            matching: vec![cand(vec![1.0, 1.0], vec![vec![1.0, -1.0], vec![-1.0, 0.2]])],
            mlm_contexts: vec![],
            mlm: vec![],
        };
        let out2 = ForwardOutput {
            user_rep: vec![vec![0.6, 0.8], vec![-1.0, 0.0]],
            matching: vec![cand(vec![0.0, 1.0], vec![vec![-1.0, 0.0], vec![0.3, 0.3]])],
            mlm_contexts: vec![],
            mlm: vec![],
        };
        let c = FRAC_1_SQRT_2;
        // user 1: pos max(c, c) = c; negs max(c, -c) = c, max(-1/|..|, ..)
        let n2 = 1.0 / (1.04f64).sqrt();
        let l1 = info_nce(alpha * c, &[alpha * c, alpha * (0.2 * n2).max(-n2)]).loss;
        // user 2: pos max(0.8, 0) = 0.8; negs max(-0.6, 1) = 1, max(0.7*c*..)
        let l2 = info_nce(alpha * 0.8, &[alpha * 1.0, alpha * ((0.6 + 0.8) * c).max(-c)]).loss;
        let got = matching_loss(&[out1.clone(), out2.clone()], alpha).unwrap();
        assert!((got - (l1 + l2)).abs() < 1e-12);
        assert!(got >= 0.0);
        let empty = ForwardOutput { matching: vec![], ..out1 };
        assert_eq!(matching_loss(&[empty.clone(), ForwardOutput { matching: vec![], ..out2 }], alpha).unwrap(), 0.0);
        assert_eq!(mlm_loss(&[empty.clone()], alpha).unwrap(), 0.0);
        assert_eq!(total_loss(&[empty], alpha).unwrap(), 0.0);
    }

    #[test]
    fn mlm_parallel_context_example_and_scale_invariance() {
        let pos = vec![1.0, 0.0, 0.0];
        let negs = vec![vec![0.0, 1.0, 0.0]; 31];
        let mk = |ctx: Vec<f64>| ForwardOutput {
            user_rep: vec![vec![1.0, 1.0, 1.0]],
            matching: vec![],
            mlm_contexts: vec![ctx],
            mlm: vec![cand(pos.clone(), negs.clone())],
        };
        let l = mlm_loss(&[mk(vec![2.0, 0.0, 0.0])], 20.0).unwrap();
        let want = (31.0 * (-20f64).exp()).ln_1p();
        assert!((l - want).abs() < 1e-20);
        let a = mlm_loss(&[mk(vec![0.3, -0.2, 0.9])], 20.0).unwrap();
        let b = mlm_loss(&[mk(vec![3.0, -2.0, 9.0])], 20.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
