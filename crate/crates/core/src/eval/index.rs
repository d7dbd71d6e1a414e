use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GuimError, Result};
use crate::objectives::cosine_with_norms;
use crate::tensor::{dot, norm, Matrix};

/// Score descending, then id ascending.
pub fn rank_order(a: &(u64, f64), b: &(u64, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Sorts `scored` by [`rank_order`] and keeps the first `m`.
pub fn top_by_rank(mut scored: Vec<(u64, f64)>, m: usize) -> Vec<(u64, f64)> {
    if m < scored.len() {
        if m > 0 {
            scored.select_nth_unstable_by(m - 1, rank_order);
        }
        scored.truncate(m);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

#[derive(Clone, Debug, PartialEq)]
struct Ivf {
    centroids: Matrix,
    centroid_norms: Vec<f64>,
    lists: Vec<Vec<usize>>,
    nprobe: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backend {
    Exact,
    /// Inverted file over k-means cells of the normalised embeddings.
    Approximate { nlist: usize, nprobe: usize },
}

/// Immutable cosine index over item embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateIndex {
    ids: Vec<u64>,
    embeddings: Matrix,
    norms: Vec<f64>,
    ivf: Option<Ivf>,
}

impl CandidateIndex {
    pub fn exact(ids: Vec<u64>, embeddings: Matrix) -> Result<Self> {
        if ids.len() != embeddings.rows() {
            return Err(GuimError::LengthMismatch {
                left: ids.len(),
                right: embeddings.rows(),
            });
        }
        let norms: Vec<f64> = (0..embeddings.rows()).map(|r| norm(embeddings.row(r))).collect();
        if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
            return Err(GuimError::ZeroNorm);
        }
        Ok(Self {
            ids,
            embeddings,
            norms,
            ivf: None,
        })
    }

    pub fn build(ids: Vec<u64>, embeddings: Matrix, backend: &Backend, seed: u64) -> Result<Self> {
        let mut idx = Self::exact(ids, embeddings)?;
        if let Backend::Approximate { nlist, nprobe } = *backend {
            if nlist == 0 || nprobe == 0 {
                return Err(GuimError::Config("nlist and nprobe must be positive".into()));
            }
            idx.ivf = Some(idx.train_ivf(nlist.min(idx.len().max(1)), nprobe, seed));
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    fn unit(&self, i: usize) -> Vec<f64> {
        self.embeddings.row(i).iter().map(|x| x / self.norms[i]).collect()
    }

    fn train_ivf(&self, nlist: usize, nprobe: usize, seed: u64) -> Ivf {
        let n = self.len();
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let units: Vec<Vec<f64>> = (0..n).map(|i| self.unit(i)).collect();
        let mut centroids = Matrix::zeros(nlist, d);
        for (c, i) in sample(&mut rng, n, nlist).into_iter().enumerate() {
            centroids.row_mut(c).copy_from_slice(&units[i]);
        }
        let mut assign = vec![0usize; n];
        for _ in 0..10 {
            for (i, u) in units.iter().enumerate() {
                assign[i] = (0..nlist)
                    .max_by(|&a, &b| dot(centroids.row(a), u).total_cmp(&dot(centroids.row(b), u)).then(b.cmp(&a)))
                    .unwrap_or(0);
            }
            let mut sums = Matrix::zeros(nlist, d);
            let mut counts = vec![0usize; nlist];
            for (i, u) in units.iter().enumerate() {
                counts[assign[i]] += 1;
                for (s, x) in sums.row_mut(assign[i]).iter_mut().zip(u) {
                    *s += x;
                }
            }
            for c in 0..nlist {
                if counts[c] > 0 {
                    let row = sums.row(c).to_vec();
                    centroids.row_mut(c).copy_from_slice(&row);
                }
            }
        }
        let mut lists = vec![Vec::new(); nlist];
        for (i, &a) in assign.iter().enumerate() {
            lists[a].push(i);
        }
        let centroid_norms = (0..nlist).map(|c| norm(centroids.row(c)).max(f64::MIN_POSITIVE)).collect();
        Ivf {
            centroids,
            centroid_norms,
            lists,
            nprobe,
        }
    }

    fn score(&self, q: &[f64], nq: f64, alpha: f64, i: usize) -> (u64, f64) {
        (self.ids[i], alpha * cosine_with_norms(q, self.embeddings.row(i), nq, self.norms[i]))
    }

    fn check_query(&self, q: &[f64], m: usize) -> Result<f64> {
        if self.is_empty() {
            return Err(GuimError::EmptyIndex);
        }
        if m > self.len() {
            return Err(GuimError::TooManyResults { m, size: self.len() });
        }
        if q.len() != self.dim() {
            return Err(GuimError::LengthMismatch {
                left: q.len(),
                right: self.dim(),
            });
        }
        let nq = norm(q);
        if nq == 0.0 {
            return Err(GuimError::ZeroNorm);
        }
        Ok(nq)
    }

    /// Exact top-`m` by `alpha * cos`, ordered by [`rank_order`].
    pub fn query_exact(&self, q: &[f64], m: usize, alpha: f64) -> Result<Vec<(u64, f64)>> {
        let nq = self.check_query(q, m)?;
        let scored = (0..self.len()).map(|i| self.score(q, nq, alpha, i)).collect();
        Ok(top_by_rank(scored, m))
    }

    /// Top-`m` through the configured backend.
    pub fn query(&self, q: &[f64], m: usize, alpha: f64) -> Result<Vec<(u64, f64)>> {
        let Some(ivf) = &self.ivf else {
            return self.query_exact(q, m, alpha);
        };
        let nq = self.check_query(q, m)?;
        let mut cells: Vec<(u64, f64)> = (0..ivf.lists.len())
            .map(|c| (c as u64, cosine_with_norms(q, ivf.centroids.row(c), nq, ivf.centroid_norms[c])))
            .collect();
        cells.sort_unstable_by(rank_order);
        let mut scored = Vec::new();
        for (probed, &(c, _)) in cells.iter().enumerate() {
            if probed >= ivf.nprobe && scored.len() >= m {
                break;
            }
            scored.extend(ivf.lists[c as usize].iter().map(|&i| self.score(q, nq, alpha, i)));
        }
        Ok(top_by_rank(scored, m))
    }

    /// Mean overlap between backend and exact top-`m` over `queries`.
    pub fn self_test_recall(&self, queries: &[Vec<f64>], m: usize) -> Result<f64> {
        if queries.is_empty() {
            return Ok(1.0);
        }
        let mut total = 0.0;
        for q in queries {
            let exact = self.query_exact(q, m, 1.0)?;
            let approx = self.query(q, m, 1.0)?;
            let hits = approx.iter().filter(|(id, _)| exact.iter().any(|(e, _)| e == id)).count();
            total += hits as f64 / m.max(1) as f64;
        }
        Ok(total / queries.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_index(n: usize, d: usize, seed: u64) -> (Vec<u64>, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 7).collect();
        let m = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (ids, m)
    }

    #[test]
    fn exact_query_matches_sorting_everything() {
        let (ids, m) = random_index(300, 6, 1);
        let idx = CandidateIndex::exact(ids.clone(), m.clone()).unwrap();
        let q = vec![0.3, -0.1, 0.8, 0.0, 0.2, -0.5];
        let got = idx.query_exact(&q, 25, 20.0).unwrap();
        let mut all: Vec<(u64, f64)> = (0..300)
            .map(|i| {
                let v = m.row(i);
                let c = dot(&q, v) / (norm(&q) * norm(v));
                (ids[i], 20.0 * c)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(got, all[..25].to_vec());
    }

    #[test]
    fn ties_break_toward_smaller_id() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let idx = CandidateIndex::exact(vec![9, 4, 1], m).unwrap();
        let got = idx.query_exact(&[1.0, 0.0], 3, 1.0).unwrap();
        assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), [4, 9, 1]);
    }

    #[test]
    fn errors() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let idx = CandidateIndex::exact(vec![1], m).unwrap();
        assert!(matches!(idx.query(&[1.0, 0.0], 2, 1.0), Err(GuimError::TooManyResults { m: 2, size: 1 })));
        assert!(matches!(idx.query(&[0.0, 0.0], 1, 1.0), Err(GuimError::ZeroNorm)));
        let empty = CandidateIndex::exact(vec![], Matrix::zeros(0, 2)).unwrap();
        assert!(matches!(empty.query(&[1.0, 0.0], 0, 1.0), Err(GuimError::EmptyIndex)));
        let zero = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(CandidateIndex::exact(vec![1], zero), Err(GuimError::ZeroNorm)));
    }

    #[test]
    fn approximate_backend_recall_floor() {
        let (ids, m) = random_index(2000, 8, 2);
        let idx = CandidateIndex::build(ids, m, &Backend::Approximate { nlist: 32, nprobe: 12 }, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let queries: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let r = idx.self_test_recall(&queries, 20).unwrap();
        assert!(r >= 0.8, "recall {r}");
        let full = CandidateIndex::build(idx.ids().to_vec(), idx.embeddings.clone(), &Backend::Approximate { nlist: 32, nprobe: 32 }, 3).unwrap();
        assert_eq!(full.self_test_recall(&queries, 20).unwrap(), 1.0);
    }
}
