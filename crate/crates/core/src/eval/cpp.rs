use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::SyntheticTruth;
use crate::embedder::dense_init;
use crate::error::{GuimError, Result};
use crate::tensor::{add_column_sums, gelu, gelu_grad, gemm, Matrix};

/// Planted profile labels for synthetic users.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CppTask {
    DominantCluster,
    DominantClusterParity,
}

impl std::str::FromStr for CppTask {
    type Err = GuimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dominant_cluster" => Ok(CppTask::DominantCluster),
            "dominant_parity" | "dominant_cluster_parity" => Ok(CppTask::DominantClusterParity),
            _ => Err(GuimError::Config(format!("unknown CPP task `{s}`"))),
        }
    }
}

pub fn cpp_labels(truth: &SyntheticTruth, task: CppTask, user_ids: &[u64]) -> Vec<usize> {
    user_ids
        .iter()
        .map(|&u| {
            let c = truth.dominant_cluster(u as usize);
            match task {
                CppTask::DominantCluster => c,
                CppTask::DominantClusterParity => c % 2,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CppConfig {
    pub hidden: (usize, usize),
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CppConfig {
    fn default() -> Self {
        Self {
            hidden: (256, 64),
            epochs: 60,
            batch_size: 64,
            learning_rate: 1e-3,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CppResult {
    pub input_width: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Share of the most frequent training label in the test split.
    pub majority_rate: f64,
}

struct Dense {
    w: Matrix,
    b: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.w);
        y.add_row_bias(&self.b);
        y
    }
}

struct Mlp {
    layers: [Dense; 3],
}

struct Trace {
    inputs: [Matrix; 3],
    pre: [Matrix; 2],
}

impl Mlp {
    fn init(widths: [usize; 4], rng: &mut ChaCha8Rng) -> Self {
        let mk = |i: usize, rng: &mut ChaCha8Rng| Dense {
            w: dense_init(widths[i], widths[i + 1], rng),
            b: vec![0.0; widths[i + 1]],
        };
        let a = mk(0, rng);
        let b = mk(1, rng);
        let c = mk(2, rng);
        Self { layers: [a, b, c] }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, Trace) {
        let p1 = self.layers[0].forward(x);
        let h1 = map(&p1, gelu);
        let p2 = self.layers[1].forward(&h1);
        let h2 = map(&p2, gelu);
        let logits = self.layers[2].forward(&h2);
        (
            logits,
            Trace {
                inputs: [x.clone(), h1, h2],
                pre: [p1, p2],
            },
        )
    }

    /// Gradients `(dW, db)` per layer given `d loss / d logits`.
    fn backward(&self, t: &Trace, dlogits: Matrix) -> Vec<(Matrix, Vec<f64>)> {
        let mut grads = Vec::with_capacity(3);
        let mut dy = dlogits;
        for l in (0..3).rev() {
            let x = &t.inputs[l];
            let layer = &self.layers[l];
            let (n, din, dout) = (x.rows(), layer.w.rows(), layer.w.cols());
            let mut dw = Matrix::zeros(din, dout);
            gemm(din, n, dout, 1.0, x.as_slice(), true, dy.as_slice(), false, 0.0, dw.as_mut_slice());
            let mut db = vec![0.0; dout];
            add_column_sums(&mut db, dy.as_slice(), dout);
            grads.push((dw, db));
            if l > 0 {
                let mut dx = Matrix::zeros(n, din);
                gemm(n, dout, din, 1.0, dy.as_slice(), false, layer.w.as_slice(), true, 0.0, dx.as_mut_slice());
                for (g, p) in dx.as_mut_slice().iter_mut().zip(t.pre[l - 1].as_slice()) {
                    *g *= gelu_grad(*p);
                }
                dy = dx;
            }
        }
        grads.reverse();
        grads
    }
}

fn map(m: &Matrix, f: fn(f64) -> f64) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

/// Softmax cross-entropy gradient `(softmax - onehot) / n`.
fn xent_grad(logits: &Matrix, labels: &[usize]) -> Matrix {
    let n = logits.rows() as f64;
    let mut g = logits.clone();
    for (r, &y) in labels.iter().enumerate() {
        let row = g.row_mut(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s * n;
        }
        row[y] -= 1.0 / n;
    }
    g
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamState {
    fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            for (j, (p, &g)) in p.iter_mut().zip(g).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            }
        }
    }
}

/// Trains the three-layer classifier on concatenated user vectors and reports
/// held-out accuracy. Features are standardised with training statistics.
pub fn train_cpp_classifier(features: &[Vec<f64>], labels: &[usize], cfg: &CppConfig) -> Result<CppResult> {
    if features.len() != labels.len() {
        return Err(GuimError::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    if features.len() < 2 {
        return Err(GuimError::NoEligibleUsers("CPP".into()));
    }
    let width = features[0].len();
    if features.iter().any(|f| f.len() != width) {
        return Err(GuimError::Config("feature vectors differ in width".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((features.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, features.len() - 1);
    let (test_idx, train_idx) = order.split_at(n_test);
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let first = train_labels[0];
    if train_labels.iter().all(|&l| l == first) {
        return Err(GuimError::SingleClass);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);

    let mut mean = vec![0.0; width];
    for &i in train_idx {
        for (m, x) in mean.iter_mut().zip(&features[i]) {
            *m += x / train_idx.len() as f64;
        }
    }
    let mut sd = vec![0.0; width];
    for &i in train_idx {
        for ((s, x), m) in sd.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (x - m).powi(2) / train_idx.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-12)).collect();
    let design = |idx: &[usize]| {
        let rows: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| features[i].iter().zip(&mean).zip(&sd).map(|((x, m), s)| (x - m) / s).collect())
            .collect();
        Matrix::from_rows(&rows)
    };
    let xtrain = design(train_idx)?;
    let xtest = design(test_idx)?;

    let mut net = Mlp::init([width, cfg.hidden.0, cfg.hidden.1, classes], &mut rng);
    let mut adam = AdamState {
        m: net.layers.iter().flat_map(|l| [vec![0.0; l.w.len()], vec![0.0; l.b.len()]]).collect(),
        v: net.layers.iter().flat_map(|l| [vec![0.0; l.w.len()], vec![0.0; l.b.len()]]).collect(),
        t: 0,
    };
    let mut rows: Vec<usize> = (0..train_idx.len()).collect();
    for _ in 0..cfg.epochs {
        rows.shuffle(&mut rng);
        for chunk in rows.chunks(cfg.batch_size.max(1)) {
            let xb = xtrain.gather_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&r| train_labels[r]).collect();
            let (logits, trace) = net.forward(&xb);
            let grads = net.backward(&trace, xent_grad(&logits, &yb));
            let params: Vec<&mut [f64]> = net
                .layers
                .iter_mut()
                .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
                .collect();
            let gs: Vec<&[f64]> = grads.iter().flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).collect();
            adam.step(params, gs, cfg.learning_rate);
        }
    }
    let accuracy = |x: &Matrix, idx: &[usize]| {
        let (logits, _) = net.forward(x);
        let hits = idx.iter().enumerate().filter(|(r, &i)| argmax(logits.row(*r)) == labels[i]).count();
        hits as f64 / idx.len() as f64
    };
    let mut freq = vec![0usize; classes];
    for &l in &train_labels {
        freq[l] += 1;
    }
    let majority = argmax(&freq.iter().map(|&c| c as f64).collect::<Vec<_>>());
    Ok(CppResult {
        input_width: width,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
        train_accuracy: accuracy(&xtrain, train_idx),
        test_accuracy: accuracy(&xtest, test_idx),
        majority_rate: test_idx.iter().filter(|&&i| labels[i] == majority).count() as f64 / test_idx.len() as f64,
    })
}
