//! Mini-batch training, gradient verification and checkpointing.

mod checkpoint;
mod gradcheck;
mod optim;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{fixture_batch, grad_check, BlockError, GradCheckConfig, GradCheckReport};
pub use optim::Adam;

use crate::corpus::Corpus;
use crate::embedder::{build_item_vocab, ItemVocab};
use crate::error::{GuimError, Result};
use crate::model::{build_model, draw_plan, prepare_sequence, Model, ModelConfig, ModelParams, PreparedCatalog, PreparedSequence};

const VALIDATION_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Negatives per task.
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub log_every: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            k: 31,
            epochs: 50,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            grad_clip_norm: None,
            log_every: 1,
            patience: 3,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "batch_size",
        "k",
        "epochs",
        "learning_rate",
        "beta1",
        "beta2",
        "eps",
        "weight_decay",
        "seed",
        "grad_clip_norm",
        "log_every",
        "patience",
        "validation_fraction",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(GuimError::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.k == 0 {
            return Err(GuimError::Config("k must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(GuimError::Config("learning_rate must be >= 0 and betas in [0, 1)".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(GuimError::Config("validation_fraction must be in (0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(GuimError::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("k", self.k.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            (
                "grad_clip_norm",
                self.grad_clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string()),
            ),
            ("log_every", self.log_every.to_string()),
            ("patience", self.patience.to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
        ]
    }

    pub fn apply_pairs<'a>(mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| GuimError::Config(format!("invalid value `{v}` for key `{key}`")))
        }
        for (k, v) in pairs {
            match k {
                "batch_size" => self.batch_size = num(k, v)?,
                "k" => self.k = num(k, v)?,
                "epochs" => self.epochs = num(k, v)?,
                "learning_rate" | "lr" => self.learning_rate = num(k, v)?,
                "beta1" => self.beta1 = num(k, v)?,
                "beta2" => self.beta2 = num(k, v)?,
                "eps" => self.eps = num(k, v)?,
                "weight_decay" => self.weight_decay = num(k, v)?,
                "seed" => self.seed = num(k, v)?,
                "grad_clip_norm" => {
                    self.grad_clip_norm = match v {
                        "" | "none" => None,
                        _ => Some(num(k, v)?),
                    }
                }
                "log_every" => self.log_every = num(k, v)?,
                "patience" => self.patience = num(k, v)?,
                "validation_fraction" => self.validation_fraction = num(k, v)?,
                _ => {}
            }
        }
        Ok(self)
    }
}

/// Loss values of one optimizer step, summed over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub matching: f64,
    pub mlm: f64,
    pub total: f64,
    pub end_of_epoch: bool,
}

/// Splits sequence indices into (train, validation) by user; both sorted.
pub fn split_users(num_sequences: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..num_sequences).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_val = ((num_sequences as f64 * validation_fraction).round() as usize).clamp(
        usize::from(num_sequences >= 4) * 2,
        num_sequences.saturating_sub(2),
    );
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Preprocessed train / validation sequences with the vocabulary built from
/// training-user purchases.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub vocab: ItemVocab,
    pub catalog: PreparedCatalog,
    pub train: Vec<PreparedSequence>,
    pub validation: Vec<PreparedSequence>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

pub fn prepare_training_data(corpus: &Corpus, model: &ModelConfig, train: &TrainConfig) -> Result<TrainingData> {
    if corpus.sequences.is_empty() || corpus.catalog.is_empty() {
        return Err(GuimError::EmptyCorpus);
    }
    let (ti, vi) = split_users(corpus.sequences.len(), train.validation_fraction, train.seed);
    let counts = Corpus::purchase_counts(&corpus.catalog, ti.iter().map(|&i| &corpus.sequences[i]));
    let vocab = build_item_vocab(&corpus.catalog, &counts, model.top_x)?;
    let catalog = PreparedCatalog::new(&corpus.catalog, &vocab);
    let prep = |idx: &[usize]| {
        idx.iter()
            .map(|&i| {
                let s = &corpus.sequences[i];
                prepare_sequence(s, &corpus.catalog, model, s.cutoff)
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(TrainingData {
        train: prep(&ti)?,
        validation: prep(&vi)?,
        vocab,
        catalog,
        train_indices: ti,
        validation_indices: vi,
    })
}

/// Consecutive chunks of `order`; a trailing singleton joins the previous chunk
/// since in-batch negatives need two sequences.
pub fn batch_chunks(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn global_norm(g: &ModelParams) -> f64 {
    g.blocks()
        .iter()
        .flat_map(|b| b.matrix.as_slice())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// One forward, one backward and one optimizer update. Returns summed losses.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    catalog: &PreparedCatalog,
    batch: &[PreparedSequence],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let plan = draw_plan(batch, model.config.mask_prob, config.k, rng)?;
    let mut grads = model.params.zeros_like();
    let report = model.loss_and_grad(catalog, batch, &plan, Some(&mut grads))?;
    if !report.total().is_finite() {
        return Err(GuimError::NonFinite("loss".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(GuimError::NonFinite(format!("gradient of {name}")));
    }
    if let Some(max) = config.grad_clip_norm {
        let n = global_norm(&grads);
        if n > max {
            let s = max / n;
            for m in grads.blocks_mut() {
                m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    optimizer.update(&mut model.params, &grads, config.learning_rate);
    if let Some(name) = model.params.first_non_finite() {
        return Err(GuimError::NonFinite(name));
    }
    Ok((report.matching, report.mlm))
}

/// Mean per-user total loss under a fixed validation plan.
pub fn validation_loss(model: &Model, data: &TrainingData, config: &TrainConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(VALIDATION_STREAM);
    let order: Vec<usize> = (0..data.validation.len()).collect();
    let mut total = 0.0;
    for chunk in batch_chunks(&order, config.batch_size) {
        let batch: Vec<PreparedSequence> = chunk.iter().map(|&i| data.validation[i].clone()).collect();
        let plan = draw_plan(&batch, model.config.mask_prob, config.k, &mut rng)?;
        total += model.loss_and_grad(&data.catalog, &batch, &plan, None)?.total();
    }
    Ok(total / data.validation.len() as f64)
}

/// Position in a training run; saved with checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub step: u64,
    pub epoch: usize,
    /// Index of the next batch within the current epoch.
    pub cursor: usize,
    pub initial_validation: f64,
    pub best_validation: f64,
    pub bad_epochs: usize,
    pub stopped: bool,
}

impl Default for RunState {
    fn default() -> Self {
        Self {
            step: 0,
            epoch: 0,
            cursor: 0,
            initial_validation: f64::NAN,
            best_validation: f64::INFINITY,
            bad_epochs: 0,
            stopped: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub vocab: ItemVocab,
    pub state: RunState,
    /// Parameters at the best validation loss so far.
    pub best: Option<ModelParams>,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, vocab: ItemVocab, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&model.params, config.beta1, config.beta2, config.eps, config.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            optimizer,
            config,
            vocab,
            state: RunState::default(),
            best: None,
            rng,
        })
    }

    /// Batches of the current epoch; the shuffle depends only on (seed, epoch).
    pub fn epoch_batches(&self, num_train: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..num_train).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SHUFFLE_STREAM_BASE + self.state.epoch as u64);
        order.shuffle(&mut rng);
        batch_chunks(&order, self.config.batch_size)
    }

    /// Runs the next batch of the current epoch.
    pub fn step(&mut self, data: &TrainingData) -> Result<StepMetrics> {
        let batches = self.epoch_batches(data.train.len());
        if batches.is_empty() || data.train.len() < 2 {
            return Err(GuimError::InsufficientNegatives(data.train.len()));
        }
        let batch: Vec<PreparedSequence> = batches[self.state.cursor].iter().map(|&i| data.train[i].clone()).collect();
        let (matching, mlm) = train_step(
            &mut self.model,
            &mut self.optimizer,
            &data.catalog,
            &batch,
            &self.config,
            &mut self.rng,
        )?;
        let m = StepMetrics {
            step: self.state.step,
            epoch: self.state.epoch,
            matching,
            mlm,
            total: matching + mlm,
            end_of_epoch: self.state.cursor + 1 == batches.len(),
        };
        self.state.step += 1;
        self.state.cursor += 1;
        if m.end_of_epoch {
            self.state.cursor = 0;
            self.state.epoch += 1;
        }
        Ok(m)
    }

    /// Records a validation loss and updates the early-stopping state.
    fn observe_validation(&mut self, loss: f64) {
        if loss < self.state.best_validation {
            self.state.best_validation = loss;
            self.state.bad_epochs = 0;
            self.best = Some(self.model.params.clone());
        } else {
            self.state.bad_epochs += 1;
            if self.state.bad_epochs >= self.config.patience {
                self.state.stopped = true;
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            train: self.config.clone(),
            optimizer: self.optimizer.clone(),
            state: self.state.clone(),
            best: self.best.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            model: ck.model,
            optimizer: ck.optimizer,
            config: ck.train,
            vocab: ck.vocab,
            state: ck.state,
            best: ck.best,
            rng: ck.rng,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Model holding the best-validation parameters.
    pub model: Model,
    pub vocab: ItemVocab,
    pub initial_validation: f64,
    pub best_validation: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepMetrics>,
    pub stopped_early: bool,
}

/// Where pretraining writes its side outputs.
#[derive(Default)]
pub struct PretrainSinks<'a> {
    /// CSV metrics log: step,epoch,matching_loss,mlm_loss,total_loss,wall_time.
    pub metrics: Option<&'a mut dyn Write>,
    /// Called after every epoch with the trainer state.
    pub on_epoch: Option<&'a mut dyn FnMut(&Trainer) -> Result<()>>,
}

pub const METRICS_HEADER: &str = "step,epoch,matching_loss,mlm_loss,total_loss,wall_time";

/// Trains until `epochs` or early stopping, starting from `trainer`'s state.
pub fn run_training(trainer: &mut Trainer, data: &TrainingData, sinks: PretrainSinks<'_>) -> Result<PretrainOutcome> {
    let PretrainSinks { mut metrics, mut on_epoch } = sinks;
    let start = Instant::now();
    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    if trainer.state.step == 0 && trainer.state.initial_validation.is_nan() {
        let v = validation_loss(&trainer.model, data, &trainer.config)?;
        trainer.state.initial_validation = v;
        trainer.observe_validation(v);
        trainer.state.bad_epochs = 0;
    }
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0usize;
    while trainer.state.epoch < trainer.config.epochs && !trainer.state.stopped {
        let m = trainer.step(data)?;
        epoch_sum += m.total;
        epoch_count += 1;
        if m.step % trainer.config.log_every as u64 == 0 {
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(
                    w,
                    "{},{},{:.9e},{:.9e},{:.9e},{:.3}",
                    m.step,
                    m.epoch,
                    m.matching,
                    m.mlm,
                    m.total,
                    start.elapsed().as_secs_f64()
                )?;
            }
        }
        steps.push(m);
        if m.end_of_epoch {
            let v = validation_loss(&trainer.model, data, &trainer.config)?;
            trainer.observe_validation(v);
            epochs.push(EpochRecord {
                epoch: m.epoch,
                mean_train_loss: epoch_sum / epoch_count as f64,
                validation_loss: v,
            });
            epoch_sum = 0.0;
            epoch_count = 0;
            if let Some(f) = on_epoch.as_deref_mut() {
                f(trainer)?;
            }
        }
    }
    let mut model = trainer.model.clone();
    if let Some(best) = &trainer.best {
        model.params = best.clone();
    }
    Ok(PretrainOutcome {
        model,
        vocab: trainer.vocab.clone(),
        initial_validation: trainer.state.initial_validation,
        best_validation: trainer.state.best_validation,
        epochs,
        steps,
        stopped_early: trainer.state.stopped,
    })
}

/// Splits the corpus, builds a fresh model and trains it.
pub fn pretrain(
    corpus: &Corpus,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    sinks: PretrainSinks<'_>,
) -> Result<PretrainOutcome> {
    let data = prepare_training_data(corpus, model_config, train_config)?;
    let model = build_model(model_config)?;
    let mut trainer = Trainer::new(model, data.vocab.clone(), train_config.clone())?;
    run_training(&mut trainer, &data, sinks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use crate::model::VariantKind;

    pub(crate) fn tiny_setup(seed: u64, c: usize) -> (Corpus, ModelConfig, TrainConfig) {
        let corpus = generate_synthetic(&SyntheticConfig {
            seed,
            ..SyntheticConfig::tiny()
        })
        .unwrap()
        .into_corpus();
        let model = ModelConfig {
            variant: VariantKind::Guim,
            d: 16,
            count: c,
            layers: 1,
            heads: 2,
            top_x: 100,
            num_categories: corpus.catalog.num_categories(),
            word_vocab_size: corpus.catalog.word_vocab_size(),
            max_len: 24,
            seed,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        (corpus, model, train)
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let (t, v) = split_users(200, 0.1, 5);
        assert_eq!(v.len(), 20);
        assert_eq!(t.len(), 180);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split_users(200, 0.1, 5), (t, v));
    }

    #[test]
    fn trailing_singleton_joins_previous_batch() {
        let order: Vec<usize> = (0..5).collect();
        assert_eq!(batch_chunks(&order, 2), vec![vec![0, 1], vec![2, 3, 4]]);
        assert_eq!(batch_chunks(&order[..1], 2), vec![vec![0]]);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (corpus, mcfg, tcfg) = tiny_setup(1, 2);
        let tcfg = TrainConfig { epochs: 0, ..tcfg };
        let out = pretrain(&corpus, &mcfg, &tcfg, PretrainSinks::default()).unwrap();
        assert_eq!(out.model, build_model(&mcfg).unwrap());
        assert!(out.steps.is_empty());
    }

    #[test]
    fn zero_learning_rate_leaves_params_and_reports_losses() {
        let (corpus, mcfg, tcfg) = tiny_setup(2, 2);
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            ..tcfg
        };
        let data = prepare_training_data(&corpus, &mcfg, &tcfg).unwrap();
        let mut tr = Trainer::new(build_model(&mcfg).unwrap(), data.vocab.clone(), tcfg).unwrap();
        let before = tr.model.params.clone();
        let m = tr.step(&data).unwrap();
        assert_eq!(tr.model.params, before);
        assert!(m.total > 0.0 && m.matching > 0.0 && m.mlm > 0.0);
    }

    #[test]
    fn training_makes_progress_on_tiny_corpus() {
        for seed in 0..3 {
            let (corpus, mcfg, tcfg) = tiny_setup(seed, 2);
            let data = prepare_training_data(&corpus, &mcfg, &tcfg).unwrap();
            let mut tr = Trainer::new(build_model(&mcfg).unwrap(), data.vocab.clone(), tcfg).unwrap();
            let totals: Vec<f64> = (0..51).map(|_| tr.step(&data).unwrap().total).collect();
            let early = totals[..11].iter().sum::<f64>() / 11.0;
            let late = totals[40..].iter().sum::<f64>() / 11.0;
            assert!(late < early, "seed {seed}: {late} !< {early}");
        }
    }

    #[test]
    fn identical_runs_have_identical_losses() {
        let (corpus, mcfg, tcfg) = tiny_setup(4, 2);
        let data = prepare_training_data(&corpus, &mcfg, &tcfg).unwrap();
        let run = || {
            let mut tr = Trainer::new(build_model(&mcfg).unwrap(), data.vocab.clone(), tcfg.clone()).unwrap();
            (0..10).map(|_| tr.step(&data).unwrap().total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_config_pairs_round_trip() {
        let c = TrainConfig {
            grad_clip_norm: Some(2.5),
            learning_rate: 3e-4,
            ..TrainConfig::default()
        };
        let pairs = c.to_pairs();
        let back = TrainConfig::default()
            .apply_pairs(pairs.iter().map(|(k, v)| (*k, v.as_str())))
            .unwrap();
        assert_eq!(back, c);
    }
}
