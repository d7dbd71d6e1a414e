//! Flat `key = value` run configuration.
//!
//! Lines are `group.key = value`; `#` starts a comment. Groups: `synth`,
//! `model`, `train`, `eval`, `gradcheck`, `paths`, plus the top-level keys
//! `seed` and `threads`. A single `seed` drives every random choice; unknown
//! keys are rejected with their name.

use std::path::{Path, PathBuf};

use crate::corpus::{SyntheticConfig, Window};
use crate::error::{GuimError, Result};
use crate::eval::{Backend, CppConfig, CppTask, EvalConfig};
use crate::model::ModelConfig;
use crate::trainer::{GradCheckConfig, TrainConfig};

/// Parses `key = value` lines; the result keeps file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| GuimError::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub check: GradCheckConfig,
    pub batch: usize,
    pub seq_len: usize,
    pub k: usize,
    pub mask_prob: f64,
    pub threshold: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            check: GradCheckConfig::default(),
            batch: 4,
            seq_len: 12,
            k: 3,
            mask_prob: 0.3,
            threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub cmp: EvalConfig,
    /// `L`, `S`, `N`, `all` or `cpp`.
    pub protocol: String,
    pub cpp: CppConfig,
    pub cpp_task: CppTask,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            cmp: EvalConfig::default(),
            protocol: "all".into(),
            cpp: CppConfig::default(),
            cpp_task: CppTask::DominantCluster,
        }
    }
}

/// Paths resolved against the output directory when relative.
#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub resume: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            checkpoint: "model.ckpt".into(),
            resume: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub synth: SyntheticConfig,
    /// `num_categories` / `word_vocab_size` of 0 are taken from the corpus.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub gradcheck: GradCheckSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    /// The tiny synthetic corpus with a d = 16, C = 2, single-layer model.
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            synth: SyntheticConfig::tiny(),
            model: ModelConfig {
                count: 2,
                num_categories: 0,
                word_vocab_size: 0,
                top_x: 100,
                max_len: 24,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            gradcheck: GradCheckSettings::default(),
            paths: Paths::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| GuimError::Config(format!("invalid value `{v}` for key `{key}`")))
}

fn range(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| GuimError::Config(format!("`{key}` expects `lo,hi`, got `{v}`")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GuimError::file(path, e))?;
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(&text)?)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Sets one key, then re-spreads `seed` to every component.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (group, name) = key.split_once('.').unwrap_or(("", key));
        let unknown = || GuimError::UnknownKey(key.to_string());
        match group {
            "" => match name {
                "seed" => self.seed = num(key, v)?,
                "threads" => self.threads = Some(num(key, v)?),
                _ => return Err(unknown()),
            },
            "model" => {
                if name == "seed" || !ModelConfig::KEYS.contains(&name) {
                    return Err(unknown());
                }
                self.model = self.model.clone().apply_pairs([(name, v)])?;
            }
            "train" => {
                if name == "seed" || !TrainConfig::KEYS.contains(&name) {
                    return Err(unknown());
                }
                self.train = self.train.clone().apply_pairs([(name, v)])?;
            }
            "synth" => self.set_synth(key, name, v)?,
            "eval" => self.set_eval(key, name, v)?,
            "gradcheck" => {
                let g = &mut self.gradcheck;
                match name {
                    "epsilon" => g.check.epsilon = num(key, v)?,
                    "samples" => g.check.samples = num(key, v)?,
                    "abs_floor" => g.check.abs_floor = num(key, v)?,
                    "richardson" => g.check.richardson = num(key, v)?,
                    "batch" => g.batch = num(key, v)?,
                    "seq_len" => g.seq_len = num(key, v)?,
                    "k" => g.k = num(key, v)?,
                    "mask_prob" => g.mask_prob = num(key, v)?,
                    "threshold" => g.threshold = num(key, v)?,
                    _ => return Err(unknown()),
                }
            }
            "paths" => match name {
                "corpus" => self.paths.corpus = v.into(),
                "checkpoint" => self.paths.checkpoint = v.into(),
                "resume" => self.paths.resume = (!v.is_empty()).then(|| v.into()),
                _ => return Err(unknown()),
            },
            _ => return Err(unknown()),
        }
        self.spread_seed();
        Ok(())
    }

    fn set_synth(&mut self, key: &str, name: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        match name {
            "num_users" => s.num_users = num(key, v)?,
            "num_items" => s.num_items = num(key, v)?,
            "num_categories" => s.num_categories = num(key, v)?,
            "num_clusters" => s.num_clusters = num(key, v)?,
            "interests_per_user" => s.interests_per_user = range(key, v)?,
            "popularity_skew" => s.popularity_skew = num(key, v)?,
            "seq_length_range" => s.seq_length_range = range(key, v)?,
            "post_length_range" => s.post_length_range = range(key, v)?,
            "title_length_range" => s.title_length_range = range(key, v)?,
            "words_per_cluster" => s.words_per_cluster = num(key, v)?,
            "stop_words" => s.stop_words = num(key, v)?,
            "stop_word_rate" => s.stop_word_rate = num(key, v)?,
            "cutoff" => s.cutoff = num(key, v)?,
            "pre_days" => s.window = Window::new(num(key, v)?, s.window.post_days),
            "post_days" => s.window = Window::new(s.window.pre_days, num(key, v)?),
            "preset" => {
                let seed = s.seed;
                *s = match v {
                    "tiny" => SyntheticConfig::tiny(),
                    "standard" => SyntheticConfig::default(),
                    _ => return Err(GuimError::Config(format!("unknown preset `{v}`"))),
                };
                s.seed = seed;
            }
            _ => return Err(GuimError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn set_eval(&mut self, key: &str, name: &str, v: &str) -> Result<()> {
        let e = &mut self.eval;
        match name {
            "m" => e.cmp.m = num(key, v)?,
            "candidate_pool" => e.cmp.candidate_pool = num(key, v)?,
            "protocol" => {
                if !matches!(v, "all" | "cpp") {
                    v.parse::<crate::eval::Protocol>()?;
                }
                e.protocol = v.to_string();
            }
            "backend" => {
                e.cmp.backend = match v {
                    "exact" => Backend::Exact,
                    "approximate" => Backend::Approximate { nlist: 32, nprobe: 8 },
                    _ => return Err(GuimError::Config(format!("unknown backend `{v}`"))),
                }
            }
            "nlist" | "nprobe" => {
                let n: usize = num(key, v)?;
                let (mut nlist, mut nprobe) = match e.cmp.backend {
                    Backend::Approximate { nlist, nprobe } => (nlist, nprobe),
                    Backend::Exact => (32, 8),
                };
                if name == "nlist" {
                    nlist = n;
                } else {
                    nprobe = n;
                }
                e.cmp.backend = Backend::Approximate { nlist, nprobe };
            }
            "cpp_task" => e.cpp_task = v.parse()?,
            "cpp_epochs" => e.cpp.epochs = num(key, v)?,
            "cpp_hidden" => e.cpp.hidden = range(key, v)?,
            "cpp_learning_rate" => e.cpp.learning_rate = num(key, v)?,
            "cpp_test_fraction" => e.cpp.test_fraction = num(key, v)?,
            _ => return Err(GuimError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn spread_seed(&mut self) {
        self.synth.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.cmp.seed = self.seed;
        self.eval.cpp.seed = self.seed;
        self.gradcheck.check.seed = self.seed;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.spread_seed();
        self
    }

    /// Model configuration with corpus-dependent sizes filled in.
    pub fn model_for(&self, catalog: &crate::corpus::Catalog) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.num_categories == 0 {
            m.num_categories = catalog.num_categories();
        }
        if m.word_vocab_size == 0 {
            m.word_vocab_size = catalog.word_vocab_size();
        }
        m.validate()?;
        Ok(m)
    }
}
