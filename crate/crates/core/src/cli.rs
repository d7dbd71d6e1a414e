//! Subcommands behind the `guim` binary.
//!
//! Every command reads a [`RunConfig`], resolves relative paths against the
//! output directory and writes plain files there. Apart from the `wall_time`
//! column of `metrics.csv`, outputs depend only on the config.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::{generate_synthetic, load_corpus, save_corpus, Corpus};
use crate::error::{GuimError, Result};
use crate::eval::{
    cpp_labels, infer_embeddings, run_cmp, train_cpp_classifier, write_item_embeddings, write_results,
    write_user_embeddings, CmpResult, CppResult, Protocol, ResultRow,
};
use crate::model::{build_model, count_parameters, draw_plan, Component, Model, PreparedCatalog};
use crate::trainer::{
    fixture_batch, grad_check, load_checkpoint, prepare_training_data, run_training, save_checkpoint, split_users,
    Checkpoint, GradCheckReport, PretrainOutcome, PretrainSinks, Trainer,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.tsv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const RESULTS_FILE: &str = "results.tsv";
pub const CPP_FILE: &str = "cpp.tsv";
pub const PARAMS_FILE: &str = "params.tsv";
pub const GRADCHECK_FILE: &str = "gradcheck.tsv";
pub const USERS_FILE: &str = "users.tsv";
pub const ITEMS_FILE: &str = "items.tsv";

#[derive(Debug, Parser)]
#[command(name = "guim", version, about = "Multi-interest user/item embedding pre-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; relative config paths resolve against it.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Pre-train a model; writes checkpoints and a metrics log.
    Pretrain,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
    /// Print the parameter breakdown of the configured model.
    Params,
    /// CMP retrieval or CPP classification from a checkpoint.
    Eval {
        /// L, S, N, all or cpp (overrides `eval.protocol`).
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Write user and item embeddings.
    Export,
}

impl Cli {
    /// File values, then `--set`, then `--seed` / `--threads`.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| GuimError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        Ok(cfg)
    }
}

/// Exit code for an error: 2 for usage problems, 1 otherwise.
pub fn exit_code(e: &GuimError) -> i32 {
    match e {
        GuimError::Config(_)
        | GuimError::UnknownKey(_)
        | GuimError::Parse { .. }
        | GuimError::TooManyResults { .. }
        | GuimError::File { .. } => 2,
        _ => 1,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run(cli: &Cli, log: &mut dyn Write) -> Result<i32> {
    let cfg = cli.run_config()?;
    if let Some(n) = cfg.threads {
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| GuimError::file(out, e))?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, out, log).map(|_| 0),
        Command::Pretrain => cmd_pretrain(&cfg, out, log).map(|_| 0),
        Command::Gradcheck => {
            let r = cmd_gradcheck(&cfg, out, log)?;
            Ok(if r.max_rel_error < cfg.gradcheck.threshold { 0 } else { 1 })
        }
        Command::Params => cmd_params(&cfg, out, log).map(|_| 0),
        Command::Eval { protocol } => {
            let p = protocol.clone().unwrap_or_else(|| cfg.eval.protocol.clone());
            cmd_eval(&cfg, &p, out, log).map(|_| 0)
        }
        Command::Export => cmd_export(&cfg, out, log).map(|_| 0),
    }
}

pub fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| GuimError::file(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| GuimError::file(path, e))?))
}

fn read_corpus(cfg: &RunConfig, out: &Path) -> Result<Corpus> {
    let dir = resolve(out, &cfg.paths.corpus);
    if !dir.is_dir() {
        return Err(GuimError::file(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    load_corpus(dir)
}

/// Writes the synthetic corpus to `paths.corpus`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<Corpus> {
    let corpus = generate_synthetic(&cfg.synth)?.into_corpus();
    let dir = resolve(out, &cfg.paths.corpus);
    save_corpus(&dir, &corpus)?;
    writeln!(
        log,
        "synth: {} users, {} items -> {}",
        corpus.sequences.len(),
        corpus.catalog.len(),
        dir.display()
    )?;
    Ok(corpus)
}

/// Trains from scratch, or from `paths.resume`, saving `last.ckpt` after every
/// epoch and the best-validation model to `paths.checkpoint`.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<PretrainOutcome> {
    let corpus = read_corpus(cfg, out)?;
    let mut trainer = match &cfg.paths.resume {
        Some(p) => {
            let mut t = Trainer::from_checkpoint(load_checkpoint(resolve(out, p))?);
            t.config.epochs = cfg.train.epochs;
            t
        }
        None => {
            let mcfg = cfg.model_for(&corpus.catalog)?;
            let data = prepare_training_data(&corpus, &mcfg, &cfg.train)?;
            Trainer::new(build_model(&mcfg)?, data.vocab, cfg.train.clone())?
        }
    };
    let data = prepare_training_data(&corpus, &trainer.model.config, &trainer.config)?;
    let last = out.join(LAST_CHECKPOINT);
    let mut metrics = create(&out.join(METRICS_FILE))?;
    let mut save_last = |t: &Trainer| save_checkpoint(&last, &t.checkpoint());
    let outcome = run_training(
        &mut trainer,
        &data,
        PretrainSinks {
            metrics: Some(&mut metrics),
            on_epoch: Some(&mut save_last),
        },
    )?;
    metrics.flush()?;
    save_checkpoint(&last, &trainer.checkpoint())?;
    let mut best = trainer.checkpoint();
    best.model = outcome.model.clone();
    let ckpt = resolve(out, &cfg.paths.checkpoint);
    if let Some(dir) = ckpt.parent() {
        std::fs::create_dir_all(dir).map_err(|e| GuimError::file(dir, e))?;
    }
    save_checkpoint(&ckpt, &best)?;

    let mut epochs = create(&out.join(EPOCHS_FILE))?;
    writeln!(epochs, "epoch\tmean_batch_train_loss\tvalidation_loss")?;
    writeln!(epochs, "init\t\t{:.9e}", outcome.initial_validation)?;
    for e in &outcome.epochs {
        writeln!(epochs, "{}\t{:.9e}\t{:.9e}", e.epoch, e.mean_train_loss, e.validation_loss)?;
    }
    epochs.flush()?;
    writeln!(
        log,
        "pretrain: {} epochs, validation {:.6} -> {:.6}{}",
        trainer.state.epoch,
        outcome.initial_validation,
        outcome.best_validation,
        if outcome.stopped_early { " (early stop)" } else { "" }
    )?;
    Ok(outcome)
}

/// Finite-difference check on a fixed batch drawn from the synthetic corpus.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<GradCheckReport> {
    let g = &cfg.gradcheck;
    let corpus = generate_synthetic(&cfg.synth)?.into_corpus();
    let mcfg = cfg.model_for(&corpus.catalog)?;
    let model = build_model(&mcfg)?;
    let (catalog, batch) = fixture_batch(&corpus, &mcfg, g.batch, g.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = draw_plan(&batch, g.mask_prob, g.k, &mut rng)?;
    let r = grad_check(&model, &catalog, &batch, &plan, &g.check)?;
    let mut f = create(&out.join(GRADCHECK_FILE))?;
    writeln!(f, "block\tchecked\tskipped\tmax_rel_error")?;
    for b in &r.blocks {
        writeln!(f, "{}\t{}\t{}\t{:.6e}", b.name, b.checked, b.skipped, b.max_rel_error)?;
    }
    f.flush()?;
    let verdict = if r.max_rel_error < g.threshold { "PASS" } else { "FAIL" };
    writeln!(
        log,
        "gradcheck {verdict}: max relative error {:.3e} in {}[{}] over {} coordinates ({} skipped), threshold {:.0e}",
        r.max_rel_error, r.worst_block, r.worst_index, r.checked, r.skipped, g.threshold
    )?;
    Ok(r)
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Pre-trains the configured variant on `corpus` and scores it with the
/// configured CMP protocol on the held-out users.
pub fn pretrain_and_score(cfg: &RunConfig, corpus: &Corpus, protocol: Protocol) -> Result<(PretrainOutcome, CmpResult)> {
    let mcfg = cfg.model_for(&corpus.catalog)?;
    let data = prepare_training_data(corpus, &mcfg, &cfg.train)?;
    let mut trainer = Trainer::new(build_model(&mcfg)?, data.vocab.clone(), cfg.train.clone())?;
    let outcome = run_training(&mut trainer, &data, PretrainSinks::default())?;
    let r = run_cmp(
        &outcome.model,
        &data.catalog,
        corpus,
        &data.validation_indices,
        protocol,
        &cfg.eval.cmp,
    )?;
    Ok((outcome, r))
}

/// Component breakdown of the configured model; returns the headline total.
pub fn cmd_params(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<usize> {
    let m = &cfg.model;
    let counts = count_parameters(m);
    let mut f = create(&out.join(PARAMS_FILE))?;
    writeln!(f, "component\tparameters")?;
    writeln!(log, "{} C={} d={} L={}", m.variant, m.count, m.d, m.layers)?;
    for c in Component::HEADLINE {
        writeln!(f, "{}\t{}", c.label(), counts.get(c))?;
        writeln!(log, "  {:<34} {:>12}", c.label(), thousands(counts.get(c)))?;
    }
    let total = counts.headline_total();
    writeln!(f, "total\t{total}")?;
    writeln!(log, "  {:<34} {:>12}", "Total", thousands(total))?;
    writeln!(log, "  not in total:")?;
    let extras = [
        (Component::MhAttention.label(), counts.get(Component::MhAttention)),
        (Component::Other.label(), counts.get(Component::Other)),
        ("Lookup tables", counts.lookup_tables_total()),
    ];
    for (label, n) in extras {
        if n == 0 && label == Component::MhAttention.label() {
            continue;
        }
        writeln!(f, "{label}\t{n}")?;
        writeln!(log, "  {:<34} {:>12}", label, thousands(n))?;
    }
    f.flush()?;
    Ok(total)
}

struct Loaded {
    corpus: Corpus,
    checkpoint: Checkpoint,
    prepared: PreparedCatalog,
}

fn load_for_eval(cfg: &RunConfig, out: &Path) -> Result<Loaded> {
    let corpus = read_corpus(cfg, out)?;
    let checkpoint = load_checkpoint(resolve(out, &cfg.paths.checkpoint))?;
    let prepared = PreparedCatalog::new(&corpus.catalog, &checkpoint.vocab);
    Ok(Loaded {
        corpus,
        checkpoint,
        prepared,
    })
}

fn validation_indices(corpus: &Corpus, ck: &Checkpoint) -> Vec<usize> {
    split_users(corpus.sequences.len(), ck.train.validation_fraction, ck.train.seed).1
}

/// CMP over the checkpoint's validation users, or CPP when `protocol` is `cpp`.
pub fn cmd_eval(cfg: &RunConfig, protocol: &str, out: &Path, log: &mut dyn Write) -> Result<Vec<ResultRow>> {
    if protocol.eq_ignore_ascii_case("cpp") {
        let r = cmd_eval_cpp(cfg, out, log)?;
        return Ok(vec![ResultRow {
            protocol: "CPP".into(),
            m: 0,
            c: cfg.model.count,
            seed: cfg.seed,
            users: r.test_size,
            mean: r.test_accuracy,
            p25: f64::NAN,
            p50: f64::NAN,
            p75: f64::NAN,
        }]);
    }
    let protocols: Vec<Protocol> = if protocol.eq_ignore_ascii_case("all") {
        Protocol::ALL.to_vec()
    } else {
        vec![protocol.parse()?]
    };
    let l = load_for_eval(cfg, out)?;
    let users = validation_indices(&l.corpus, &l.checkpoint);
    let model = &l.checkpoint.model;
    let mut rows = Vec::new();
    for p in protocols {
        let r = run_cmp(model, &l.prepared, &l.corpus, &users, p, &cfg.eval.cmp)?;
        writeln!(
            log,
            "{}: recall@{} mean {:.6} over {} users ({} candidates, {} excluded, {} skipped)",
            p,
            r.m,
            r.mean,
            r.per_user.len(),
            r.candidates,
            r.excluded,
            r.skipped
        )?;
        rows.push(ResultRow {
            protocol: p.name().into(),
            m: r.m,
            c: model.config.count,
            seed: cfg.seed,
            users: r.per_user.len(),
            mean: r.mean,
            p25: r.p25,
            p50: r.p50,
            p75: r.p75,
        });
    }
    let mut f = create(&out.join(RESULTS_FILE))?;
    write_results(&mut f, &rows)?;
    f.flush()?;
    Ok(rows)
}

fn cmd_eval_cpp(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<CppResult> {
    let l = load_for_eval(cfg, out)?;
    let syn = generate_synthetic(&cfg.synth)?;
    if syn.sequences != l.corpus.sequences {
        return Err(GuimError::Config(
            "CPP labels come from the synthetic generator; the corpus does not match `synth.*`".into(),
        ));
    }
    let model: &Model = &l.checkpoint.model;
    let emb = infer_embeddings(model, &l.corpus.catalog, &l.prepared, &l.corpus.sequences, None, &[])?;
    let ids: Vec<u64> = emb.users.iter().map(|u| u.user_id).collect();
    let features: Vec<Vec<f64>> = emb.users.iter().map(|u| u.vectors.concat()).collect();
    let labels = cpp_labels(&syn.truth, cfg.eval.cpp_task, &ids);
    let r = train_cpp_classifier(&features, &labels, &cfg.eval.cpp)?;
    let mut f = create(&out.join(CPP_FILE))?;
    writeln!(f, "task\tC\tseed\ttrain\ttest\ttrain_accuracy\ttest_accuracy\tmajority_rate")?;
    writeln!(
        f,
        "{:?}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
        cfg.eval.cpp_task,
        model.config.count,
        cfg.seed,
        r.train_size,
        r.test_size,
        r.train_accuracy,
        r.test_accuracy,
        r.majority_rate
    )?;
    f.flush()?;
    writeln!(
        log,
        "CPP {:?}: test accuracy {:.4} (majority {:.4}) on {} users",
        cfg.eval.cpp_task, r.test_accuracy, r.majority_rate, r.test_size
    )?;
    Ok(r)
}

/// User vectors from pre-cutoff history for every user, and all item vectors.
pub fn cmd_export(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<(usize, usize)> {
    let l = load_for_eval(cfg, out)?;
    let ids: Vec<u64> = l.corpus.catalog.items().iter().map(|it| it.item_id).collect();
    let emb = infer_embeddings(
        &l.checkpoint.model,
        &l.corpus.catalog,
        &l.prepared,
        &l.corpus.sequences,
        None,
        &ids,
    )?;
    let mut u = create(&out.join(USERS_FILE))?;
    write_user_embeddings(&mut u, &emb.users)?;
    u.flush()?;
    let mut i = create(&out.join(ITEMS_FILE))?;
    write_item_embeddings(&mut i, &emb.item_ids, &emb.items)?;
    i.flush()?;
    writeln!(
        log,
        "export: {} users ({} without history), {} items",
        emb.users.len(),
        emb.skipped,
        emb.item_ids.len()
    )?;
    Ok((emb.users.len(), emb.item_ids.len()))
}
