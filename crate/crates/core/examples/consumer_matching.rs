// Pre-train on the tiny corpus, then score CMP-L/S/N recall@20 on the
// held-out users.

use guim::corpus::{generate_synthetic, SyntheticConfig};
use guim::eval::{run_cmp, EvalConfig, Protocol};
use guim::model::ModelConfig;
use guim::trainer::{prepare_training_data, pretrain, PretrainSinks, TrainConfig};

pub fn run() -> guim::Result<()> {
    let corpus = generate_synthetic(&SyntheticConfig::tiny())?.into_corpus();
    let mcfg = ModelConfig {
        count: 2,
        top_x: 100,
        max_len: 24,
        num_categories: corpus.catalog.num_categories(),
        word_vocab_size: corpus.catalog.word_vocab_size(),
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        epochs: 10,
        validation_fraction: 0.25,
        ..TrainConfig::default()
    };
    let out = pretrain(&corpus, &mcfg, &tcfg, PretrainSinks::default())?;
    let data = prepare_training_data(&corpus, &mcfg, &tcfg)?;
    let ecfg = EvalConfig {
        candidate_pool: 60,
        ..EvalConfig::default()
    };
    for p in Protocol::ALL {
        let r = run_cmp(&out.model, &data.catalog, &corpus, &data.validation_indices, p, &ecfg)?;
        println!(
            "{p}: recall@{} = {:.4} (p25 {:.3}, p50 {:.3}, p75 {:.3}) over {} users, {} candidates",
            r.m,
            r.mean,
            r.p25,
            r.p50,
            r.p75,
            r.per_user.len(),
            r.candidates
        );
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
