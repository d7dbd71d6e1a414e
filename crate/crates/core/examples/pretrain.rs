// Pre-train GUIM (C = 2) on the tiny corpus and print the loss curve.

use guim::corpus::{generate_synthetic, SyntheticConfig};
use guim::model::ModelConfig;
use guim::trainer::{pretrain, PretrainSinks, TrainConfig};

pub fn run() -> guim::Result<()> {
    let corpus = generate_synthetic(&SyntheticConfig::tiny())?.into_corpus();
    let model = ModelConfig {
        count: 2,
        top_x: 100,
        max_len: 24,
        num_categories: corpus.catalog.num_categories(),
        word_vocab_size: corpus.catalog.word_vocab_size(),
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 15,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let out = pretrain(
        &corpus,
        &model,
        &train,
        PretrainSinks {
            metrics: Some(&mut log),
            on_epoch: None,
        },
    )?;
    println!("epoch  validation loss");
    println!(" init  {:.4}", out.initial_validation);
    for e in &out.epochs {
        println!("{:>5}  {:.4}", e.epoch, e.validation_loss);
    }
    let drop = 1.0 - out.best_validation / out.initial_validation;
    println!("best {:.4} ({:.1}% below init), {} steps logged", out.best_validation, 100.0 * drop, out.steps.len());
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
