// Stop after 2 epochs, save, reload and finish: the result is bit-identical
// to an uninterrupted run.

use guim::corpus::{generate_synthetic, SyntheticConfig};
use guim::model::{build_model, ModelConfig};
use guim::trainer::{
    load_checkpoint, prepare_training_data, run_training, save_checkpoint, PretrainSinks, TrainConfig, Trainer,
};

pub fn run() -> guim::Result<()> {
    let corpus = generate_synthetic(&SyntheticConfig::tiny())?.into_corpus();
    let mcfg = ModelConfig {
        top_x: 100,
        max_len: 24,
        num_categories: corpus.catalog.num_categories(),
        word_vocab_size: corpus.catalog.word_vocab_size(),
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let data = prepare_training_data(&corpus, &mcfg, &tcfg)?;
    let fresh = || -> guim::Result<Trainer> { Trainer::new(build_model(&mcfg)?, data.vocab.clone(), tcfg.clone()) };

    let mut straight = fresh()?;
    run_training(&mut straight, &data, PretrainSinks::default())?;

    let path = std::env::temp_dir().join(format!("guim-resume-{}.ckpt", std::process::id()));
    let mut first = fresh()?;
    first.config.epochs = 2;
    run_training(&mut first, &data, PretrainSinks::default())?;
    save_checkpoint(&path, &first.checkpoint())?;
    println!("saved after step {} ({} bytes)", first.state.step, std::fs::metadata(&path)?.len());

    let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path)?);
    resumed.config.epochs = 4;
    run_training(&mut resumed, &data, PretrainSinks::default())?;
    std::fs::remove_file(&path)?;

    let same = straight.checkpoint() == resumed.checkpoint();
    println!("resumed run identical to uninterrupted run: {same}");
    assert!(same);
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
