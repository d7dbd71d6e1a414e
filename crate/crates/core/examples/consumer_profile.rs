// Predict each user's dominant interest cluster from frozen user vectors.

use guim::corpus::{generate_synthetic, SyntheticConfig};
use guim::eval::{cpp_labels, infer_user_embeddings, train_cpp_classifier, CppConfig, CppTask};
use guim::model::ModelConfig;
use guim::trainer::{prepare_training_data, pretrain, PretrainSinks, TrainConfig};

pub fn run() -> guim::Result<()> {
    let syn = generate_synthetic(&SyntheticConfig::tiny())?;
    let truth = syn.truth.clone();
    let corpus = syn.into_corpus();
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
        ..TrainConfig::default()
    };
    let out = pretrain(&corpus, &mcfg, &tcfg, PretrainSinks::default())?;
    let data = prepare_training_data(&corpus, &mcfg, &tcfg)?;
    let (users, _) = infer_user_embeddings(&out.model, &corpus.catalog, &data.catalog, &corpus.sequences, None)?;
    let ids: Vec<u64> = users.iter().map(|u| u.user_id).collect();
    let features: Vec<Vec<f64>> = users.iter().map(|u| u.vectors.concat()).collect();
    for task in [CppTask::DominantCluster, CppTask::DominantClusterParity] {
        let labels = cpp_labels(&truth, task, &ids);
        let r = train_cpp_classifier(&features, &labels, &CppConfig::default())?;
        println!(
            "{task:?}: test accuracy {:.3} (train {:.3}, majority {:.3}) on {} users",
            r.test_accuracy, r.train_accuracy, r.majority_rate, r.test_size
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
