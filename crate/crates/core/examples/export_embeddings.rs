// Infer user vector sets and item vectors and print them in export format.

use guim::corpus::{generate_synthetic, SyntheticConfig};
use guim::eval::{infer_embeddings, write_item_embeddings, write_user_embeddings};
use guim::model::{build_model, ModelConfig, PreparedCatalog};
use guim::embedder::build_item_vocab;
use guim::corpus::Corpus;

pub fn run() -> guim::Result<()> {
    let corpus = generate_synthetic(&SyntheticConfig::tiny())?.into_corpus();
    let cfg = ModelConfig {
        d: 4,
        count: 2,
        top_x: 100,
        max_len: 24,
        num_categories: corpus.catalog.num_categories(),
        word_vocab_size: corpus.catalog.word_vocab_size(),
        ..ModelConfig::default()
    };
    let model = build_model(&cfg)?;
    let counts = Corpus::purchase_counts(&corpus.catalog, &corpus.sequences);
    let vocab = build_item_vocab(&corpus.catalog, &counts, cfg.top_x)?;
    let prepared = PreparedCatalog::new(&corpus.catalog, &vocab);
    let ids: Vec<u64> = corpus.catalog.items().iter().take(3).map(|it| it.item_id).collect();
    let emb = infer_embeddings(&model, &corpus.catalog, &prepared, &corpus.sequences[..3], None, &ids)?;
    let mut stdout = std::io::stdout().lock();
    println!("# users: id, then {} vectors of width {} concatenated", cfg.count, cfg.d);
    write_user_embeddings(&mut stdout, &emb.users)?;
    println!("# items");
    write_item_embeddings(&mut stdout, &emb.item_ids, &emb.items)?;
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
