// Analytic gradients against central differences for every variant.

use guim::corpus::{generate_synthetic, SyntheticConfig};
use guim::model::{build_model, draw_plan, ModelConfig, VariantKind};
use guim::trainer::{fixture_batch, grad_check, GradCheckConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run() -> guim::Result<()> {
    let corpus = generate_synthetic(&SyntheticConfig::tiny())?.into_corpus();
    for (variant, count) in [(VariantKind::Guim, 2), (VariantKind::GuiEdi, 2), (VariantKind::GuimMh, 2)] {
        let cfg = ModelConfig {
            variant,
            d: 8,
            count,
            d_c: 4,
            d_i: 4,
            d_w: 4,
            top_x: 120,
            num_categories: corpus.catalog.num_categories(),
            word_vocab_size: corpus.catalog.word_vocab_size(),
            max_len: 16,
            ..ModelConfig::default()
        };
        let model = build_model(&cfg)?;
        let (catalog, batch) = fixture_batch(&corpus, &cfg, 4, 12)?;
        let plan = draw_plan(&batch, 0.3, 3, &mut ChaCha8Rng::seed_from_u64(1))?;
        let r = grad_check(&model, &catalog, &batch, &plan, &GradCheckConfig::default())?;
        println!(
            "{variant:<8} {:>4} coordinates  max rel error {:.2e} ({})",
            r.checked, r.max_rel_error, r.worst_block
        );
        for b in &r.blocks {
            println!("    {:<28} {:>3}  {:.2e}", b.name, b.checked, b.max_rel_error);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
