// CMP-L recall@M of GUIM(C=1), GUIM(C=4) and GUI-EDI(C=4) across seeds.
//
// With no argument this runs a quick pass on the tiny corpus. Pass a config
// file to run the full comparison on seeds 0..3, for example
// `cargo run --release --example compare_variants -- crates/core/configs/standard.conf`.

use guim::cli::pretrain_and_score;
use guim::config::RunConfig;
use guim::corpus::generate_synthetic;
use guim::eval::Protocol;
use guim::model::VariantKind;

fn compare(base: &RunConfig, seeds: &[u64]) -> guim::Result<()> {
    let runs = [("GUIM C=1", VariantKind::Guim, 1), ("GUIM C=4", VariantKind::Guim, 4), ("GUI-EDI C=4", VariantKind::GuiEdi, 4)];
    println!("seed  {:>12}  {:>12}  {:>12}", runs[0].0, runs[1].0, runs[2].0);
    for &seed in seeds {
        let cfg = base.clone().with_seed(seed);
        let corpus = generate_synthetic(&cfg.synth)?.into_corpus();
        print!("{seed:>4}");
        for (_, variant, count) in runs {
            let mut run = cfg.clone();
            run.model.variant = variant;
            run.model.count = count;
            let (_, r) = pretrain_and_score(&run, &corpus, Protocol::L)?;
            print!("  {:>12.4}", r.mean);
        }
        println!();
    }
    Ok(())
}

pub fn run() -> guim::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("train.epochs", "5")?;
    cfg.set("eval.candidate_pool", "60")?;
    compare(&cfg, &[0])
}

fn main() {
    let result = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path).and_then(|cfg| compare(&cfg, &[0, 1, 2])),
        None => run(),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
