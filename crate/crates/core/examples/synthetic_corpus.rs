// Generate the tiny synthetic corpus, write it as JSON lines and read it back.

use guim::corpus::{generate_synthetic, load_corpus, save_corpus, split_at_cutoff, SyntheticConfig};

pub fn run() -> guim::Result<()> {
    let syn = generate_synthetic(&SyntheticConfig::tiny())?;
    let pre: usize = syn.sequences.iter().map(|s| split_at_cutoff(s).map(|p| p.0.len())).sum::<guim::Result<usize>>()?;
    let post: usize = syn.sequences.iter().map(|s| split_at_cutoff(s).map(|p| p.1.len())).sum::<guim::Result<usize>>()?;
    println!(
        "{} users, {} items, {} categories, {} words",
        syn.sequences.len(),
        syn.catalog.len(),
        syn.catalog.num_categories(),
        syn.catalog.word_vocab_size()
    );
    println!("{pre} purchases before the cutoff, {post} after");
    println!("user 0 interests: {:?}", syn.truth.user_interests[0]);

    let dir = std::env::temp_dir().join(format!("guim-synth-{}", std::process::id()));
    let corpus = syn.into_corpus();
    save_corpus(&dir, &corpus)?;
    let back = load_corpus(&dir)?;
    assert_eq!(back, corpus);
    println!("round trip through {} ok", dir.display());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
