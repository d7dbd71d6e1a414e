// Multi-vector top-M retrieval over exact and IVF indexes.

use guim::eval::{top_m_retrieve_scored, Backend, CandidateIndex};
use guim::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run() -> guim::Result<()> {
    let (n, d) = (5000, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ids: Vec<u64> = (0..n as u64).collect();
    let emb = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let exact = CandidateIndex::exact(ids.clone(), emb.clone())?;
    let ivf = CandidateIndex::build(ids, emb, &Backend::Approximate { nlist: 64, nprobe: 16 }, 7)?;

    let user: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let top = top_m_retrieve_scored(&user, &exact, 10, 20.0)?;
    println!("top 10 for a 3-vector user:");
    for (id, s) in &top {
        println!("  item {id:>5}  score {s:.4}");
    }
    let queries: Vec<Vec<f64>> = (0..100).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    println!("IVF recall against exact top-20: {:.3}", ivf.self_test_recall(&queries, 20)?);
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
