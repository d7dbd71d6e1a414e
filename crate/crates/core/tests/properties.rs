use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use guim::corpus::{
    day_bucket, generate_synthetic, read_sequences, split_at_cutoff, write_sequences, Interaction,
    InteractionSequence, Stamp, SyntheticConfig, Window, SECONDS_PER_DAY,
};
use guim::embedder::{EmbedderConfig, EmbeddingTables, ItemKey};
use guim::encoder::{apply_masking, EncoderConfig, EncoderParams};
use guim::eval::{recall_at_m, top_by_rank, top_m_retrieve, CandidateIndex};
use guim::model::{build_model, count_parameters, Component, ModelConfig, VariantKind};
use guim::objectives::{info_nce, score_max, score_mixture};
use guim::tensor::{gelu, Matrix};
use guim::trainer::TrainConfig;

const CUTOFF: i64 = 1_565_913_600;

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

fn user_set(c: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vector(d), c)
}

fn sequence() -> impl Strategy<Value = InteractionSequence> {
    let window = Window::new(365, 30);
    let lo = -window.pre_seconds();
    let hi = window.post_seconds();
    prop::collection::vec((0u64..500, lo..hi), 0..40).prop_map(move |mut v| {
        v.sort_by_key(|x| x.1);
        InteractionSequence {
            user_id: 7,
            interactions: v
                .into_iter()
                .map(|(item_id, off)| Interaction {
                    item_id,
                    timestamp: CUTOFF + off,
                })
                .collect(),
            cutoff: CUTOFF,
            window,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn cutoff_split_partitions(seq in sequence()) {
        let (pre, post) = split_at_cutoff(&seq).unwrap();
        prop_assert_eq!(pre.len() + post.len(), seq.interactions.len());
        prop_assert!(pre.iter().all(|a| a.timestamp < CUTOFF));
        prop_assert!(post.iter().all(|a| a.timestamp >= CUTOFF));
    }

    #[test]
    fn day_bucket_monotone_and_daily(a in 0i64..365 * SECONDS_PER_DAY, b in 0i64..365 * SECONDS_PER_DAY) {
        let start = CUTOFF - 365 * SECONDS_PER_DAY;
        let (lo, hi) = (a.min(b), a.max(b));
        let bl = day_bucket(Stamp::At(start + lo), CUTOFF, 365).unwrap();
        let bh = day_bucket(Stamp::At(start + hi), CUTOFF, 365).unwrap();
        prop_assert!(bl <= bh);
        if lo / SECONDS_PER_DAY == hi / SECONDS_PER_DAY {
            prop_assert_eq!(bl, bh);
        }
        prop_assert!(bl >= 1 && bh <= 365);
    }

    #[test]
    fn sequences_round_trip(seqs in prop::collection::vec(sequence(), 0..5)) {
        let mut buf = Vec::new();
        write_sequences(&mut buf, &seqs).unwrap();
        prop_assert_eq!(read_sequences(buf.as_slice()).unwrap(), seqs);
    }

    #[test]
    fn gelu_matches_erf_definition(x in -8.0f64..8.0) {
        let exact = 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        prop_assert!((gelu(x) - exact).abs() <= 1e-6);
    }

    #[test]
    fn word_mean_ignores_token_order(words in prop::collection::vec(0usize..20, 1..8), seed in 0u64..1000) {
        let cfg = EmbedderConfig { d: 6, d_c: 3, d_i: 3, d_w: 4, num_categories: 4, top_x: 10, word_vocab_size: 20, time_rows: 10, num_cls: 1 };
        let t = EmbeddingTables::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut rev = words.clone();
        rev.reverse();
        let a = t.embed_item(&ItemKey { category: 1, id_row: 2, words }).unwrap();
        let b = t.embed_item(&ItemKey { category: 1, id_row: 2, words: rev }).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn masking_selects_in_range_positions(n in 0usize..200, p in 0.0f64..1.0, seed in 0u64..1000) {
        let m = apply_masking(n, p, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(m.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.iter().all(|&i| i < n));
    }

    #[test]
    fn attention_rows_sum_to_one_and_padding_is_inert(n in 1usize..8, pad in 1usize..5, seed in 0u64..1000) {
        let cfg = EncoderConfig::new(2, 8, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderParams::init(&cfg, None, &mut rng).unwrap();
        let full = Matrix::uniform(n + pad, 8, 1.0, &mut rng);
        let mut head = Matrix::zeros(n, 8);
        for r in 0..n {
            head.row_mut(r).copy_from_slice(full.row(r));
        }
        let valid: Vec<bool> = (0..n + pad).map(|i| i < n).collect();
        let (h_pad, caches) = enc.encode(&full, 2, Some(&valid));
        let (h, _) = enc.encode(&head, 2, None);
        for r in 0..n {
            for (a, b) in h.row(r).iter().zip(h_pad.row(r)) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
        for c in &caches {
            for hd in 0..2 {
                let p = c.attention(hd);
                for r in 0..p.rows() {
                    let s: f64 = p.row(r).iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn max_score_is_best_one_hot_mixture(u in user_set(3, 5), v in vector(5)) {
        let alpha = 20.0;
        let s = score_max(&u, &v, alpha).unwrap();
        let best = (0..3)
            .map(|c| {
                let mut w = vec![0.0; 3];
                w[c] = 1.0;
                score_mixture(&u, &v, &w, alpha).unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(s.to_bits(), best.to_bits());
        prop_assert!(s.abs() <= alpha);
        let w = [0.2, 0.5, 0.3];
        prop_assert!(score_mixture(&u, &v, &w, alpha).unwrap().abs() <= alpha);
    }

    #[test]
    fn scores_ignore_positive_rescaling(u in user_set(2, 4), v in vector(4), k in 0.01f64..100.0) {
        let scaled: Vec<Vec<f64>> = u.iter().map(|x| x.iter().map(|y| y * k).collect()).collect();
        let vs: Vec<f64> = v.iter().map(|y| y * k).collect();
        let a = score_max(&u, &v, 20.0).unwrap();
        let b = score_max(&scaled, &vs, 20.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn never_winning_vector_leaves_max_unchanged(u in user_set(2, 4), extra in vector(4), items in prop::collection::vec(vector(4), 1..10)) {
        let alpha = 20.0;
        prop_assume!(items.iter().all(|v| score_max(&[&extra], v, alpha).unwrap() < score_max(&u, v, alpha).unwrap()));
        let mut extended = u.clone();
        extended.push(extra);
        for v in &items {
            prop_assert_eq!(score_max(&u, v, alpha).unwrap().to_bits(), score_max(&extended, v, alpha).unwrap().to_bits());
        }
    }

    #[test]
    fn info_nce_posterior_and_monotonicity(pos in -20.0f64..20.0, negs in prop::collection::vec(-20.0f64..20.0, 1..40), step in 0.01f64..5.0) {
        let r = info_nce(pos, &negs);
        prop_assert!((r.posterior.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(r.loss >= 0.0);
        let up = info_nce(pos + step, &negs);
        prop_assert!(up.loss < r.loss);
    }

    #[test]
    fn uniform_scores_give_log_k_plus_one(s in -20.0f64..20.0, k in 1usize..64) {
        let r = info_nce(s, &vec![s; k]);
        prop_assert!((r.loss - ((k + 1) as f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_m(scored in prop::collection::vec((0u64..50, -1.0f64..1.0), 1..50), positives in prop::collection::vec(0u64..50, 1..6), m in 1usize..50) {
        let mut dedup = std::collections::BTreeMap::new();
        for (id, s) in scored {
            dedup.insert(id, s);
        }
        let scored: Vec<(u64, f64)> = dedup.into_iter().collect();
        let m = m.min(scored.len());
        let ids = |k: usize| top_by_rank(scored.clone(), k).into_iter().map(|x| x.0).collect::<Vec<_>>();
        let small = recall_at_m(&ids(m.saturating_sub(1)), &positives).unwrap();
        let large = recall_at_m(&ids(m), &positives).unwrap();
        prop_assert!(small <= large);
    }

    #[test]
    fn monotone_transform_keeps_top_set(scored in prop::collection::vec(-5.0f64..5.0, 1..60), m in 1usize..60) {
        let a: Vec<(u64, f64)> = scored.iter().enumerate().map(|(i, &s)| (i as u64, s)).collect();
        let b: Vec<(u64, f64)> = a.iter().map(|&(i, s)| (i, (s / 2.0).exp() + 3.0)).collect();
        let m = m.min(a.len());
        let ia: Vec<u64> = top_by_rank(a, m).into_iter().map(|x| x.0).collect();
        let ib: Vec<u64> = top_by_rank(b, m).into_iter().map(|x| x.0).collect();
        prop_assert_eq!(ia, ib);
    }

    #[test]
    fn exact_retrieval_matches_brute_force(rows in prop::collection::vec(vector(3), 1..60), u in user_set(2, 3), m in 1usize..60) {
        let n = rows.len();
        let m = m.min(n);
        let idx = CandidateIndex::exact((0..n as u64).collect(), Matrix::from_rows(&rows).unwrap()).unwrap();
        let got = top_m_retrieve(&u, &idx, m, 20.0).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut brute: Vec<(u64, f64)> = rows
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u64, u.iter().map(|uc| 20.0 * cos(uc, v)).fold(f64::NEG_INFINITY, f64::max)))
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let want: Vec<u64> = brute[..m].iter().map(|x| x.0).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn train_config_round_trips(bs in 2usize..128, k in 1usize..64, lr in 1e-5f64..1e-1, seed in any::<u64>()) {
        let cfg = TrainConfig { batch_size: bs, k, learning_rate: lr, seed, ..TrainConfig::default() };
        let pairs = cfg.to_pairs();
        let back = TrainConfig::default().apply_pairs(pairs.iter().map(|(a, b)| (*a, b.as_str()))).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn synthetic_generation_is_pure() {
    let cfg = SyntheticConfig { seed: 5, ..SyntheticConfig::tiny() };
    assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
}

#[test]
fn counts_match_stored_tensors() {
    for variant in [VariantKind::Guim, VariantKind::GuiEdi, VariantKind::GuimMh] {
        for c in 1..=4 {
            let cfg = ModelConfig { variant, d: 8, count: c, layers: 2, heads: 2, top_x: 30, num_categories: 6, word_vocab_size: 25, max_len: 20, ..ModelConfig::default() };
            let model = build_model(&cfg).unwrap();
            assert_eq!(model.params.tally(), count_parameters(&cfg), "{variant} C={c}");
        }
    }
}

#[test]
fn guim_total_is_affine_in_c() {
    let total = |v, c| count_parameters(&ModelConfig::production(v, c));
    assert_eq!(total(VariantKind::Guim, 1).headline_total(), total(VariantKind::GuiEdi, 1).headline_total());
    for c in 1..8 {
        let (a, b) = (total(VariantKind::Guim, c), total(VariantKind::Guim, c + 1));
        assert_eq!(b.headline_total() - a.headline_total(), 128);
        for comp in Component::HEADLINE.iter().filter(|&&x| x != Component::ClsTable) {
            assert_eq!(a.get(*comp), b.get(*comp));
        }
    }
}

#[test]
fn per_layer_weights_are_twelve_d_squared() {
    for d in [4, 8, 128, 256] {
        assert_eq!(EncoderConfig::new(1, d, 2, 8).weights_per_layer(), 12 * d * d);
    }
}
