use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rafcast_core::backbone::{Backbone, BackboneDims};
use rafcast_core::fusion::{Fusion, FusionPolicy};
use rafcast_core::kbase::KnowledgeBase;
use rafcast_core::numkit::Matrix;
use rafcast_core::retriever::{augment, retrieval_loss, top_k, RetrievalResult, Retriever};
use rafcast_core::trainer::{predict_raf, PreparedKb, RafModel, RetrievalPolicy, TrainConfig, Trainer};
use rafcast_core::tsdata::{sliding_windows, Series};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SL: usize = 16;

fn dims() -> BackboneDims {
    BackboneDims {
        sl: SL,
        fl: 4,
        patch_len: 4,
        d: 3,
    }
}

/// Domains of differing size; each series is a seeded noisy sinusoid.
fn corpus(seed: u64, sizes: &[(usize, usize)]) -> Vec<Series> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (d, &(n_series, windows)) in sizes.iter().enumerate() {
        for s in 0..n_series {
            let f = rng.random_range(0.02..0.3);
            let len = windows * SL + rng.random_range(0..SL);
            out.push(Series {
                values: (0..len)
                    .map(|t| (t as f64 * f).sin() + 0.1 * rng.random_range(-1.0..1.0) + d as f64)
                    .collect(),
                channel_id: "v".into(),
                dataset_id: format!("d{d}s{s}"),
                domain: format!("d{d}"),
                frequency: "h".into(),
            });
        }
    }
    out
}

fn sizes() -> impl Strategy<Value = Vec<(usize, usize)>> {
    proptest::collection::vec((1usize..4, 1usize..12), 2..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kb_is_balanced_disjoint_and_deterministic(sizes in sizes(), quota in 1usize..30, seed in 0u64..1000) {
        let data = corpus(seed, &sizes);
        let short = sizes.iter().any(|&(n, w)| n * w < quota);
        let kb = match KnowledgeBase::build(&data, SL, quota, seed) {
            Err(rafcast_core::Error::InsufficientWindows { available, needed, .. }) => {
                prop_assert!(short && available < needed);
                return Ok(());
            }
            r => r.unwrap(),
        };
        prop_assert!(!short);
        prop_assert_eq!(&kb, &KnowledgeBase::build(&data, SL, quota, seed).unwrap());
        prop_assert!(kb.domain_counts().values().all(|&c| c == quota));

        let mut seen: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
        for e in kb.entries() {
            seen.entry((&e.dataset_id, &e.channel_id)).or_default().push(e.start);
        }
        for starts in seen.values() {
            for (i, a) in starts.iter().enumerate() {
                for b in &starts[i + 1..] {
                    prop_assert!(a + SL <= *b || b + SL <= *a, "overlap at {} and {}", a, b);
                }
            }
        }
    }

    #[test]
    fn training_eligibility_never_includes_the_query(sizes in sizes(), seed in 0u64..1000, pick in 0usize..100) {
        let data = corpus(seed, &sizes);
        let kb = KnowledgeBase::build(&data, SL, 1, seed).unwrap();
        let query = &data[pick % data.len()].dataset_id;
        if let Ok(eligible) = kb.eligible_candidates(query, true, 1) {
            prop_assert!(eligible.iter().all(|&i| &kb.entry(i).dataset_id != query));
            let inference = kb.eligible_candidates(query, false, 1).unwrap();
            prop_assert_eq!(inference.len(), kb.len());
        }
    }

    #[test]
    fn score_all_has_set_semantics(seed in 0u64..1000, shuffle_seed in 0u64..1000) {
        let data = corpus(seed, &[(2, 6), (2, 6)]);
        let kb = KnowledgeBase::build(&data, SL, 10, seed).unwrap();
        let r = Retriever::new(SL, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let query: Vec<f64> = data[0].values[..SL].to_vec();
        let order: Vec<usize> = (0..kb.len()).collect();
        let mut shuffled = order.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let a = r.score_all(&query, &kb, &order).unwrap();
        let b = r.score_all(&query, &kb, &shuffled).unwrap();
        for (pos, &i) in shuffled.iter().enumerate() {
            prop_assert_eq!(b[pos], a[i]);
        }
    }

    #[test]
    fn augmented_indices_stay_distinct_and_eligible(
        n in 1usize..40,
        k in 1usize..10,
        rho in 0.0f64..=1.0,
        seed in 0u64..1000,
    ) {
        let k = k.min(n);
        let eligible: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64).collect();
        let pos = top_k(&scores, k).unwrap();
        let base = RetrievalResult::new(pos.iter().map(|&p| eligible[p]).collect(), pos.iter().map(|&p| scores[p]).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, _) = augment(base, &eligible, rho, &mut rng, |i| Ok(i as f64)).unwrap();
        prop_assert_eq!(out.k(), k);
        prop_assert_eq!(out.indices.iter().collect::<BTreeSet<_>>().len(), k);
        prop_assert!(out.indices.iter().all(|i| eligible.contains(i)));
        for ((&i, &s), &aug) in out.indices.iter().zip(&out.scores).zip(&out.augmented) {
            if aug {
                prop_assert_eq!(s, i as f64);
            }
        }
    }

    #[test]
    fn retrieval_loss_vanishes_exactly_at_the_target(scores in proptest::collection::vec(-4.0f64..4.0, 2..10), tau in 0.2f64..3.0) {
        let mut p: Vec<f64> = scores.iter().map(|s| (s / tau).exp()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        let (l, g) = retrieval_loss(&scores, &p, tau).unwrap();
        prop_assert!(l.abs() < 1e-9);
        prop_assert!(g.iter().all(|v| v.abs() < 1e-9));
        let mut q = p.clone();
        q.rotate_left(1);
        if q.iter().zip(&p).any(|(a, b)| (a - b).abs() > 1e-3) {
            prop_assert!(retrieval_loss(&scores, &q, tau).unwrap().0 > 1e-9);
        }
    }

    #[test]
    fn zero_fusion_output_is_the_bare_backbone(seed in 0u64..500, policy_pick in 0usize..2) {
        let policy = [FusionPolicy::ChannelPrompt, FusionPolicy::TokenConcat][policy_pick];
        let data = corpus(seed, &[(2, 8), (2, 8)]);
        let mut backbone = Backbone::new(dims(), seed).unwrap();
        backbone.freeze();
        let pkb = PreparedKb::new(KnowledgeBase::build(&data, SL, 12, seed).unwrap(), &backbone).unwrap();
        let cfg = TrainConfig { fusion_policy: policy, hyper: rafcast_core::retriever::RetrieverHyper { k: 4, ..Default::default() }, ..TrainConfig::default() };
        let model = RafModel::new(backbone.clone(), &cfg).unwrap();
        for pair in sliding_windows(&data[1], SL, 4, 9).iter().take(5) {
            prop_assert_eq!(predict_raf(&pair.x, &pkb, &model, &cfg).unwrap(), backbone.predict(&pair.x).unwrap());
        }
    }

    #[test]
    fn channel_prompt_ignores_candidate_order(seed in 0u64..1000, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (4, 3);
        let mut f = Fusion::new(FusionPolicy::ChannelPrompt, n, d, &mut rng).unwrap();
        let m = f.params_mut().unwrap();
        for i in 0..m.param_count() {
            *m.param_mut(i) = rng.random_range(-0.5..0.5);
        }
        let mut rand_emb = || Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x = rand_emb();
        let cands: Vec<Matrix> = (0..k).map(|_| rand_emb()).collect();
        let fwd: Vec<&Matrix> = cands.iter().collect();
        let rev: Vec<&Matrix> = cands.iter().rev().collect();
        let a = f.fuse(&x, &fwd).unwrap();
        let b = f.fuse(&x, &rev).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_leaves_the_backbone_bit_identical(seed in 0u64..500, steps in 1usize..12, retrieval in 0usize..3) {
        let policy = [RetrievalPolicy::Learned, RetrievalPolicy::Cosine, RetrievalPolicy::Random][retrieval];
        let data = corpus(seed, &[(2, 8), (2, 8)]);
        let mut backbone = Backbone::new(dims(), seed).unwrap();
        backbone.freeze();
        let before = backbone.fingerprint();
        let pkb = PreparedKb::new(KnowledgeBase::build(&data, SL, 12, seed).unwrap(), &backbone).unwrap();
        let cfg = TrainConfig {
            retrieval_policy: policy,
            lr_fusion: 1e-2,
            embed_dim: 8,
            seed,
            hyper: rafcast_core::retriever::RetrieverHyper { k: 3, ..Default::default() },
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(RafModel::new(backbone, &cfg).unwrap(), cfg).unwrap();
        let pairs = sliding_windows(&data[0], SL, 4, 5);
        for pair in pairs.iter().cycle().take(steps) {
            let s = t.train_step(pair, &pkb, 0).unwrap().unwrap();
            prop_assert_eq!(s.loss, s.pred_loss + cfg.lambda * s.retrieval_loss);
        }
        prop_assert_eq!(t.model().backbone.fingerprint(), before);
    }
}
