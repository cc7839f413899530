mod common;

use common::*;
use dprel::encoder::encode;
use dprel::graph::{load_graph, LoadOptions, Relation, TokenSeq};
use dprel::privacy::{ClippedSum, TupleGrad};
use dprel::sampler::{sample_batch_with_ratio, sample_negatives_decoupled};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Step-by-step scalar forward pass, sharing nothing with the library's
/// matrix kernels.
fn scalar_encode(p: &dprel::encoder::EncoderParams, tokens: &[u32]) -> Vec<f64> {
    let n_blocks = p.blocks.len();
    let mut pooled = vec![0.0; p.arch.output_dim()];
    for &t in tokens {
        let mut x: Vec<f64> = (0..p.arch.embed_dim).map(|j| p.embed[(t as usize, j)]).collect();
        for (l, b) in p.blocks.iter().enumerate() {
            let w = b.effective_weight();
            let mut o = vec![0.0; w.rows()];
            for i in 0..w.rows() {
                let mut s = b.bias[i];
                for j in 0..w.cols() {
                    s += w[(i, j)] * x[j];
                }
                o[i] = if l + 1 < n_blocks { s.tanh() } else { s };
            }
            x = o;
        }
        for (a, v) in pooled.iter_mut().zip(&x) {
            *a += v / tokens.len() as f64;
        }
    }
    pooled
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_matches_scalar_recomputation(seed in any::<u64>(), adapter in any::<bool>()) {
        let mut r = rng(seed);
        let p = random_params(&mut r, adapter);
        let len = r.gen_range(1..4);
        let toks: Vec<u32> = (0..len).map(|_| r.gen_range(1..p.arch.vocab_size as u32)).collect();
        let seq = TokenSeq::new(&toks, 3).unwrap();
        let (h, _) = encode(&p, &seq).unwrap();
        let want = scalar_encode(&p, &toks);
        for (a, b) in h.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let (again, _) = encode(&p, &seq).unwrap();
        prop_assert_eq!(h.clone(), again);
        let (padded, _) = encode(&p, &seq.repadded(7)).unwrap();
        prop_assert_eq!(h, padded);
    }

    #[test]
    fn decoupled_negatives_are_valid(seed in any::<u64>(), n in 4usize..60, k in 1usize..8) {
        prop_assume!(k + 2 <= n);
        let mut r = rng(seed);
        let u = r.gen_range(0..n as u32);
        let v = (u + r.gen_range(1..n as u32)) % n as u32;
        let pos = Relation::new(u, v).unwrap();
        let ts = r.gen();
        let neg = sample_negatives_decoupled(pos, k, n, ts).unwrap();
        prop_assert_eq!(neg.len(), k);
        prop_assert!(neg.iter().all(|&x| !pos.has(x) && (x as usize) < n));
        let mut sorted = neg.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert_eq!(neg, sample_negatives_decoupled(pos, k, n, ts).unwrap());
    }

    #[test]
    fn inclusion_ignores_other_relations(seed in any::<u64>(), step in 1u64..10_000) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, 25, 8, 2);
        let all = g.relations().to_vec();
        let mut subset = all.clone();
        subset.shuffle(&mut r);
        subset.truncate(all.len() / 2);
        subset.sort();
        let full = sample_batch_with_ratio(&all, 25, step, 0.4, 3, seed).unwrap();
        let part = sample_batch_with_ratio(&subset, 25, step, 0.4, 3, seed).unwrap();
        let expected: Vec<_> = full.tuples.iter().filter(|t| subset.contains(&t.positive)).cloned().collect();
        prop_assert_eq!(part.tuples, expected);
    }

    #[test]
    fn clipped_sum_is_order_independent(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = random_params(&mut r, seed % 2 == 0);
        let g = random_graph(&mut r, 12, p.arch.vocab_size, 4);
        let shapes = p.group_shapes().iter().map(|s| (s.rows, s.cols)).collect::<Vec<_>>();
        let mut grads = Vec::new();
        for _ in 0..6 {
            let t = random_tuple(&mut r, &g, 2);
            let (_, cache) = tuple_cache(&p, &g, &t, random_loss(&mut r));
            let mut tg = TupleGrad::from_cache(&cache).unwrap();
            tg.clip(0.5, None);
            prop_assert!(tg.norm() <= 0.5);
            grads.push(tg);
        }
        let mut a = ClippedSum::new(&shapes);
        grads.iter().for_each(|g| a.add_tuple(g).unwrap());
        grads.shuffle(&mut r);
        let mut b = ClippedSum::new(&shapes);
        grads.iter().for_each(|g| b.add_tuple(g).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn graph_files_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (n, v) = (r.gen_range(3..30), r.gen_range(3..50));
        let g = random_graph(&mut r, n, v, 6);
        let dir = tempfile::tempdir().unwrap();
        let (e, rel) = (dir.path().join("entities.tsv"), dir.path().join("relations.tsv"));
        g.save(&e, &rel).unwrap();
        let back = load_graph(&e, &rel, &LoadOptions::default()).unwrap();
        prop_assert_eq!(back.relations(), g.relations());
        prop_assert_eq!(back.n_entities(), g.n_entities());
        for i in 0..g.n_entities() as u32 {
            prop_assert_eq!(back.attributes(i), g.attributes(i));
        }
        let (e2, rel2) = (dir.path().join("e2.tsv"), dir.path().join("r2.tsv"));
        back.save(&e2, &rel2).unwrap();
        prop_assert_eq!(std::fs::read(&e).unwrap(), std::fs::read(&e2).unwrap());
        prop_assert_eq!(std::fs::read(&rel).unwrap(), std::fs::read(&rel2).unwrap());
    }
}
