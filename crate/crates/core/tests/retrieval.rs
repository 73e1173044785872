mod common;

use common::oracle;
use namecap_core::retrieval::{best_key_per_query, best_key_per_query_sequential, retrieve_batch};
use namecap_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    keys: Vec<Vec<f32>>,
    names: Vec<String>,
    queries: Vec<Vec<f32>>,
}

impl Instance {
    fn random(seed: u64, max_m: usize, max_d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..=max_m);
        let d = rng.random_range(1..=max_d);
        let n_names = rng.random_range(1..=m.min(40));
        let vec = |rng: &mut ChaCha8Rng| loop {
            let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            if v.iter().any(|&x| x != 0.0) {
                break v;
            }
        };
        let mut keys: Vec<Vec<f32>> = (0..m).map(|_| vec(&mut rng)).collect();
        // exact duplicates exercise the tie rules
        if m > 2 && rng.random_bool(0.3) {
            keys[m - 1] = keys[0].clone();
        }
        let names = (0..m).map(|_| format!("n{}", rng.random_range(0..n_names))).collect();
        let queries = (0..rng.random_range(1..=32)).map(|_| vec(&mut rng)).collect();
        Self { keys, names, queries }
    }

    fn memory(&self) -> VisualNameMemory {
        let recs: Vec<_> = self
            .keys
            .iter()
            .zip(&self.names)
            .map(|(k, n)| MemoryRecord::from_key(n.clone(), Embedding::new(k.clone()).unwrap(), Source::Synthetic))
            .collect();
        VisualNameMemory::build(&recs, self.keys[0].len()).unwrap()
    }

    fn block(&self) -> FeatureBlock {
        FeatureBlock::new(self.queries.clone()).unwrap()
    }
}

fn assert_matches_oracle(inst: &Instance, k: usize) {
    let got = retrieve_names(&inst.block(), &inst.memory(), &RetrievalConfig { k }).unwrap();
    let want = oracle::retrieve(&inst.keys, &inst.names, &inst.queries, k);
    assert_eq!(
        got.name_list(),
        want.iter().map(|h| h.name.as_str()).collect::<Vec<_>>()
    );
    for (g, w) in got.names.iter().zip(&want) {
        assert!((g.score - w.score).abs() <= 1e-6, "{} vs {}", g.score, w.score);
    }
}

#[test]
fn matches_brute_force_oracle_on_200_seeds() {
    for seed in 0..200 {
        let inst = Instance::random(seed, 512, 64);
        for k in [0, 1, 5, 10, 20] {
            assert_matches_oracle(&inst, k);
        }
    }
}

#[test]
fn frozen_hand_instance() {
    // expected values computed independently in double precision
    let keys: [(&str, [f32; 4]); 6] = [
        ("cat", [1.0, 0.0, 0.0, 1.0]),
        ("dog", [0.0, 1.0, 0.0, 0.5]),
        ("cat", [0.9, 0.1, 0.0, 1.2]),
        ("bus", [0.0, 0.0, 1.0, 0.0]),
        ("kite", [-1.0, 0.5, 0.5, 0.0]),
        ("dog", [0.1, 1.0, 0.1, 0.4]),
    ];
    let recs: Vec<_> = keys
        .iter()
        .map(|(n, k)| MemoryRecord::from_key(*n, Embedding::new(k.to_vec()).unwrap(), Source::Real))
        .collect();
    let mem = VisualNameMemory::build(&recs, 4).unwrap();
    let q = FeatureBlock::new(vec![
        vec![1.0, 0.1, 0.0, 1.0],
        vec![0.0, 1.0, 0.1, 0.5],
        vec![0.2, 0.2, 1.0, 0.0],
        vec![1.0, 0.0, 0.0, 1.1],
    ])
    .unwrap();
    let cands = best_key_per_query(&q, &mem).unwrap();
    assert_eq!(cands.iter().map(|c| c.entry_index).collect::<Vec<_>>(), [0, 1, 3, 0]);
    let r = retrieve_names(&q, &mem, &RetrievalConfig { k: 10 }).unwrap();
    let want = [
        ("cat", 0.9988681377244374),
        ("dog", 0.9960238411119947),
        ("bus", 0.9622504486493761),
    ];
    assert_eq!(r.names.len(), 3);
    for (g, (n, s)) in r.names.iter().zip(want) {
        assert_eq!(g.name, n);
        assert!((g.score - s).abs() < 1e-6);
    }
}

#[test]
fn argmax_scale_invariance_on_100_instances() {
    for seed in 0..100 {
        let mut inst = Instance::random(1000 + seed, 128, 32);
        let k = 10;
        let before = retrieve_names(&inst.block(), &inst.memory(), &RetrievalConfig { k }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: f32 = 2f32.powf(rng.random_range(-6.0..6.0));
        if seed % 2 == 0 {
            let i = rng.random_range(0..inst.keys.len());
            inst.keys[i].iter_mut().for_each(|v| *v *= a);
        } else {
            let j = rng.random_range(0..inst.queries.len());
            inst.queries[j].iter_mut().for_each(|v| *v *= a);
        }
        let after = retrieve_names(&inst.block(), &inst.memory(), &RetrievalConfig { k }).unwrap();
        assert_eq!(before.name_list(), after.name_list(), "seed {seed}, scale {a}");
    }
}

#[test]
fn every_key_retrieves_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let d = 48;
    let keys: Vec<Vec<f32>> = (0..1000)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let recs: Vec<_> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| MemoryRecord::from_key(format!("obj{i}"), Embedding::new(k.clone()).unwrap(), Source::Real))
        .collect();
    let mem = VisualNameMemory::build(&recs, d).unwrap();
    let queries = FeatureBlock::new(keys.clone()).unwrap();
    let cands = best_key_per_query(&queries, &mem).unwrap();
    for (i, c) in cands.iter().enumerate() {
        assert_eq!(c.name, format!("obj{i}"));
        assert!((c.score - 1.0).abs() <= 1e-6);
    }
    for (i, k) in keys.iter().enumerate().step_by(50) {
        let r = retrieve_names(
            &FeatureBlock::new(vec![k.clone()]).unwrap(),
            &mem,
            &RetrievalConfig { k: 1 },
        )
        .unwrap();
        assert_eq!(r.names[0].name, format!("obj{i}"));
        assert!((r.names[0].score - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn parallel_and_sequential_scans_agree_bitwise() {
    for seed in 0..20 {
        let inst = Instance::random(500 + seed, 2000, 64);
        let (q, mem) = (inst.block(), inst.memory());
        assert_eq!(
            best_key_per_query(&q, &mem).unwrap(),
            best_key_per_query_sequential(&q, &mem).unwrap()
        );
    }
}

#[test]
fn batch_equals_one_at_a_time() {
    let inst = Instance::random(3, 300, 16);
    let mem = inst.memory();
    let d = inst.keys[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images: Vec<_> = (0..6)
        .map(|_| {
            FeatureBlock::new(
                (0..32)
                    .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let cfg = RetrievalConfig { k: 5 };
    for (img, r) in images.iter().zip(retrieve_batch(&images, &mem, &cfg)) {
        assert_eq!(r.unwrap(), retrieve_names(img, &mem, &cfg).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_equivalence(seed in any::<u64>(), k in prop_oneof![Just(0usize), Just(1), Just(5), Just(10), Just(20)]) {
        assert_matches_oracle(&Instance::random(seed, 64, 16), k);
    }

    #[test]
    fn deterministic(seed in any::<u64>()) {
        let inst = Instance::random(seed, 64, 8);
        let cfg = RetrievalConfig { k: 20 };
        let a = retrieve_names(&inst.block(), &inst.memory(), &cfg).unwrap();
        let b = retrieve_names(&inst.block(), &inst.memory(), &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn growth_keeps_names_distinct_and_sorted(seed in any::<u64>(), extra in 1usize..10) {
        let inst = Instance::random(seed, 64, 8);
        let mem = inst.memory();
        let d = inst.keys[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let recs: Vec<_> = (0..extra)
            .map(|i| {
                let k: Vec<f32> = (0..d).map(|_| rng.random_range(0.1f32..1.0)).collect();
                MemoryRecord::from_key(format!("new{}", i % 3), Embedding::new(k).unwrap(), Source::Synthetic)
            })
            .collect();
        let grown = mem.expand(&recs).unwrap();
        let cfg = RetrievalConfig { k: 20 };
        let before = retrieve_names(&inst.block(), &mem, &cfg).unwrap();
        let after = retrieve_names(&inst.block(), &grown, &cfg).unwrap();
        for r in [&before, &after] {
            let mut names = r.name_list();
            prop_assert!(r.names.windows(2).all(|w| w[0].score >= w[1].score));
            names.sort();
            names.dedup();
            prop_assert_eq!(names.len(), r.names.len());
        }
        // a name only drops out when a new entry took over some query
        if before.name_list().iter().any(|n| !after.name_list().contains(n)) {
            prop_assert!(after.name_list().iter().any(|a| a.starts_with("new")));
        }
        // without any query switching to a new entry nothing changes
        if !after.name_list().iter().any(|a| a.starts_with("new")) {
            prop_assert_eq!(&before, &after);
        }
    }
}
