use namecap_core::memory::MEMORY_MAGIC;
use namecap_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn key(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
    Embedding::new((0..d).map(|_| rng.random_range(0.05f32..1.0)).collect()).unwrap()
}

fn records(seed: u64, n: usize, n_names: usize, d: usize) -> Vec<MemoryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| MemoryRecord::from_key(format!("name{}", i % n_names), key(&mut rng, d), Source::Real))
        .collect()
}

#[test]
fn manifest_sizes() {
    let start = Instant::now();
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // 8581 real entries over 1203 names, then five synthetic entries per name
    let mut recs: Vec<_> = (0..8581)
        .map(|i| MemoryRecord::from_key(format!("obj{}", i % 1203), key(&mut rng, d), Source::Real))
        .collect();
    for n in 0..1203 {
        for _ in 0..5 {
            recs.push(MemoryRecord::from_key(
                format!("obj{n}"),
                key(&mut rng, d),
                Source::Synthetic,
            ));
        }
    }
    let mem = VisualNameMemory::build(&recs, d).unwrap();
    let stats = mem.stats();
    assert_eq!((stats.count, stats.distinct_names), (14596, 1203));
    assert_eq!((stats.real, stats.synthetic), (8581, 6015));

    let extra: Vec<_> = (0..2396)
        .flat_map(|n| (0..5).map(move |_| n))
        .map(|n| MemoryRecord::from_key(format!("novel{n}"), key(&mut rng, d), Source::Synthetic))
        .collect();
    let grown = mem.expand(&extra).unwrap();
    assert_eq!(grown.len(), 26576);
    assert_eq!(grown.stats().distinct_names, 1203 + 2396);
    assert!(start.elapsed().as_secs_f64() < 1.0, "{:?}", start.elapsed());
}

#[test]
fn file_round_trip_is_bit_identical() {
    let mem = VisualNameMemory::build(&records(3, 200, 30, 24), 24).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.evcm");
    mem.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = VisualNameMemory::load(&path).unwrap();
    assert_eq!(back, mem);
    let again = dir.path().join("again.evcm");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
}

#[test]
fn corrupted_headers_are_format_errors() {
    let mem = VisualNameMemory::build(&records(4, 10, 3, 4), 4).unwrap();
    let good = mem.to_bytes();
    assert_eq!(&good[..4], MEMORY_MAGIC);
    let mut cases = Vec::new();
    let mut b = good.clone();
    b[0] = b'X';
    cases.push(b);
    let mut b = good.clone();
    b[4] = 9; // version
    cases.push(b);
    let mut b = good.clone();
    b[12] = 0xff; // count
    cases.push(b);
    cases.push(good[..3].to_vec());
    cases.push(good[..good.len() - 1].to_vec());
    let mut b = good.clone();
    b.push(0);
    cases.push(b);
    for c in cases {
        assert!(matches!(VisualNameMemory::from_bytes(&c), Err(Error::Format(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn build_is_deterministic(seed in any::<u64>(), n in 1usize..60, d in 1usize..12) {
        let recs = records(seed, n, 7, d);
        let a = VisualNameMemory::build(&recs, d).unwrap();
        let b = VisualNameMemory::build(&recs, d).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn insert_index_is_stream_position(seed in any::<u64>(), n in 1usize..40, m in 0usize..20) {
        let recs = records(seed, n + m, 5, 6);
        let mem = VisualNameMemory::build(&recs[..n], 6).unwrap().expand(&recs[n..]).unwrap();
        for (i, e) in mem.entries().enumerate() {
            prop_assert_eq!(e.insert_index, i);
            prop_assert_eq!(e.name, recs[i].name.as_str());
        }
    }

    #[test]
    fn expand_leaves_input_untouched(seed in any::<u64>(), n in 1usize..40, m in 0usize..20) {
        let recs = records(seed, n + m, 5, 6);
        let mem = VisualNameMemory::build(&recs[..n], 6).unwrap();
        let before = mem.checksum();
        let grown = mem.expand(&recs[n..]).unwrap();
        prop_assert_eq!(mem.checksum(), before);
        prop_assert_eq!(grown.len(), n + m);
    }

    #[test]
    fn cached_norms_match_recomputation(rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 5), 1..6)) {
        prop_assume!(rows.iter().any(|r| r.iter().any(|&v| v != 0.0)));
        let block = FeatureBlock::new(rows).unwrap();
        let rec = MemoryRecord::from_embeddings("x", block, Source::Unspecified);
        if let Ok(mem) = VisualNameMemory::build(&[rec], 5) {
            let k = mem.key(0);
            let direct = k.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((mem.norm(0) - direct).abs() <= 1e-6 * direct);
        }
    }
}
