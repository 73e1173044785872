mod common;

use common::gradcheck;
use namecap_core::captioner::synthetic::SyntheticCorpus;
use namecap_core::captioner::*;
use namecap_core::fusion::NameVocab;
use namecap_core::nn::Init;
use namecap_core::*;
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Setup {
    model: Captioner,
    corpus: SyntheticCorpus,
    data: Vec<Example>,
}

fn setup(cfg: TrainConfig, n: usize) -> Setup {
    let corpus = SyntheticCorpus::generate(n, cfg.d_model, cfg.seed).unwrap();
    let model = Captioner::new(
        cfg,
        NameVocab::from_memory(&corpus.memory),
        Captioner::caption_vocab(corpus.captions()),
    )
    .unwrap();
    let data = corpus
        .pairs
        .iter()
        .map(|p| model.example(&p.id, p.features.clone(), &p.caption).unwrap())
        .collect();
    Setup { model, corpus, data }
}

#[test]
fn optimizer_holds_exactly_the_three_groups() {
    let cfg = TrainConfig::desk();
    let t = TrainableSet::init(&cfg);
    assert_eq!(t.new_optimizer(&cfg).group_names(), ["t_img", "t_obj", "phi"]);
    assert_eq!(t.param_count() as u64, count_trainable_params(&cfg));
}

#[test]
fn hundred_steps_leave_frozen_weights_bit_identical() {
    let s = setup(TrainConfig::desk(), 8);
    let frozen = s.model.frozen_checksums();
    let cfg = *s.model.config();
    let mut t = TrainableSet::init(&cfg);
    let start = t.clone();
    let mut opt = t.new_optimizer(&cfg);
    s.model
        .train(&s.data, &mut t, &mut opt, Some(&s.corpus.memory), 100, |_| {})
        .unwrap();
    assert_eq!(s.model.frozen_checksums(), frozen);
    assert_ne!(t.t_img, start.t_img);
    assert_ne!(t.t_obj, start.t_obj);
    assert_ne!(t.phi, start.phi);
}

#[test]
fn gradients_match_central_differences_on_ten_seeds() {
    for seed in 0..10u64 {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        let s = setup(cfg, 4);
        let ex = &s.data[seed as usize % 4];
        let mem = Some(&s.corpus.memory);
        let t = TrainableSet::init(&cfg);
        let (_, g) = s.model.ce_loss(ex, &t, mem).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let n_obj = t.t_obj.t.len();
        let e = gradcheck::rel_err(
            g.t_obj.as_slice().unwrap(),
            &(0..n_obj).collect::<Vec<_>>(),
            1e-5,
            |i, h| {
                let mut t2 = t.clone();
                t2.t_obj.t.as_slice_mut().unwrap()[i] += h;
                s.model.ce_loss(ex, &t2, mem).unwrap().0
            },
        );
        assert!(e <= 1e-4, "seed {seed}: t_obj {e}");

        let coords = sample(&mut rng, t.phi.weight.len(), 64).into_vec();
        let e = gradcheck::rel_err(g.phi_weight.as_slice().unwrap(), &coords, 1e-5, |i, h| {
            let mut t2 = t.clone();
            t2.phi.weight.as_slice_mut().unwrap()[i] += h;
            s.model.ce_loss(ex, &t2, mem).unwrap().0
        });
        assert!(e <= 1e-4, "seed {seed}: phi {e}");
    }
}

#[test]
fn short_training_reduces_loss() {
    let s = setup(TrainConfig::desk(), 6);
    let cfg = *s.model.config();
    let mut t = TrainableSet::init(&cfg);
    let mut opt = t.new_optimizer(&cfg);
    let mem = Some(&s.corpus.memory);
    let (before, _) = s.model.batch_loss(&s.data, &t, mem).unwrap();
    s.model.train(&s.data, &mut t, &mut opt, mem, 60, |_| {}).unwrap();
    let (after, _) = s.model.batch_loss(&s.data, &t, mem).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn checkpoint_file_round_trip() {
    let s = setup(TrainConfig::desk(), 4);
    let cfg = *s.model.config();
    let mut t = TrainableSet::init(&cfg);
    let mut opt = t.new_optimizer(&cfg);
    s.model
        .train(&s.data, &mut t, &mut opt, Some(&s.corpus.memory), 3, |_| {})
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.evct");
    checkpoint::save(&path, &s.model, &t, &opt).unwrap();
    let (model2, t2, opt2) = checkpoint::load(&path).unwrap();
    assert_eq!(t2, t);
    assert_eq!(opt2, opt);
    assert_eq!(model2.frozen_checksums(), s.model.frozen_checksums());
    assert_eq!(checkpoint::to_bytes(&model2, &t2, &opt2), std::fs::read(&path).unwrap());

    let mut bad = std::fs::read(&path).unwrap();
    bad[1] = b'?';
    assert!(matches!(checkpoint::from_bytes(&bad), Err(Error::Format(_))));
}

fn decoder(seed: u64) -> DecoderStub {
    DecoderStub::new(DecoderConfig {
        vocab_size: 12,
        d_llm: 16,
        n_blocks: 2,
        n_heads: 2,
        ffn_dim: 32,
        seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn beam_invariants(seed in any::<u64>(), rows in 1usize..6, beam in 1usize..7) {
        let dec = decoder(seed % 4);
        let prompt = Init { seed }.normal("p", rows, 16, 1.0);
        let hyps = beam_search(&dec, &prompt, 1, beam, 8).unwrap();
        prop_assert!(!hyps.is_empty() && hyps.len() <= beam);
        for w in hyps.windows(2) {
            prop_assert!(w[0].score() >= w[1].score());
        }
        for (i, a) in hyps.iter().enumerate() {
            for b in &hyps[i + 1..] {
                prop_assert_ne!(&a.tokens, &b.tokens);
            }
        }
        let g = greedy(&dec, &prompt, 1, 8).unwrap();
        prop_assert!(hyps[0].score() >= g.score());
        if beam == 1 {
            prop_assert_eq!(&hyps[0], &g);
        }
    }
}
