mod common;

use common::{examples, random_embeddings, toy_graph};
use mathgen_core::pipeline::build_model;
use mathgen_core::train::{kl_anneal_weight, TrainConfig, Trainer};
use mathgen_tensor::Snapshot;
use proptest::prelude::*;

fn config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        num_topics: 2,
        memory_slots: 3,
        kernel_widths: vec![2, 3],
        batch_size: 3,
        epochs: 3,
        warmup_steps: 4,
        learning_rate: 1e-2,
        word_min_freq: 1,
        seed: 21,
        ..TrainConfig::default()
    }
}

fn trainer(cfg: &TrainConfig) -> Trainer {
    let exs = examples();
    let g = toy_graph();
    let emb = random_embeddings(g.num_nodes(), cfg.dim, 2);
    let keywords = vec![vec!["sum".to_string()], vec!["plane".to_string()]];
    let model = build_model(cfg, &exs, Some((&g, &emb)), &keywords).unwrap();
    Trainer::new(model, cfg.clone(), &exs).unwrap()
}

fn bytes(t: &Trainer) -> Vec<u8> {
    t.checkpoint().to_bytes().unwrap()
}

#[test]
fn same_seed_same_bytes() {
    let cfg = config();
    let (mut a, mut b) = (trainer(&cfg), trainer(&cfg));
    for _ in 0..4 {
        assert_eq!(a.step().unwrap(), b.step().unwrap());
    }
    assert_eq!(bytes(&a), bytes(&b));
    let mut other = config();
    other.seed = 22;
    let mut c = trainer(&other);
    for _ in 0..4 {
        c.step().unwrap();
    }
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn resume_mid_epoch_matches_uninterrupted_run() {
    let cfg = config();
    let mut full = trainer(&cfg);
    // 4 examples in batches of 3: step 3 sits in the middle of epoch 2
    for _ in 0..3 {
        full.step().unwrap();
    }
    let saved = full.checkpoint().to_bytes().unwrap();
    let expected_next = full.peek_loss().unwrap();
    let mut resumed = Trainer::resume(&Snapshot::from_bytes(&saved).unwrap(), cfg.clone(), &examples()).unwrap();
    assert_eq!(resumed.step_count(), 3);
    assert_eq!(resumed.peek_loss().unwrap(), expected_next);
    for _ in 0..3 {
        assert_eq!(full.step().unwrap(), resumed.step().unwrap());
    }
    assert_eq!(bytes(&full), bytes(&resumed));
}

#[test]
fn loss_falls_and_fit_runs_all_epochs() {
    let mut cfg = config();
    cfg.epochs = 30;
    cfg.warmup_steps = 0;
    let mut t = trainer(&cfg);
    let first = t.peek_loss().unwrap();
    t.fit(&examples()[..2]).unwrap();
    assert_eq!(t.step_count(), 30 * t.batches_per_epoch() as u64);
    assert_eq!(t.log.len(), 60);
    let last = t.log.last().unwrap();
    assert!(last.nll < 0.5 * first.nll, "{} -> {}", first.nll, last.nll);
    assert!(t.best.is_some() && t.best_dev_bleu.is_some());
}

#[test]
fn mismatched_config_is_rejected() {
    let cfg = config();
    let exs = examples();
    let model = build_model(&cfg, &exs, None, &[]).unwrap();
    let mut other = cfg.clone();
    other.dim = 16;
    assert!(Trainer::new(model, other, &exs).is_err());
    let mut bad = cfg;
    bad.batch_size = 0;
    assert!(bad.validate().is_err());
}

proptest! {
    #[test]
    fn anneal_weight_is_monotone_and_bounded(warmup in 0u64..5000, a in 0u64..10000, b in 0u64..10000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (wl, wh) = (kl_anneal_weight(lo, warmup), kl_anneal_weight(hi, warmup));
        prop_assert!((0.0..=1.0).contains(&wl) && (0.0..=1.0).contains(&wh));
        prop_assert!(wl <= wh);
        prop_assert_eq!(kl_anneal_weight(warmup, warmup), 1.0);
    }
}
