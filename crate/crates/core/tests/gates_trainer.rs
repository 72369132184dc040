mod common;

use common::{random_model, rng};
use dynadepth::gates::{mask_sparsity, GateParams, HardConcrete};
use dynadepth::mask_trainer::{
    train_cluster_mask, MaskTrainer, SparsityController, TrainingConfig,
};
use dynadepth::model::checkpoint::fingerprint;
use dynadepth::Error;
use proptest::prelude::*;
use rand::Rng;

/// Zero-fraction of `draws` samples against the closed form.
fn monte_carlo_gap(log_alpha: f32, draws: usize, seed: u64) -> (f64, f64, f64) {
    let gate = GateParams::new(1, log_alpha);
    let mut r = rng(seed);
    let zeros = (0..draws)
        .filter(|_| gate.sample_soft_mask(&mut r)[0] == 0.0)
        .count();
    let empirical = zeros as f64 / draws as f64;
    let p = gate.expected_sparsity() as f64;
    let se = (p * (1.0 - p) / draws as f64).sqrt();
    (empirical, p, se)
}

#[test]
fn monte_carlo_zero_fraction_matches_closed_form() {
    for (i, la) in [-2.0f32, 0.0, 2.0].into_iter().enumerate() {
        let (emp, p, se) = monte_carlo_gap(la, 1_000_000, 100 + i as u64);
        assert!(
            (emp - p).abs() <= 3.0 * se,
            "la={la}: empirical {emp} vs {p} (se {se})"
        );
    }
    let (_, p0, _) = monte_carlo_gap(0.0, 1, 0);
    assert!((p0 - 0.0267).abs() < 5e-5);
}

proptest! {
    #[test]
    fn zero_probability_decreases_in_log_alpha(a in -8.0f32..8.0, d in 0.01f32..4.0) {
        let hc = HardConcrete::default();
        prop_assert!(hc.zero_probability(a + d) < hc.zero_probability(a));
    }

    #[test]
    fn soft_mask_in_unit_interval(a in -10.0f32..10.0, u in 0.0f32..1.0) {
        let g = GateParams::new(1, a);
        let z = g.soft_mask_from(&[g.dist.clamp_uniform(u)])[0];
        prop_assert!((0.0..=1.0).contains(&z));
    }

    #[test]
    fn binarize_hits_exact_zero_count(scores in proptest::collection::vec(-5.0f32..5.0, 1..40), s in 0.0f32..0.99) {
        let g = GateParams { log_alpha: scores.clone(), dist: HardConcrete::default() };
        let mask = g.binarize(s).unwrap();
        let zeros = mask.iter().filter(|&&b| b == 0).count();
        prop_assert_eq!(zeros, (s as f64 * scores.len() as f64).round() as usize);
        // every zeroed score is ≤ every kept score
        let max_zero = mask.iter().zip(&scores).filter(|(b, _)| **b == 0).map(|(_, s)| *s).fold(f32::MIN, f32::max);
        let min_one = mask.iter().zip(&scores).filter(|(b, _)| **b == 1).map(|(_, s)| *s).fold(f32::MAX, f32::min);
        prop_assert!(max_zero <= min_one);
    }
}

fn docs(seed: u64, count: usize, len: usize, vocab: std::ops::Range<u32>) -> Vec<Vec<u32>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| (0..len).map(|_| r.gen_range(vocab.clone())).collect())
        .collect()
}

fn quick_cfg(seed: u64, steps: usize) -> TrainingConfig {
    TrainingConfig {
        batch_size: 4,
        max_steps: steps,
        train_seq_len: 24,
        seed,
        ..TrainingConfig::default()
    }
}

#[test]
fn weights_are_untouched_by_mask_training() {
    let model = random_model(2, 7);
    let before = fingerprint(&model);
    let data = docs(1, 8, 30, 0..40);
    let out = train_cluster_mask(
        &model,
        &data,
        &quick_cfg(3, 20),
        SparsityController::new(0.25).unwrap(),
        0,
        vec![],
    )
    .unwrap();
    assert_eq!(fingerprint(&model), before);
    assert_eq!(out.log.len(), 20);
}

#[test]
fn lambda1_rises_when_over_target() {
    let model = random_model(2, 7);
    let data = docs(1, 4, 30, 0..40);
    let mut cfg = quick_cfg(0, 1);
    // log_alpha = -3 puts the expected sparsity far above 0.1
    cfg.init_log_alpha = -3.0;
    let mut trainer =
        MaskTrainer::new(&model, &data, cfg, SparsityController::new(0.1).unwrap(), 0).unwrap();
    let t0 = trainer.gate.expected_sparsity();
    assert!(t0 > 0.1);
    let log = trainer.step().unwrap();
    assert!(log.lambda1 > 0.0, "lambda1 = {}", log.lambda1);
}

#[test]
fn penalty_alone_reaches_target_within_500_steps() {
    let model = random_model(4, 2);
    for (seed, target) in [(0u64, 0.25f32), (1, 0.5), (2, 0.125)] {
        let mut cfg = quick_cfg(seed, 500);
        cfg.include_lm_loss = false;
        let out = train_cluster_mask(
            &model,
            &[],
            &cfg,
            SparsityController::new(target).unwrap(),
            0,
            vec![],
        );
        // empty data is rejected even without LM loss
        assert!(matches!(out, Err(Error::Config(_))));
        let out = train_cluster_mask(
            &model,
            &[vec![1, 2]],
            &cfg,
            SparsityController::new(target).unwrap(),
            0,
            vec![],
        )
        .unwrap();
        let t = out.log.last().unwrap().expected_sparsity;
        let within = out
            .log
            .iter()
            .position(|r| (r.expected_sparsity - target).abs() <= 0.01);
        assert!(within.is_some(), "target {target}: final t = {t}");
        assert!((out.candidate.gate.expected_sparsity() - target).abs() <= 0.01);
    }
}

#[test]
fn identical_seeds_identical_candidates() {
    let model = random_model(2, 9);
    let data = docs(5, 6, 30, 0..40);
    let run = || {
        train_cluster_mask(
            &model,
            &data,
            &quick_cfg(11, 15),
            SparsityController::new(0.25).unwrap(),
            1,
            vec![0.5],
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.candidate, b.candidate);
    let bits = |c: &dynadepth::gates::MaskCandidate| {
        c.gate
            .log_alpha
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.candidate), bits(&b.candidate));
}

#[test]
fn zero_target_keeps_everything() {
    let model = random_model(2, 4);
    let data = docs(2, 6, 30, 0..40);
    let out = train_cluster_mask(
        &model,
        &data,
        &quick_cfg(0, 40),
        SparsityController::new(0.0).unwrap(),
        0,
        vec![],
    )
    .unwrap();
    assert_eq!(out.candidate.binary_mask, vec![1; 4]);
    let dense: f32 = data
        .iter()
        .map(|d| model.forward_train(&d[..24], None).unwrap().0)
        .sum::<f32>()
        / data.len() as f32;
    let last = out.log.last().unwrap().lm_loss;
    assert!(
        (last - dense).abs() < 0.25 * dense,
        "trained {last} vs dense {dense}"
    );
}

#[test]
fn converges_to_quarter_sparsity_on_eight_blocks() {
    let model = random_model(4, 21);
    let data = docs(3, 16, 40, 0..40);
    for seed in 0..3 {
        let cfg = TrainingConfig {
            batch_size: 8,
            max_steps: 2000,
            train_seq_len: 16,
            seed,
            ..TrainingConfig::default()
        };
        let out = train_cluster_mask(
            &model,
            &data,
            &cfg,
            SparsityController::new(0.25).unwrap(),
            0,
            vec![],
        )
        .unwrap();
        let t = out.log.last().unwrap().expected_sparsity;
        assert!((t - 0.25).abs() <= 0.02, "seed {seed}: t = {t}");
        assert_eq!(
            out.candidate
                .binary_mask
                .iter()
                .filter(|&&b| b == 0)
                .count(),
            2
        );
        assert_eq!(mask_sparsity(&out.candidate.binary_mask), 0.25);
    }
}
