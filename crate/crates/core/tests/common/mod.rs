#![allow(dead_code)]

pub mod gradcheck;

use dynadepth::model::{Granularity, ModelConfig, Transformer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: 16,
        num_heads: 4,
        head_dim: 4,
        kv_heads: 2,
        ffn_dim: 32,
        vocab_size: 40,
        max_seq_len: 48,
        granularity: Granularity::Block,
    }
}

pub fn random_model(layers: usize, seed: u64) -> Transformer {
    Transformer::init(small_config(layers), seed).unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

pub fn random_binary_mask(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Greedy decoding that recomputes the whole prefix every step.
pub fn greedy_recompute(
    model: &Transformer,
    prompt: &[u32],
    mask: &[f32],
    steps: usize,
) -> Vec<u32> {
    let mut out = prompt.to_vec();
    for _ in 0..steps {
        if out.len() >= model.config().max_seq_len {
            break;
        }
        let mut cache = model.new_cache();
        let logits = model.forward_infer(&out, mask, &mut cache).unwrap();
        let last = logits.row(out.len() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        out.push(best as u32);
    }
    out
}

/// Max |forward_infer − forward_train| over all logits.
pub fn skip_path_gap(model: &Transformer, tokens: &[u32], mask: &[f32]) -> f32 {
    let (_, train) = model.forward_train(tokens, Some(mask)).unwrap();
    let mut cache = model.new_cache();
    let infer = model.forward_infer(tokens, mask, &mut cache).unwrap();
    train
        .data()
        .iter()
        .zip(infer.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max)
}

/// Pipeline config small enough for a few seconds per run.
pub fn tiny_experiment(out: &std::path::Path) -> dynadepth::harness::ExperimentConfig {
    use dynadepth::harness::{CorpusSource, CorpusSpec, ExperimentConfig};
    let mut cfg = ExperimentConfig {
        model: ModelConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            head_dim: 8,
            kv_heads: 1,
            ffn_dim: 32,
            max_seq_len: 64,
            ..ModelConfig::default()
        },
        corpus: CorpusSource::Synthetic(CorpusSpec {
            num_domains: 3,
            docs_per_domain: 12,
            doc_len: 120,
            seed: 0,
        }),
        cluster_counts: vec![1, 3],
        sparsities: vec![0.25],
        seeds: vec![0],
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.base_training.steps = 15;
    cfg.base_training.batch_size = 4;
    cfg.base_training.seq_len = 32;
    cfg.mask_training.batch_size = 2;
    cfg.mask_training.max_steps = 15;
    cfg.mask_training.train_seq_len = 32;
    cfg.baselines.evopress_generations = 2;
    cfg.baselines.evopress_population = 2;
    cfg.baseline_calib_docs = 6;
    cfg.tasks.synthetic_count = 6;
    cfg.tasks.prompt_len = 24;
    cfg.tasks.choice_len = 8;
    cfg
}
