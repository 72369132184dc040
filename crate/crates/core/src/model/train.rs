//! Next-token pre-training of the toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::transformer::Transformer;
use crate::error::{Error, Result};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Adam state for a list of flat parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One descent step on every buffer in `params`.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for j in 0..p.len() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let mh = *m / c1;
                let vh = *v / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Random window of at most `len` tokens from a randomly chosen document.
pub fn sample_window(rng: &mut ChaCha8Rng, docs: &[Vec<u32>], len: usize) -> Vec<u32> {
    let doc = &docs[rng.gen_range(0..docs.len())];
    if doc.len() <= len {
        return doc.clone();
    }
    let start = rng.gen_range(0..=doc.len() - len);
    doc[start..start + len].to_vec()
}

/// Loss and per-parameter gradients of one sequence.
fn sequence_grads(model: &Transformer, tokens: &[u32]) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let params = model.record_params(&mut tape, true);
    let out = model.build_graph(&mut tape, &params, tokens, None)?;
    let grads = tape.backward(out.loss);
    let all = params.all();
    let g = all
        .iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v).numel()))
        .collect();
    Ok((tape.value(out.loss).item(), g))
}

/// Trains a freshly initialized model; returns it with the per-step losses.
pub fn train_base(
    config: &ModelConfig,
    docs: &[Vec<u32>],
    cfg: &BaseTrainConfig,
) -> Result<(Transformer, Vec<f32>)> {
    let usable: Vec<Vec<u32>> = docs.iter().filter(|d| d.len() >= 2).cloned().collect();
    if usable.is_empty() {
        return Err(Error::Config(
            "no training document has two or more tokens".into(),
        ));
    }
    if cfg.seq_len < 2 || cfg.seq_len > config.max_seq_len {
        return Err(Error::Config(format!(
            "seq_len {} must be in [2, {}]",
            cfg.seq_len, config.max_seq_len
        )));
    }
    let mut model = Transformer::init(config.clone(), cfg.seed)?;
    let sizes: Vec<usize> = model
        .weights()
        .named()
        .iter()
        .map(|(_, t)| t.numel())
        .collect();
    let mut opt = Adam::new(cfg.lr, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba5e);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| sample_window(&mut rng, &usable, cfg.seq_len))
            .collect();
        let results: Vec<Result<(f32, Vec<Vec<f32>>)>> = batch
            .par_iter()
            .map(|seq| sequence_grads(&model, seq))
            .collect();
        let mut total = vec![Vec::new(); sizes.len()];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (acc, gi) in total.iter_mut().zip(g) {
                if acc.is_empty() {
                    *acc = gi;
                } else {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f32;
        total
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("non-finite base-model loss {loss}"),
            });
        }
        losses.push(loss);
        let mut bufs: Vec<&mut [f32]> = model
            .weights_mut()
            .tensors_mut()
            .into_iter()
            .map(|t| t.data_mut())
            .collect();
        opt.step(&mut bufs, &total);
    }
    Ok((model, losses))
}
