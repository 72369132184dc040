//! Per-cluster gate training against a frozen model.
//!
//! Each step samples one soft mask for the whole batch, measures the mean
//! next-token loss with the mask scaling block outputs, adds the Lagrangian
//! sparsity penalty on the closed-form expected zero-fraction, then descends
//! on `log_alpha` and ascends on `λ1`, `λ2`.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{self, GateParams, MaskCandidate, INIT_LOG_ALPHA};
use crate::model::{sample_window, Adam, Transformer};
use crate::tensor::{Tape, Tensor, Var};
use crate::util::derive_seed;

/// Lagrange multipliers and the sparsity they enforce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityController {
    pub lambda1: f32,
    pub lambda2: f32,
    pub s_target: f32,
}

impl SparsityController {
    pub fn new(s_target: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&s_target) {
            return Err(Error::Config(format!("s_target {s_target} outside [0, 1)")));
        }
        Ok(Self {
            lambda1: 0.0,
            lambda2: 0.0,
            s_target,
        })
    }

    /// `λ1·(t − s) + λ2·(t − s)²`.
    pub fn penalty(&self, t: f32) -> f32 {
        let d = t - self.s_target;
        self.lambda1 * d + self.lambda2 * d * d
    }
}

/// Penalty recorded on a tape; `lambdas` is a two-element variable.
pub fn lagrangian_penalty_on_tape(
    tape: &mut Tape,
    t: Var,
    lambdas: Var,
    s_target: f32,
) -> Result<Var> {
    let d = tape.affine(t, 1.0, -s_target);
    let l1 = tape.index(lambdas, 0)?;
    let l2 = tape.index(lambdas, 1)?;
    let lin = tape.mul(l1, d)?;
    let sq = tape.mul(d, d)?;
    let quad = tape.mul(l2, sq)?;
    tape.add(lin, quad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub gate_lr: f32,
    pub lagrangian_lr: f32,
    pub max_steps: usize,
    pub train_seq_len: usize,
    pub seed: u64,
    #[serde(default = "default_init")]
    pub init_log_alpha: f32,
    /// When false the objective is the sparsity penalty alone.
    #[serde(default = "default_true")]
    pub include_lm_loss: bool,
}

fn default_init() -> f32 {
    INIT_LOG_ALPHA
}

fn default_true() -> bool {
    true
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            gate_lr: 0.1,
            lagrangian_lr: 0.1,
            max_steps: 500,
            train_seq_len: 512,
            seed: 0,
            init_log_alpha: INIT_LOG_ALPHA,
            include_lm_loss: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.train_seq_len < 2
            || !(self.gate_lr > 0.0)
            || !(self.lagrangian_lr > 0.0)
        {
            return Err(Error::Config(format!(
                "invalid mask training config {self:?}"
            )));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lm_loss: f32,
    pub penalty: f32,
    pub expected_sparsity: f32,
    pub lambda1: f32,
    pub lambda2: f32,
}

pub fn write_log_csv(rows: &[StepLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_log<W: Write>(rows: &[StepLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<log>", e))
}

/// Stateful trainer for one cluster's gates.
pub struct MaskTrainer<'a> {
    model: &'a Transformer,
    data: Vec<Vec<u32>>,
    cfg: TrainingConfig,
    pub gate: GateParams,
    pub ctrl: SparsityController,
    gate_opt: Adam,
    lambda_opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a> MaskTrainer<'a> {
    pub fn new(
        model: &'a Transformer,
        cluster_data: &[Vec<u32>],
        cfg: TrainingConfig,
        ctrl: SparsityController,
        cluster_id: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let seq_len = cfg.train_seq_len.min(model.config().max_seq_len);
        let data: Vec<Vec<u32>> = cluster_data
            .iter()
            .filter(|d| d.len() >= 2).cloned()
            .collect();
        if cfg.include_lm_loss && data.is_empty() {
            return Err(Error::Config(format!(
                "cluster {cluster_id} has no sequence of two or more tokens"
            )));
        }
        let cfg = TrainingConfig {
            train_seq_len: seq_len,
            ..cfg
        };
        let gates = model.config().num_gates();
        Ok(Self {
            model,
            data,
            gate: GateParams::new(gates, cfg.init_log_alpha),
            gate_opt: Adam::new(cfg.gate_lr, &[gates]),
            lambda_opt: Adam::new(cfg.lagrangian_lr, &[2]),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, cluster_id as u64)),
            cfg,
            ctrl,
            step: 0,
        })
    }

    /// Mean LM loss and its gradient with respect to the soft mask.
    fn lm_loss_and_grad(&mut self, mask: &[f32]) -> Result<(f32, Vec<f32>)> {
        let batch: Vec<Vec<u32>> = (0..self.cfg.batch_size)
            .map(|_| sample_window(&mut self.rng, &self.data, self.cfg.train_seq_len))
            .collect();
        let model = self.model;
        let per_item: Vec<Result<(f32, Vec<f32>)>> = batch
            .par_iter()
            .map(|seq| {
                let mut tape = Tape::new();
                let params = model.record_params(&mut tape, false);
                let z = tape.param(Tensor::from_vec(mask.to_vec()));
                let out = model.build_graph(&mut tape, &params, seq, Some(z))?;
                let g = tape.backward(out.loss).get_or_zeros(z, mask.len());
                Ok((tape.value(out.loss).item(), g))
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; mask.len()];
        for r in per_item {
            let (l, g) = r?;
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let n = self.cfg.batch_size as f32;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let uniforms = self.gate.draw_uniforms(&mut self.rng);
        let (lm_loss, mask_grad) = if self.cfg.include_lm_loss {
            let mask = self.gate.soft_mask_from(&uniforms);
            self.lm_loss_and_grad(&mask)?
        } else {
            (0.0, vec![0.0; self.gate.len()])
        };

        let mut tape = Tape::new();
        let la = tape.param(Tensor::from_vec(self.gate.log_alpha.clone()));
        let lambdas = tape.param(Tensor::from_vec(vec![self.ctrl.lambda1, self.ctrl.lambda2]));
        let z = gates::soft_mask_on_tape(&mut tape, la, &uniforms, &self.gate.dist)?;
        // chain rule through the sampled mask: d(lm)/dz is already reduced
        let upstream = tape.constant(Tensor::from_vec(mask_grad));
        let zg = tape.mul(z, upstream)?;
        let lm_term = tape.sum(zg);
        let t = gates::expected_sparsity_on_tape(&mut tape, la, &self.gate.dist);
        let penalty = lagrangian_penalty_on_tape(&mut tape, t, lambdas, self.ctrl.s_target)?;
        let total = tape.add(lm_term, penalty)?;
        let grads = tape.backward(total);

        let penalty_v = tape.value(penalty).item();
        let t_v = tape.value(t).item();
        if !(lm_loss.is_finite() && penalty_v.is_finite()) {
            return Err(Error::Training {
                step: self.step,
                detail: format!("non-finite objective: lm_loss={lm_loss} penalty={penalty_v}"),
            });
        }
        let g_la = grads.get_or_zeros(la, self.gate.len());
        let g_lambda: Vec<f32> = grads.get_or_zeros(lambdas, 2).iter().map(|g| -g).collect();
        self.gate_opt.step(&mut [&mut self.gate.log_alpha], &[g_la]);
        let mut lam = [self.ctrl.lambda1, self.ctrl.lambda2];
        self.lambda_opt.step(&mut [&mut lam], &[g_lambda]);
        self.ctrl.lambda1 = lam[0];
        self.ctrl.lambda2 = lam[1];

        let log = StepLog {
            step: self.step,
            lm_loss,
            penalty: penalty_v,
            expected_sparsity: t_v,
            lambda1: self.ctrl.lambda1,
            lambda2: self.ctrl.lambda2,
        };
        self.step += 1;
        Ok(log)
    }

    pub fn finish(self, cluster_id: usize, centroid: Vec<f32>) -> Result<MaskCandidate> {
        let mask = self.gate.binarize(self.ctrl.s_target)?;
        Ok(MaskCandidate::new(cluster_id, centroid, self.gate, mask))
    }
}

/// Trained candidate plus its step log.
#[derive(Debug, Clone)]
pub struct MaskTrainOutcome {
    pub candidate: MaskCandidate,
    pub log: Vec<StepLog>,
    pub controller: SparsityController,
}

/// Runs `cfg.max_steps` steps and binarizes at the controller's target.
pub fn train_cluster_mask(
    model: &Transformer,
    cluster_data: &[Vec<u32>],
    cfg: &TrainingConfig,
    ctrl: SparsityController,
    cluster_id: usize,
    centroid: Vec<f32>,
) -> Result<MaskTrainOutcome> {
    if cluster_data.is_empty() {
        return Err(Error::Config(format!(
            "cluster {cluster_id} has no calibration data"
        )));
    }
    let mut trainer = MaskTrainer::new(model, cluster_data, cfg.clone(), ctrl, cluster_id)?;
    let mut log = Vec::with_capacity(cfg.max_steps);
    for _ in 0..cfg.max_steps {
        log.push(trainer.step()?);
    }
    let controller = trainer.ctrl;
    let candidate = trainer.finish(cluster_id, centroid)?;
    Ok(MaskTrainOutcome {
        candidate,
        log,
        controller,
    })
}
