//! Hard-concrete block gates.
//!
//! A gate with location `log_alpha` is sampled as
//! `z = clip01(σ(log(u/(1−u))/β + log_alpha)·(r−l) + l)` with `u` uniform,
//! so `z` has point masses at exactly 0 and 1 and is differentiable in
//! `log_alpha` in between. The noise alone is divided by β.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid;
use crate::tensor::{Tape, Tensor, Var};

/// Fixed constants of the stretched, clipped distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardConcrete {
    pub beta: f32,
    pub l: f32,
    pub r: f32,
    pub epsilon: f32,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self {
            beta: 1.5,
            l: -0.1,
            r: 1.1,
            epsilon: 1e-6,
        }
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<()> {
        if !(self.l < 0.0 && self.r > 1.0 && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "hard concrete needs l < 0 < 1 < r and beta > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `log(r / −l)`: the offset at which a gate has `P(z=0) = ½`.
    fn zero_offset(&self) -> f32 {
        (self.r / -self.l).ln()
    }

    /// `P(z = 0)` for one gate.
    pub fn zero_probability(&self, log_alpha: f32) -> f32 {
        sigmoid(-self.beta * (log_alpha + self.zero_offset()))
    }

    /// Pre-clip stretched value for a given uniform draw.
    pub fn stretched(&self, log_alpha: f32, u: f32) -> f32 {
        let noise = (u / (1.0 - u)).ln() / self.beta;
        sigmoid(noise + log_alpha) * (self.r - self.l) + self.l
    }

    pub fn clamp_uniform(&self, u: f32) -> f32 {
        u.clamp(self.epsilon, 1.0 - self.epsilon)
    }
}

/// Learnable gate locations for one mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub log_alpha: Vec<f32>,
    #[serde(flatten)]
    pub dist: HardConcrete,
}

pub const INIT_LOG_ALPHA: f32 = 2.0;

impl GateParams {
    pub fn new(num_gates: usize, init: f32) -> Self {
        Self {
            log_alpha: vec![init; num_gates],
            dist: HardConcrete::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    /// Clamped uniform draws, one per gate.
    pub fn draw_uniforms<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        (0..self.len())
            .map(|_| self.dist.clamp_uniform(rng.gen::<f32>()))
            .collect()
    }

    /// Soft mask for given uniforms.
    pub fn soft_mask_from(&self, uniforms: &[f32]) -> Vec<f32> {
        self.log_alpha
            .iter()
            .zip(uniforms)
            .map(|(&a, &u)| self.dist.stretched(a, u).clamp(0.0, 1.0))
            .collect()
    }

    pub fn sample_soft_mask<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        let u = self.draw_uniforms(rng);
        self.soft_mask_from(&u)
    }

    /// Mean over gates of `P(z_i = 0)`.
    pub fn expected_sparsity(&self) -> f32 {
        if self.is_empty() {
            return 0.0;
        }
        self.log_alpha
            .iter()
            .map(|&a| self.dist.zero_probability(a))
            .sum::<f32>()
            / self.len() as f32
    }

    /// Deterministic binary mask with exactly `round(target·B)` zeros.
    pub fn binarize(&self, target_sparsity: f32) -> Result<Vec<u8>> {
        binarize_scores(&self.log_alpha, target_sparsity)
    }
}

/// Zeroes the `round(target·B)` lowest-scoring gates. Among equal scores the
/// higher flat index is zeroed first.
pub fn binarize_scores(scores: &[f32], target_sparsity: f32) -> Result<Vec<u8>> {
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::Config(format!(
            "target sparsity {target_sparsity} outside [0, 1)"
        )));
    }
    let zeros = (target_sparsity as f64 * scores.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let mut mask = vec![1u8; scores.len()];
    for &i in order.iter().take(zeros) {
        mask[i] = 0;
    }
    Ok(mask)
}

/// Number of zero entries a mask of `len` gates has at `sparsity`.
pub fn zero_count(len: usize, sparsity: f32) -> usize {
    (sparsity as f64 * len as f64).round() as usize
}

/// Differentiable soft-mask sample on a tape.
pub fn soft_mask_on_tape(
    tape: &mut Tape,
    log_alpha: Var,
    uniforms: &[f32],
    dist: &HardConcrete,
) -> Result<Var> {
    let noise: Vec<f32> = uniforms
        .iter()
        .map(|&u| (u / (1.0 - u)).ln() / dist.beta)
        .collect();
    let noise = tape.constant(Tensor::from_vec(noise));
    let logits = tape.add(log_alpha, noise)?;
    let s = tape.sigmoid(logits);
    let stretched = tape.affine(s, dist.r - dist.l, dist.l);
    Ok(tape.clip01(stretched))
}

/// Differentiable expected zero-fraction on a tape.
pub fn expected_sparsity_on_tape(tape: &mut Tape, log_alpha: Var, dist: &HardConcrete) -> Var {
    let shifted = tape.affine(log_alpha, -dist.beta, -dist.beta * dist.zero_offset());
    let p = tape.sigmoid(shifted);
    tape.mean(p)
}

/// A trained mask for one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskCandidate {
    pub cluster_id: usize,
    pub centroid: Vec<f32>,
    pub gate: GateParams,
    pub binary_mask: Vec<u8>,
    pub achieved_sparsity: f32,
}

impl MaskCandidate {
    pub fn new(
        cluster_id: usize,
        centroid: Vec<f32>,
        gate: GateParams,
        binary_mask: Vec<u8>,
    ) -> Self {
        let achieved_sparsity = mask_sparsity(&binary_mask);
        Self {
            cluster_id,
            centroid,
            gate,
            binary_mask,
            achieved_sparsity,
        }
    }

    pub fn mask_f32(&self) -> Vec<f32> {
        mask_to_f32(&self.binary_mask)
    }
}

pub fn mask_sparsity(mask: &[u8]) -> f32 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&b| b == 0).count() as f32 / mask.len() as f32
}

pub fn mask_to_f32(mask: &[u8]) -> Vec<f32> {
    mask.iter().map(|&b| b as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_examples() {
        let d = HardConcrete::default();
        let open = GateParams::new(1, 0.0);
        assert!((open.soft_mask_from(&[0.5])[0] - 0.5).abs() < 1e-6);
        assert!((d.stretched(10.0, 0.5) - 1.09995).abs() < 1e-5);
        assert_eq!(GateParams::new(1, 10.0).soft_mask_from(&[0.5])[0], 1.0);
    }

    #[test]
    fn closed_form_at_zero_location() {
        let g = GateParams::new(4, 0.0);
        // σ(−1.5·ln 11)
        assert!((g.expected_sparsity() - 0.026_68).abs() < 1e-4);
    }

    #[test]
    fn saturated_gates() {
        assert!(GateParams::new(8, 50.0).expected_sparsity() < 1e-6);
        let mut g = GateParams::new(8, 20.0);
        for a in g.log_alpha.iter_mut().skip(4) {
            *a = -20.0;
        }
        assert!((g.expected_sparsity() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn binarize_examples() {
        let g = GateParams {
            log_alpha: vec![0.5, -1.0, 2.0, 3.0, -0.5, 1.0, 4.0, 0.0],
            dist: HardConcrete::default(),
        };
        assert_eq!(g.binarize(0.25).unwrap(), vec![1, 0, 1, 1, 0, 1, 1, 1]);
        assert_eq!(g.binarize(0.0).unwrap(), vec![1; 8]);
        assert_eq!(
            GateParams::new(4, 1.0).binarize(0.5).unwrap(),
            vec![1, 1, 0, 0]
        );
        assert!(g.binarize(1.0).is_err());
    }

    #[test]
    fn tape_matches_plain_sampling() {
        let g = GateParams {
            log_alpha: vec![-1.0, 0.0, 0.7, 3.0],
            dist: HardConcrete::default(),
        };
        let u = [0.2, 0.9, 0.5, 0.01];
        let mut tape = Tape::new();
        let la = tape.param(Tensor::from_vec(g.log_alpha.clone()));
        let z = soft_mask_on_tape(&mut tape, la, &u, &g.dist).unwrap();
        for (a, b) in tape.value(z).data().iter().zip(g.soft_mask_from(&u)) {
            assert!((a - b).abs() < 1e-6);
        }
        let t = expected_sparsity_on_tape(&mut tape, la, &g.dist);
        assert!((tape.value(t).item() - g.expected_sparsity()).abs() < 1e-7);
    }
}
