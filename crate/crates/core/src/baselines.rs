//! Static depth-pruning baselines: greedy cosine redundancy, one-shot
//! perplexity importance, and an elitist evolutionary mask search.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EncoderConfig;
use crate::error::{Error, Result};
use crate::gates::{mask_to_f32, zero_count, GateParams, MaskCandidate};
use crate::model::{BlockId, Transformer};
use crate::router::{evaluate_masked_ppl, MaskLibrary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Sleb,
    OneshotPpl,
    Evopress,
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineMethod::Sleb => "sleb",
            BaselineMethod::OneshotPpl => "oneshot-ppl",
            BaselineMethod::Evopress => "evopress",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticMaskResult {
    pub method: BaselineMethod,
    pub binary_mask: Vec<u8>,
    /// sleb: similarity of each removed block; oneshot-ppl: perplexity
    /// increase per gate; evopress: best fitness per generation.
    pub score_trace: Vec<f64>,
}

impl StaticMaskResult {
    /// Single-cluster library carrying the method in its metadata.
    pub fn to_library(
        &self,
        model: &Transformer,
        encoder: EncoderConfig,
        target_sparsity: f32,
        centroid: Vec<f32>,
    ) -> Result<MaskLibrary> {
        let gate = GateParams {
            log_alpha: mask_to_f32(&self.binary_mask),
            ..GateParams::new(0, 0.0)
        };
        let cand = MaskCandidate::new(0, centroid, gate, self.binary_mask.clone());
        let mut lib = MaskLibrary::new(model, encoder, target_sparsity, &[cand])?;
        lib.metadata = BTreeMap::from([
            (
                "method".to_string(),
                serde_json::json!(self.method.to_string()),
            ),
            (
                "score_trace".to_string(),
                serde_json::json!(self.score_trace),
            ),
        ]);
        Ok(lib)
    }
}

fn check_remove(model: &Transformer, num_remove: usize) -> Result<usize> {
    let gates = model.config().num_gates();
    if num_remove >= gates {
        return Err(Error::Config(format!(
            "cannot remove {num_remove} of {gates} gates"
        )));
    }
    Ok(gates)
}

fn cosine_rows(a: &[f32], b: &[f32], d: usize) -> (f64, usize) {
    let mut total = 0.0;
    for (ra, rb) in a.chunks(d).zip(b.chunks(d)) {
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in ra.iter().zip(rb) {
            dot += x as f64 * y as f64;
            na += x as f64 * x as f64;
            nb += y as f64 * y as f64;
        }
        total += if na == 0.0 || nb == 0.0 {
            1.0
        } else {
            dot / (na.sqrt() * nb.sqrt())
        };
    }
    (total, a.len() / d)
}

/// Mean cosine similarity between each open gate's input and output residual
/// streams over `calib`.
pub fn gate_similarities(model: &Transformer, calib: &[Vec<u32>], mask: &[u8]) -> Result<Vec<f64>> {
    let cfg = model.config();
    let gates = cfg.num_gates();
    let d = cfg.hidden_dim;
    let maskf = mask_to_f32(mask);
    let mut sums = vec![0.0f64; gates];
    let mut rows = vec![0usize; gates];
    for seq in calib {
        for chunk in seq.chunks(cfg.max_seq_len) {
            let mut io: Vec<Option<(Vec<f32>, Vec<f32>)>> = vec![None; gates];
            let mut record = |id: BlockId, before: &[f32], after: &[f32]| {
                let g = id.flat_index(cfg.granularity);
                match &mut io[g] {
                    // layer gates span two blocks: keep the first input, last output
                    Some((_, out)) => out.copy_from_slice(after),
                    slot => *slot = Some((before.to_vec(), after.to_vec())),
                }
            };
            let mut cache = model.new_cache();
            model.forward_infer_traced(chunk, &maskf, &mut cache, Some(&mut record))?;
            for (g, slot) in io.into_iter().enumerate() {
                if let Some((a, b)) = slot {
                    let (s, n) = cosine_rows(&a, &b, d);
                    sums[g] += s;
                    rows[g] += n;
                }
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&rows)
        .map(|(&s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect())
}

/// Greedily removes the open gate whose output is most similar to its input.
pub fn sleb_prune(
    model: &Transformer,
    calib: &[Vec<u32>],
    num_remove: usize,
) -> Result<StaticMaskResult> {
    let gates = check_remove(model, num_remove)?;
    let mut mask = vec![1u8; gates];
    let mut trace = Vec::with_capacity(num_remove);
    for _ in 0..num_remove {
        let sims = gate_similarities(model, calib, &mask)?;
        let mut best: Option<(usize, f64)> = None;
        for (g, &s) in sims.iter().enumerate() {
            if mask[g] == 0 || s.is_nan() {
                continue;
            }
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((g, s));
            }
        }
        let (g, s) = best.ok_or_else(|| {
            Error::Config("calibration data produced no similarity scores".into())
        })?;
        mask[g] = 0;
        trace.push(s);
    }
    Ok(StaticMaskResult {
        method: BaselineMethod::Sleb,
        binary_mask: mask,
        score_trace: trace,
    })
}

/// Masks the gates whose individual removal raises calibration perplexity
/// least, measured once against the dense model. Ties remove the lower index.
pub fn oneshot_importance_prune(
    model: &Transformer,
    calib: &[Vec<u32>],
    num_remove: usize,
) -> Result<StaticMaskResult> {
    let gates = check_remove(model, num_remove)?;
    let dense = evaluate_masked_ppl(model, &vec![1; gates], calib)?;
    let increase: Vec<f64> = (0..gates)
        .into_par_iter()
        .map(|g| {
            let mut m = vec![1u8; gates];
            m[g] = 0;
            evaluate_masked_ppl(model, &m, calib).map(|p| p - dense)
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..gates).collect();
    order.sort_by(|&a, &b| increase[a].total_cmp(&increase[b]).then(a.cmp(&b)));
    let mut mask = vec![1u8; gates];
    for &g in order.iter().take(num_remove) {
        mask[g] = 0;
    }
    Ok(StaticMaskResult {
        method: BaselineMethod::OneshotPpl,
        binary_mask: mask,
        score_trace: increase,
    })
}

pub const OFFSPRING_PER_PARENT: usize = 4;

/// Moves one zero to a currently open position.
fn swap_mutation(rng: &mut ChaCha8Rng, parent: &[u8]) -> Vec<u8> {
    let zeros: Vec<usize> = (0..parent.len()).filter(|&i| parent[i] == 0).collect();
    let ones: Vec<usize> = (0..parent.len()).filter(|&i| parent[i] == 1).collect();
    let mut child = parent.to_vec();
    if let (Some(&z), Some(&o)) = (zeros.choose(rng), ones.choose(rng)) {
        child[z] = 1;
        child[o] = 0;
    }
    child
}

struct FitnessCache<'a> {
    model: &'a Transformer,
    calib: &'a [Vec<u32>],
    seen: HashMap<Vec<u8>, f64>,
}

impl FitnessCache<'_> {
    fn evaluate(&mut self, masks: &[Vec<u8>]) -> Result<()> {
        let mut fresh: Vec<&Vec<u8>> = masks
            .iter()
            .filter(|m| !self.seen.contains_key(*m))
            .collect();
        fresh.sort();
        fresh.dedup();
        let scores: Vec<f64> = fresh
            .par_iter()
            .map(|m| evaluate_masked_ppl(self.model, m, self.calib))
            .collect::<Result<_>>()?;
        for (m, s) in fresh.into_iter().zip(scores) {
            self.seen.insert(m.clone(), s);
        }
        Ok(())
    }

    fn get(&self, m: &[u8]) -> f64 {
        self.seen[m]
    }

    fn evaluations(&self) -> usize {
        self.seen.len()
    }
}

/// Elitist (μ+λ) search over sparsity-exact masks with calibration
/// perplexity as fitness. `population` is μ; each survivor spawns
/// [`OFFSPRING_PER_PARENT`] swap mutants per generation.
pub fn evopress_search(
    model: &Transformer,
    calib: &[Vec<u32>],
    target_sparsity: f32,
    generations: usize,
    population: usize,
    seed: u64,
) -> Result<StaticMaskResult> {
    Ok(evopress_search_stats(model, calib, target_sparsity, generations, population, seed)?.0)
}

/// [`evopress_search`] that also returns the number of distinct masks evaluated.
pub fn evopress_search_stats(
    model: &Transformer,
    calib: &[Vec<u32>],
    target_sparsity: f32,
    generations: usize,
    population: usize,
    seed: u64,
) -> Result<(StaticMaskResult, usize)> {
    if population == 0 {
        return Err(Error::Config("population must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::Config(format!(
            "target sparsity {target_sparsity} outside [0, 1)"
        )));
    }
    let gates = model.config().num_gates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = FitnessCache {
        model,
        calib,
        seen: HashMap::new(),
    };

    let mut pool: Vec<Vec<u8>> = (0..population)
        .map(|_| random_static_mask(&mut rng, gates, target_sparsity))
        .collect();
    let mut trace = Vec::with_capacity(generations + 1);
    let select = |pool: &mut Vec<Vec<u8>>, cache: &FitnessCache| {
        pool.sort_by(|a, b| cache.get(a).total_cmp(&cache.get(b)).then_with(|| a.cmp(b)));
        pool.dedup();
        pool.truncate(population);
    };
    cache.evaluate(&pool)?;
    select(&mut pool, &cache);
    trace.push(cache.get(&pool[0]));

    for _ in 0..generations {
        let mut offspring = Vec::with_capacity(pool.len() * OFFSPRING_PER_PARENT);
        for parent in &pool {
            for _ in 0..OFFSPRING_PER_PARENT {
                offspring.push(swap_mutation(&mut rng, parent));
            }
        }
        cache.evaluate(&offspring)?;
        pool.extend(offspring);
        select(&mut pool, &cache);
        trace.push(cache.get(&pool[0]));
    }
    let evaluations = cache.evaluations();
    Ok((
        StaticMaskResult {
            method: BaselineMethod::Evopress,
            binary_mask: pool.swap_remove(0),
            score_trace: trace,
        },
        evaluations,
    ))
}

/// Uniformly random mask with the exact zero count for `sparsity`.
pub fn random_static_mask<R: Rng>(rng: &mut R, gates: usize, sparsity: f32) -> Vec<u8> {
    let zeros = zero_count(gates, sparsity);
    let mut idx: Vec<usize> = (0..gates).collect();
    idx.shuffle(rng);
    let mut m = vec![1u8; gates];
    for &i in &idx[..zeros] {
        m[i] = 0;
    }
    m
}
