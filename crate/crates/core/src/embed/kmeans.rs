use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

/// Fitted centroids and the partition of the fitting set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f32>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

/// Squared Euclidean distance accumulated in `f64`.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest index.
pub fn nearest_centroid(centroids: &[Vec<f32>], e: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(e, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn nearest64(centroids: &[Vec<f64>], e: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(e, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_init(data: &[Vec<f32>], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to64 = |v: &Vec<f32>| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let mut centroids = vec![to64(&data[rng.gen_range(0..data.len())])];
    let mut d2: Vec<f64> = data.iter().map(|e| sq_dist(e, &centroids[0])).collect();
    while centroids.len() < n {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..data.len())
        };
        let c = to64(&data[pick]);
        for (d, e) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(e, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or [`MAX_LLOYD_ITERATIONS`] is reached.
pub fn kmeans_fit(embeddings: &[Vec<f32>], n: usize, seed: u64) -> Result<ClusterModel> {
    if n == 0 || n > embeddings.len() {
        return Err(Error::Config(format!(
            "cannot fit {n} clusters to {} embeddings",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Input("embeddings have mixed dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(embeddings, n, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let scored: Vec<(usize, f64)> = embeddings
            .par_iter()
            .map(|e| nearest64(&centroids, e))
            .collect();
        history.push(scored.iter().map(|s| s.1).sum());
        let next: Vec<usize> = scored.iter().map(|s| s.0).collect();
        if next == assignments {
            break;
        }
        assignments = next;

        let mut sums = vec![vec![0.0f64; dim]; n];
        let mut counts = vec![0usize; n];
        for (e, &k) in embeddings.iter().zip(&assignments) {
            counts[k] += 1;
            for (s, &x) in sums[k].iter_mut().zip(e) {
                *s += x as f64;
            }
        }
        let mut used = Vec::new();
        for k in 0..n {
            if counts[k] > 0 {
                centroids[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
                continue;
            }
            // empty cluster: reseed at the point farthest from its centroid
            let far = scored
                .iter()
                .enumerate()
                .filter(|(i, _)| !used.contains(i))
                .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            used.push(far);
            centroids[k] = embeddings[far].iter().map(|&x| x as f64).collect();
        }
    }
    let centroids: Vec<Vec<f32>> = centroids
        .iter()
        .map(|c| c.iter().map(|&x| x as f32).collect())
        .collect();
    let final_scored: Vec<(usize, f64)> = embeddings
        .iter()
        .map(|e| nearest_centroid(&centroids, e))
        .collect();
    Ok(ClusterModel {
        assignments: final_scored.iter().map(|s| s.0).collect(),
        inertia: final_scored.iter().map(|s| s.1).sum(),
        inertia_history: history,
        centroids,
    })
}

impl ClusterModel {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn assign(&self, e: &[f32]) -> Result<usize> {
        if e.len() != self.dim() {
            return Err(Error::Input(format!(
                "embedding has dimension {}, centroids have {}",
                e.len(),
                self.dim()
            )));
        }
        Ok(nearest_centroid(&self.centroids, e).0)
    }

    /// Within-cluster sum of squares of `data` under `assignments`.
    pub fn inertia_of(&self, data: &[Vec<f32>], assignments: &[usize]) -> f64 {
        data.iter()
            .zip(assignments)
            .map(|(e, &k)| squared_distance(e, &self.centroids[k]))
            .sum()
    }
}
