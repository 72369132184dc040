use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// JSON writes non-finite floats as `null`; read them back as NaN.
fn nullable<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Held-out result of one method at one (cluster count, sparsity, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub n_clusters: usize,
    pub sparsity: f32,
    pub seed: u64,
    #[serde(deserialize_with = "nullable")]
    pub perplexity: f64,
    pub tokens: usize,
    #[serde(deserialize_with = "nullable")]
    pub mc_accuracy: f64,
    #[serde(deserialize_with = "nullable")]
    pub flops_percentage: f64,
}

/// Held-out perplexity of the documents routed to one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub n_clusters: usize,
    pub sparsity: f32,
    pub seed: u64,
    pub cluster: usize,
    pub documents: usize,
    pub tokens: usize,
    #[serde(deserialize_with = "nullable")]
    pub nll: f64,
    #[serde(deserialize_with = "nullable")]
    pub perplexity: f64,
}

/// Binary masks of one library, clusters × gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub n_clusters: usize,
    pub sparsity: f32,
    pub seed: u64,
    pub gate_labels: Vec<String>,
    pub masks: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_clusters: usize,
    pub sparsity: f32,
    #[serde(deserialize_with = "nullable")]
    pub mean_perplexity: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub holdout_note: String,
    pub heldout_documents: usize,
    #[serde(deserialize_with = "nullable")]
    pub dense_perplexity: f64,
    #[serde(deserialize_with = "nullable")]
    pub dense_mc_accuracy: f64,
    pub rows: Vec<EvalRow>,
    pub per_cluster: Vec<ClusterRow>,
    pub heatmaps: Vec<Heatmap>,
    /// Present when more than one cluster count was run.
    pub n_sweep: Vec<SweepRow>,
}

pub const DYNAMIC: &str = "dynamic";

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = xs.fold((0.0, 0), |(s, n), x| (s + x, n + 1));
    (if n == 0 { f64::NAN } else { s / n as f64 }, n)
}

impl EvalReport {
    /// Mean perplexity over seeds for a method, cluster count and sparsity.
    pub fn mean_perplexity(&self, method: &str, n_clusters: usize, sparsity: f32) -> f64 {
        mean(
            self.rows
                .iter()
                .filter(|r| {
                    r.method == method && r.n_clusters == n_clusters && r.sparsity == sparsity
                })
                .map(|r| r.perplexity),
        )
        .0
    }

    pub(crate) fn fill_sweep(&mut self) {
        let mut ns: Vec<usize> = self
            .rows
            .iter()
            .filter(|r| r.method == DYNAMIC)
            .map(|r| r.n_clusters)
            .collect();
        ns.sort_unstable();
        ns.dedup();
        self.n_sweep.clear();
        if ns.len() < 2 {
            return;
        }
        let mut sps: Vec<f32> = self.rows.iter().map(|r| r.sparsity).collect();
        sps.sort_by(f32::total_cmp);
        sps.dedup();
        for &s in &sps {
            for &n in &ns {
                let (m, seeds) = mean(
                    self.rows
                        .iter()
                        .filter(|r| r.method == DYNAMIC && r.n_clusters == n && r.sparsity == s)
                        .map(|r| r.perplexity),
                );
                self.n_sweep.push(SweepRow {
                    n_clusters: n,
                    sparsity: s,
                    mean_perplexity: m,
                    seeds,
                });
            }
        }
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "held-out documents: {}", self.heldout_documents);
        let _ = writeln!(out, "{}", self.holdout_note);
        let _ = writeln!(
            out,
            "dense: perplexity {:.4}, multiple-choice accuracy {:.3}",
            self.dense_perplexity, self.dense_mc_accuracy
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<12} {:>3} {:>8} {:>6} {:>12} {:>10} {:>8}",
            "method", "N", "sparsity", "seeds", "perplexity", "accuracy", "flops"
        );
        let mut groups: BTreeMap<(String, usize, u32), Vec<&EvalRow>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.method.clone(), r.n_clusters, r.sparsity.to_bits()))
                .or_default()
                .push(r);
        }
        for ((method, n, s), rows) in &groups {
            let (ppl, k) = mean(rows.iter().map(|r| r.perplexity));
            let (acc, _) = mean(rows.iter().map(|r| r.mc_accuracy));
            let (fl, _) = mean(rows.iter().map(|r| r.flops_percentage));
            let _ = writeln!(
                out,
                "{method:<12} {n:>3} {:>8.4} {k:>6} {ppl:>12.4} {acc:>10.3} {:>7.1}%",
                f32::from_bits(*s),
                100.0 * fl
            );
        }
        if !self.n_sweep.is_empty() {
            let _ = writeln!(out, "\ncluster-count sweep (dynamic, mean over seeds)");
            for r in &self.n_sweep {
                let _ = writeln!(
                    out,
                    "  N={:<3} sparsity {:.4}: perplexity {:.4} ({} seeds)",
                    r.n_clusters, r.sparsity, r.mean_perplexity, r.seeds
                );
            }
        }
        out
    }

    /// Writes `report.json`, `report.csv`, `per_cluster.csv`, one heatmap
    /// CSV per library, `n_sweep.csv` when present, and `summary.txt`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(&json, e))?;
        written.push(json);

        let path = dir.join("report.csv");
        write_rows(&path, &self.rows)?;
        written.push(path);
        let path = dir.join("per_cluster.csv");
        write_rows(&path, &self.per_cluster)?;
        written.push(path);
        if !self.n_sweep.is_empty() {
            let path = dir.join("n_sweep.csv");
            write_rows(&path, &self.n_sweep)?;
            written.push(path);
        }
        for h in &self.heatmaps {
            let path = dir.join(format!(
                "heatmap_seed{}_n{}_s{:.4}.csv",
                h.seed, h.n_clusters, h.sparsity
            ));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["cluster".to_string()];
            header.extend(h.gate_labels.iter().cloned());
            w.write_record(&header)?;
            for (k, m) in h.masks.iter().enumerate() {
                let mut rec = vec![k.to_string()];
                rec.extend(m.iter().map(|b| b.to_string()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        let path = dir.join("summary.txt");
        std::fs::write(&path, self.summary()).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
