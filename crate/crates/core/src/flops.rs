//! Analytic forward-pass FLOPs for dense and block-masked models.
//!
//! Every matmul element costs two FLOPs (one multiply, one add). Norms,
//! activations, residual adds and softmax are not counted, and embedding
//! lookups are free.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockKind, Granularity, ModelConfig};

pub const EXCLUSIONS_NOTE: &str =
    "excludes normalization, activation, residual-add and softmax FLOPs; embedding lookup counted as zero";

/// Shape parameters that determine the FLOPs count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsArch {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub kv_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub granularity: Granularity,
}

impl FlopsArch {
    /// Llama-3-8B.
    pub fn llama3_8b() -> Self {
        Self {
            num_layers: 32,
            hidden_dim: 4096,
            kv_dim: 1024,
            ffn_dim: 14336,
            vocab_size: 128_256,
            granularity: Granularity::Block,
        }
    }

    pub fn num_gates(&self) -> usize {
        match self.granularity {
            Granularity::Block => 2 * self.num_layers,
            Granularity::Layer => self.num_layers,
        }
    }
}

impl From<&ModelConfig> for FlopsArch {
    fn from(c: &ModelConfig) -> Self {
        Self {
            num_layers: c.num_layers,
            hidden_dim: c.hidden_dim,
            kv_dim: c.kv_dim(),
            ffn_dim: c.ffn_dim,
            vocab_size: c.vocab_size,
            granularity: c.granularity,
        }
    }
}

/// How attention score and mixing products are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionCounting {
    /// Full `s × s` score matrix.
    #[default]
    Full,
    /// Only the `s(s+1)/2` causally visible pairs.
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub attention_linear: f64,
    pub attention_scores: f64,
    pub kv_projections: f64,
    pub ffn: f64,
    pub lm_head: f64,
    pub embeddings: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.attention_linear
            + self.attention_scores
            + self.kv_projections
            + self.ffn
            + self.lm_head
            + self.embeddings
    }

    fn entries(&self) -> [(&'static str, f64); 6] {
        [
            ("attention-linear", self.attention_linear),
            ("attention-scores", self.attention_scores),
            ("kv-projections", self.kv_projections),
            ("ffn", self.ffn),
            ("lm-head", self.lm_head),
            ("embeddings", self.embeddings),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub seq_len: usize,
    pub counting: AttentionCounting,
    pub dense_flops: f64,
    pub masked_flops: f64,
    pub percentage: f64,
    pub dense: FlopsBreakdown,
    pub masked: FlopsBreakdown,
    pub exclusions: String,
}

/// Per-layer costs at one sequence length.
#[derive(Debug, Clone, Copy)]
struct LayerCost {
    qo: f64,
    scores: f64,
    kv: f64,
    ffn: f64,
}

fn layer_cost(arch: &FlopsArch, s: usize, counting: AttentionCounting) -> LayerCost {
    let (s, d, dkv, dff) = (
        s as f64,
        arch.hidden_dim as f64,
        arch.kv_dim as f64,
        arch.ffn_dim as f64,
    );
    let pairs = match counting {
        AttentionCounting::Full => s * s,
        AttentionCounting::Causal => s * (s + 1.0) / 2.0,
    };
    LayerCost {
        qo: 2.0 * 2.0 * s * d * d,
        kv: 2.0 * 2.0 * s * d * dkv,
        // QKᵀ and PV each cost one multiply-add per (pair, channel)
        scores: 2.0 * 2.0 * pairs * d,
        ffn: 2.0 * 3.0 * s * d * dff,
    }
}

fn breakdown(
    arch: &FlopsArch,
    s: usize,
    counting: AttentionCounting,
    mask: Option<&[u8]>,
) -> FlopsBreakdown {
    let c = layer_cost(arch, s, counting);
    let mut b = FlopsBreakdown {
        lm_head: 2.0 * s as f64 * arch.hidden_dim as f64 * arch.vocab_size as f64,
        ..Default::default()
    };
    for layer in 0..arch.num_layers {
        let open = |kind: BlockKind| match (mask, arch.granularity) {
            (None, _) => true,
            (Some(m), Granularity::Block) => m[2 * layer + kind as usize] != 0,
            (Some(m), Granularity::Layer) => m[layer] != 0,
        };
        // K and V are projected even for a skipped attention block
        b.kv_projections += c.kv;
        if open(BlockKind::Attention) {
            b.attention_linear += c.qo;
            b.attention_scores += c.scores;
        }
        if open(BlockKind::Ffn) {
            b.ffn += c.ffn;
        }
    }
    b
}

fn check_seq_len(seq_len: usize) -> Result<()> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be at least 1".into()));
    }
    Ok(())
}

pub fn dense_flops(arch: &FlopsArch, seq_len: usize) -> Result<FlopsReport> {
    dense_flops_counted(arch, seq_len, AttentionCounting::Full)
}

pub fn dense_flops_counted(
    arch: &FlopsArch,
    seq_len: usize,
    counting: AttentionCounting,
) -> Result<FlopsReport> {
    check_seq_len(seq_len)?;
    let dense = breakdown(arch, seq_len, counting, None);
    Ok(FlopsReport {
        seq_len,
        counting,
        dense_flops: dense.total(),
        masked_flops: dense.total(),
        percentage: 1.0,
        dense,
        masked: dense,
        exclusions: EXCLUSIONS_NOTE.into(),
    })
}

pub fn masked_flops(arch: &FlopsArch, seq_len: usize, mask: &[u8]) -> Result<FlopsReport> {
    masked_flops_counted(arch, seq_len, mask, AttentionCounting::Full)
}

pub fn masked_flops_counted(
    arch: &FlopsArch,
    seq_len: usize,
    mask: &[u8],
    counting: AttentionCounting,
) -> Result<FlopsReport> {
    check_seq_len(seq_len)?;
    if mask.len() != arch.num_gates() {
        return Err(Error::Config(format!(
            "mask has {} entries, architecture has {} gates",
            mask.len(),
            arch.num_gates()
        )));
    }
    let dense = breakdown(arch, seq_len, counting, None);
    let masked = breakdown(arch, seq_len, counting, Some(mask));
    Ok(FlopsReport {
        seq_len,
        counting,
        dense_flops: dense.total(),
        masked_flops: masked.total(),
        percentage: masked.total() / dense.total(),
        dense,
        masked,
        exclusions: EXCLUSIONS_NOTE.into(),
    })
}

/// FLOPs removed by skipping one block.
pub fn removable_flops(
    arch: &FlopsArch,
    seq_len: usize,
    kind: BlockKind,
    counting: AttentionCounting,
) -> f64 {
    let c = layer_cost(arch, seq_len, counting);
    match kind {
        BlockKind::Attention => c.qo + c.scores,
        BlockKind::Ffn => c.ffn,
    }
}

fn tera(x: f64) -> String {
    format!("{:.2}T", x / 1e12)
}

impl FlopsReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "seq_len {}  attention counting {:?}",
            self.seq_len, self.counting
        );
        let _ = writeln!(out, "{:<18} {:>14} {:>14}", "component", "dense", "masked");
        for ((name, d), (_, m)) in self.dense.entries().iter().zip(self.masked.entries()) {
            let _ = writeln!(out, "{name:<18} {:>14.6e} {m:>14.6e}", d);
        }
        let _ = writeln!(
            out,
            "{:<18} {:>14} {:>14}  ({:.1}%)",
            "total",
            tera(self.dense_flops),
            tera(self.masked_flops),
            100.0 * self.percentage
        );
        let _ = writeln!(out, "note: {}", self.exclusions);
        out
    }

    /// One row per component plus a total row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["component", "dense_flops", "masked_flops"])?;
        for ((name, d), (_, m)) in self.dense.entries().iter().zip(self.masked.entries()) {
            w.write_record([name.to_string(), format!("{d:.0}"), format!("{m:.0}")])?;
        }
        w.write_record([
            "total".to_string(),
            format!("{:.0}", self.dense_flops),
            format!("{:.0}", self.masked_flops),
        ])?;
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}
