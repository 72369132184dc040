use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::EncoderConfig;
use crate::error::{Error, Result};
use crate::gates::{zero_count, GateParams, MaskCandidate};
use crate::model::checkpoint::weights_fingerprint;
use crate::model::{Granularity, Transformer};

pub const LIBRARY_VERSION: u32 = 1;

/// One cluster's routing key and mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibraryCluster {
    pub id: usize,
    pub centroid: Vec<f32>,
    pub log_alpha: Vec<f32>,
    pub binary_mask: Vec<u8>,
}

/// Versioned set of per-cluster masks trained against one checkpoint.
///
/// Field order is the on-disk order. Floats are written in their shortest
/// round-tripping decimal form, which never exceeds nine significant digits
/// for `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskLibrary {
    pub version: u32,
    pub model_fingerprint: String,
    pub encoder: EncoderConfig,
    pub granularity: Granularity,
    pub target_sparsity: f32,
    pub clusters: Vec<LibraryCluster>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl MaskLibrary {
    pub fn new(
        model: &Transformer,
        encoder: EncoderConfig,
        target_sparsity: f32,
        candidates: &[MaskCandidate],
    ) -> Result<Self> {
        let lib = Self {
            version: LIBRARY_VERSION,
            model_fingerprint: weights_fingerprint(model),
            encoder,
            granularity: model.config().granularity,
            target_sparsity,
            clusters: candidates
                .iter()
                .map(|c| LibraryCluster {
                    id: c.cluster_id,
                    centroid: c.centroid.clone(),
                    log_alpha: c.gate.log_alpha.clone(),
                    binary_mask: c.binary_mask.clone(),
                })
                .collect(),
            metadata: BTreeMap::new(),
        };
        lib.validate()?;
        Ok(lib)
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn num_gates(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.binary_mask.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("mask library: {msg}")));
        if self.version != LIBRARY_VERSION {
            return Err(Error::Compatibility(format!(
                "mask library version {} (expected {LIBRARY_VERSION})",
                self.version
            )));
        }
        if self.clusters.is_empty() {
            return bad("no clusters".into());
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return bad(format!(
                "target sparsity {} outside [0, 1)",
                self.target_sparsity
            ));
        }
        let gates = self.num_gates();
        let dim = self.encoder.dim();
        let zeros = zero_count(gates, self.target_sparsity);
        for (i, c) in self.clusters.iter().enumerate() {
            if c.id != i {
                return bad(format!("cluster at position {i} has id {}", c.id));
            }
            if c.binary_mask.len() != gates || c.log_alpha.len() != gates {
                return bad(format!("cluster {i} has a mask of a different length"));
            }
            if c.binary_mask.iter().any(|&b| b > 1) {
                return bad(format!("cluster {i} mask is not binary"));
            }
            if c.binary_mask.iter().filter(|&&b| b == 0).count() != zeros {
                return bad(format!("cluster {i} mask does not have {zeros} zeros"));
            }
            if c.centroid.len() != dim || c.centroid.iter().any(|x| !x.is_finite()) {
                return bad(format!("cluster {i} centroid is not a finite {dim}-vector"));
            }
        }
        Ok(())
    }

    /// Rejects a model whose weights or granularity differ from training.
    pub fn check_model(&self, model: &Transformer) -> Result<()> {
        let fp = weights_fingerprint(model);
        if fp != self.model_fingerprint {
            return Err(Error::Compatibility(format!(
                "model fingerprint {fp} does not match library fingerprint {}",
                self.model_fingerprint
            )));
        }
        let expected = model
            .config()
            .with_granularity(self.granularity)
            .num_gates();
        if expected != self.num_gates() {
            return Err(Error::Compatibility(format!(
                "library masks have {} gates, model has {expected} at {} granularity",
                self.num_gates(),
                self.granularity
            )));
        }
        Ok(())
    }

    pub fn candidates(&self) -> Vec<MaskCandidate> {
        self.clusters
            .iter()
            .map(|c| {
                let mut gate = GateParams::new(c.log_alpha.len(), 0.0);
                gate.log_alpha.clone_from(&c.log_alpha);
                MaskCandidate::new(c.id, c.centroid.clone(), gate, c.binary_mask.clone())
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lib: Self = serde_json::from_str(text)?;
        lib.validate()?;
        Ok(lib)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
