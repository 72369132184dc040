//! Sequence-level mask selection and dynamically pruned execution.

mod library;

pub use library::{LibraryCluster, MaskLibrary, LIBRARY_VERSION};

use std::borrow::Cow;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::embed::{nearest_centroid, Encoder, TextEncoder};
use crate::error::{Error, Result};
use crate::flops::{masked_flops, FlopsArch};
use crate::gates::mask_to_f32;
use crate::model::{tokenizer, Transformer};

/// Outcome of routing one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub cluster: usize,
    pub distance: f64,
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteReport {
    pub cluster: usize,
    pub distance: f64,
    pub mask: Vec<u8>,
    /// Share of dense forward FLOPs skipped over the generated sequence.
    pub skipped_flops_fraction: f64,
}

/// Call counts for the routing stage.
#[derive(Debug, Default)]
pub struct RouteCounters {
    encoder_calls: AtomicUsize,
    distance_scans: AtomicUsize,
}

impl RouteCounters {
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn distance_scans(&self) -> usize {
        self.distance_scans.load(Ordering::Relaxed)
    }
}

/// A loaded library bound to a compatible model.
pub struct Router<'m> {
    lib: MaskLibrary,
    encoder: Encoder,
    centroids: Vec<Vec<f32>>,
    model: Cow<'m, Transformer>,
    counters: RouteCounters,
}

impl<'m> Router<'m> {
    pub fn new(lib: MaskLibrary, model: &'m Transformer) -> Result<Self> {
        lib.validate()?;
        lib.check_model(model)?;
        let encoder = lib.encoder.build()?;
        let model = if model.config().granularity == lib.granularity {
            Cow::Borrowed(model)
        } else {
            Cow::Owned(model.with_granularity(lib.granularity))
        };
        Ok(Self {
            centroids: lib.clusters.iter().map(|c| c.centroid.clone()).collect(),
            lib,
            encoder,
            model,
            counters: RouteCounters::default(),
        })
    }

    pub fn library(&self) -> &MaskLibrary {
        &self.lib
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn counters(&self) -> &RouteCounters {
        &self.counters
    }

    /// Nearest-centroid selection for an already encoded input.
    pub fn route_embedding(&self, e: &[f32]) -> Result<Route> {
        if e.len() != self.encoder.dim() {
            return Err(Error::Input(format!(
                "embedding has dimension {}, library uses {}",
                e.len(),
                self.encoder.dim()
            )));
        }
        self.counters.distance_scans.fetch_add(1, Ordering::Relaxed);
        let (cluster, distance) = nearest_centroid(&self.centroids, e);
        Ok(Route {
            cluster,
            distance,
            mask: self.lib.clusters[cluster].binary_mask.clone(),
        })
    }

    pub fn route(&self, text: &[u8]) -> Result<Route> {
        self.counters.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let e = self.encoder.encode(text)?;
        self.route_embedding(&e)
    }

    /// Routes the prompt once, then decodes greedily under its mask.
    pub fn routed_generate(&self, prompt: &[u8], steps: usize) -> Result<(Vec<u32>, RouteReport)> {
        let route = self.route(prompt)?;
        let tokens = self.generate_with(&tokenizer::encode(prompt), &route.mask, steps)?;
        let arch = FlopsArch::from(self.model.config());
        let flops = masked_flops(&arch, tokens.len(), &route.mask)?;
        Ok((
            tokens,
            RouteReport {
                cluster: route.cluster,
                distance: route.distance,
                mask: route.mask,
                skipped_flops_fraction: 1.0 - flops.percentage,
            },
        ))
    }

    pub fn generate_with(&self, prompt: &[u32], mask: &[u8], steps: usize) -> Result<Vec<u32>> {
        self.model.generate(prompt, &mask_to_f32(mask), steps)
    }
}

/// Total NLL and predicted-token count of `eval_data` under a binary mask.
///
/// Sequences longer than the context are scored as independent windows of
/// `max_seq_len` tokens.
pub fn masked_nll(
    model: &Transformer,
    mask: &[u8],
    eval_data: &[Vec<u32>],
) -> Result<(f64, usize)> {
    let mask = mask_to_f32(mask);
    let window = model.config().max_seq_len;
    let mut total = 0.0;
    let mut count = 0;
    for seq in eval_data {
        for chunk in seq.chunks(window) {
            let (nll, n) = model.sequence_nll(chunk, &mask)?;
            total += nll;
            count += n;
        }
    }
    Ok((total, count))
}

/// Perplexity of `eval_data` under the skip path with a binary mask.
pub fn evaluate_masked_ppl(
    model: &Transformer,
    mask: &[u8],
    eval_data: &[Vec<u32>],
) -> Result<f64> {
    let (nll, count) = masked_nll(model, mask, eval_data)?;
    if count == 0 {
        return Err(Error::Config(
            "evaluation data has no predictable tokens".into(),
        ));
    }
    Ok(crate::util::perplexity(nll, count))
}
