use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{evopress_search, oneshot_importance_prune, sleb_prune, StaticMaskResult};
use crate::embed::{kmeans_fit, ClusterModel, Encoder, EncoderConfig, TextEncoder};
use crate::error::{Error, Result, StageContext};
use crate::flops::{masked_flops, FlopsArch};
use crate::gates::{zero_count, MaskCandidate};
use crate::mask_trainer::{train_cluster_mask, write_log_csv, SparsityController, TrainingConfig};
use crate::model::{checkpoint, tokenizer, train_base, BaseTrainConfig, ModelConfig, Transformer};
use crate::router::{masked_nll, MaskLibrary, Router};
use crate::util::{derive_seed, perplexity};

use super::config::{CorpusSource, ExperimentConfig};
use super::corpus::{load_corpus, make_synthetic_corpus, write_corpus, Document};
use super::report::{ClusterRow, EvalReport, EvalRow, Heatmap, DYNAMIC};
use super::tasks::{load_tasks, multiple_choice_accuracy, synthetic_tasks, McTask};

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Loads or generates the configured corpus.
pub fn prepare_corpus(cfg: &ExperimentConfig) -> Result<Vec<Document>> {
    match &cfg.corpus {
        CorpusSource::Synthetic(spec) => make_synthetic_corpus(spec),
        CorpusSource::Paths(paths) => load_corpus(paths),
    }
}

/// Splits off `fraction` of the documents (at least one) for evaluation.
pub fn split_holdout(
    docs: &[Document],
    fraction: f64,
    seed: u64,
) -> (Vec<Document>, Vec<Document>) {
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x401d)));
    let held = ((docs.len() as f64 * fraction).round() as usize)
        .clamp(1, docs.len().saturating_sub(1).max(1));
    let mut test: Vec<usize> = idx[..held].to_vec();
    let mut train: Vec<usize> = idx[held..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (
        train.iter().map(|&i| docs[i].clone()).collect(),
        test.iter().map(|&i| docs[i].clone()).collect(),
    )
}

pub fn tokenize_docs(docs: &[Document]) -> Vec<Vec<u32>> {
    docs.iter()
        .map(|d| tokenizer::encode(d.text.as_bytes()))
        .collect()
}

/// Embedding of a document: its text for built-in encoders, its id for
/// precomputed ones.
pub fn embed_document(encoder: &Encoder, doc: &Document) -> Result<Vec<f32>> {
    match encoder {
        Encoder::External(e) => e.encode(doc.id.as_bytes()),
        Encoder::Hashed(_) => encoder.encode(doc.text.as_bytes()),
    }
}

pub fn embed_documents(encoder: &Encoder, docs: &[Document]) -> Result<Vec<Vec<f32>>> {
    docs.par_iter()
        .map(|d| embed_document(encoder, d))
        .collect()
}

/// Trains the base model, or loads the configured checkpoint.
pub fn obtain_base_model(
    model_cfg: &ModelConfig,
    base: &BaseTrainConfig,
    checkpoint_path: Option<&Path>,
    train_docs: &[Vec<u32>],
) -> Result<(Transformer, Vec<f32>)> {
    match checkpoint_path {
        Some(p) => {
            let m = checkpoint::load(p)?;
            Ok((m.with_granularity(model_cfg.granularity), Vec::new()))
        }
        None => {
            let seq = base.seq_len.min(model_cfg.max_seq_len);
            train_base(
                model_cfg,
                train_docs,
                &BaseTrainConfig {
                    seq_len: seq,
                    ..base.clone()
                },
            )
        }
    }
}

/// Clusters with their members, as saved by the `cluster` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub encoder: EncoderConfig,
    pub model: ClusterModel,
    pub item_ids: Vec<String>,
}

impl Clustering {
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.model.assignments.len())
            .filter(|&i| self.model.assignments[i] == k)
            .collect()
    }
}

pub fn cluster_documents(
    encoder: &Encoder,
    docs: &[Document],
    n: usize,
    seed: u64,
) -> Result<Clustering> {
    let emb = embed_documents(encoder, docs)?;
    let model = kmeans_fit(&emb, n, seed)?;
    Ok(Clustering {
        encoder: encoder.config(),
        model,
        item_ids: docs.iter().map(|d| d.id.clone()).collect(),
    })
}

/// Up to `cap` member indices of cluster `k`, deterministically sampled.
pub fn calibration_sample(clustering: &Clustering, k: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut members = clustering.members(k);
    if members.len() > cap {
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64)));
        members.truncate(cap);
        members.sort_unstable();
    }
    members
}

/// One trained mask per cluster, trained in parallel.
pub fn train_cluster_masks(
    model: &Transformer,
    clustering: &Clustering,
    tokens: &[Vec<u32>],
    training: &TrainingConfig,
    sparsity: f32,
    calib_per_cluster: usize,
    seed: u64,
    log_dir: Option<&Path>,
) -> Result<Vec<MaskCandidate>> {
    let cfg = TrainingConfig {
        seed,
        ..training.clone()
    };
    let n = clustering.model.num_clusters();
    let outcomes: Vec<_> = (0..n)
        .into_par_iter()
        .map(|k| {
            let data: Vec<Vec<u32>> = calibration_sample(clustering, k, calib_per_cluster, seed)
                .into_iter()
                .map(|i| tokens[i].clone())
                .collect();
            let ctrl = SparsityController::new(sparsity)?;
            train_cluster_mask(
                model,
                &data,
                &cfg,
                ctrl,
                k,
                clustering.model.centroids[k].clone(),
            )
        })
        .collect::<Result<_>>()?;
    let mut candidates = Vec::with_capacity(n);
    for (k, o) in outcomes.into_iter().enumerate() {
        if let Some(dir) = log_dir {
            write_log_csv(&o.log, &dir.join(format!("train_log_cluster{k}.csv")))?;
        }
        candidates.push(o.candidate);
    }
    Ok(candidates)
}

/// Held-out evaluation of one library with per-cluster breakdown.
pub struct LibraryEval {
    pub perplexity: f64,
    pub tokens: usize,
    pub flops_percentage: f64,
    pub mc_accuracy: f64,
    pub per_cluster: Vec<(usize, usize, f64)>,
}

pub fn evaluate_library(
    lib: &MaskLibrary,
    model: &Transformer,
    heldout: &[Document],
    heldout_tokens: &[Vec<u32>],
    tasks: &[McTask],
) -> Result<LibraryEval> {
    let router = Router::new(lib.clone(), model)?;
    let encoder = lib.encoder.build()?;
    let routes: Vec<usize> = heldout
        .iter()
        .map(|d| {
            router
                .route_embedding(&embed_document(&encoder, d)?)
                .map(|r| r.cluster)
        })
        .collect::<Result<_>>()?;
    let n = lib.num_clusters();
    let scored: Vec<(f64, usize)> = (0..heldout.len())
        .into_par_iter()
        .map(|i| {
            masked_nll(
                router.model(),
                &lib.clusters[routes[i]].binary_mask,
                &heldout_tokens[i..i + 1],
            )
        })
        .collect::<Result<_>>()?;
    let mut per_cluster = vec![(0usize, 0usize, 0.0f64); n];
    for (&k, &(nll, t)) in routes.iter().zip(&scored) {
        per_cluster[k].0 += 1;
        per_cluster[k].1 += t;
        per_cluster[k].2 += nll;
    }
    let total_nll: f64 = scored.iter().map(|s| s.0).sum();
    let tokens: usize = scored.iter().map(|s| s.1).sum();
    let arch = FlopsArch::from(router.model().config());
    let seq = router.model().config().max_seq_len;
    let mut flops = 0.0;
    for &k in &routes {
        flops += masked_flops(&arch, seq, &lib.clusters[k].binary_mask)?.percentage;
    }
    let mc_accuracy = if tasks.is_empty() || matches!(encoder, Encoder::External(_)) {
        f64::NAN
    } else {
        multiple_choice_accuracy(router.model(), tasks, |t| {
            Ok(router.route(t.prompt.as_bytes())?.mask)
        })?
    };
    Ok(LibraryEval {
        perplexity: perplexity(total_nll, tokens),
        tokens,
        flops_percentage: flops / routes.len().max(1) as f64,
        mc_accuracy,
        per_cluster,
    })
}

fn sparsity_dir(s: f32) -> String {
    format!("s{s:.4}")
}

/// Mean of the embeddings: the routing key of a single-mask library.
fn mean_embedding(emb: &[Vec<f32>]) -> Vec<f32> {
    let d = emb.first().map_or(0, Vec::len);
    let mut m = vec![0.0f64; d];
    for e in emb {
        for (a, &x) in m.iter_mut().zip(e) {
            *a += x as f64;
        }
    }
    m.iter()
        .map(|&a| (a / emb.len().max(1) as f64) as f32)
        .collect()
}

/// Runs the whole experiment, writing every artifact under the output
/// directory as it is produced.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate().stage("config")?;
    let out = &cfg.output_dir;
    create_dir(out).stage("config")?;
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(cfg)? + "\n",
    )
    .map_err(|e| Error::io(out.join("config.json"), e))
    .stage("config")?;

    let docs = prepare_corpus(cfg).stage("corpus")?;
    if matches!(cfg.corpus, CorpusSource::Synthetic(_)) {
        write_corpus(&docs, &out.join("corpus")).stage("corpus")?;
    }
    let split_seed = cfg.base_training.seed;
    let (train_docs, heldout) = split_holdout(&docs, cfg.holdout_fraction, split_seed);
    let train_tokens = tokenize_docs(&train_docs);
    let heldout_tokens = tokenize_docs(&heldout);

    let model_cfg = cfg.model_config();
    let (model, losses) = obtain_base_model(
        &model_cfg,
        &cfg.base_training,
        cfg.base_checkpoint.as_deref(),
        &train_tokens,
    )
    .stage("train-base")?;
    checkpoint::save(&model, &out.join("base.ckpt")).stage("train-base")?;
    if !losses.is_empty() {
        let text: String = losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i},{l}\n"))
            .collect();
        std::fs::write(out.join("base_losses.csv"), format!("step,loss\n{text}"))
            .map_err(|e| Error::io(out.join("base_losses.csv"), e))
            .stage("train-base")?;
    }

    let encoder = cfg.encoder.build(&train_docs).stage("encode")?;
    let tasks = match &cfg.tasks.path {
        Some(p) => load_tasks(p).stage("tasks")?,
        None => synthetic_tasks(
            &heldout,
            cfg.tasks.synthetic_count,
            cfg.tasks.prompt_len,
            cfg.tasks.choice_len,
            cfg.tasks.num_choices,
            derive_seed(split_seed, 0x7a5c),
        ),
    };
    let gates = model_cfg.num_gates();
    let dense_mask = vec![1u8; gates];
    let (dense_nll, dense_tokens) =
        masked_nll(&model, &dense_mask, &heldout_tokens).stage("eval")?;
    let dense_mc = if tasks.is_empty() {
        f64::NAN
    } else {
        multiple_choice_accuracy(&model, &tasks, |_| Ok(dense_mask.clone())).stage("eval")?
    };
    let mut report = EvalReport {
        holdout_note: format!(
            "{:.0}% of documents held out before clustering (split seed {split_seed}); calibration draws only from the rest",
            100.0 * cfg.holdout_fraction
        ),
        heldout_documents: heldout.len(),
        dense_perplexity: perplexity(dense_nll, dense_tokens),
        dense_mc_accuracy: dense_mc,
        ..Default::default()
    };
    let gate_labels: Vec<String> = match model_cfg.granularity {
        crate::model::Granularity::Block => model_cfg.blocks().map(|b| b.to_string()).collect(),
        crate::model::Granularity::Layer => {
            (0..model_cfg.num_layers).map(|l| format!("L{l}")).collect()
        }
    };

    let train_emb = embed_documents(&encoder, &train_docs).stage("encode")?;
    let centroid_all = mean_embedding(&train_emb);

    for &seed in &cfg.seeds {
        let seed_dir = out.join(format!("seed{seed}"));
        for &n in &cfg.cluster_counts {
            let n_dir = seed_dir.join(format!("n{n}"));
            create_dir(&n_dir).stage("cluster")?;
            let clustering = Clustering {
                encoder: encoder.config(),
                model: kmeans_fit(&train_emb, n, derive_seed(seed, n as u64)).stage("cluster")?,
                item_ids: train_docs.iter().map(|d| d.id.clone()).collect(),
            };
            std::fs::write(
                n_dir.join("clusters.json"),
                serde_json::to_string_pretty(&clustering)? + "\n",
            )
            .map_err(|e| Error::io(n_dir.join("clusters.json"), e))
            .stage("cluster")?;
            for &s in &cfg.sparsities {
                let s_dir = n_dir.join(sparsity_dir(s));
                create_dir(&s_dir).stage("train-masks")?;
                let candidates = train_cluster_masks(
                    &model,
                    &clustering,
                    &train_tokens,
                    &cfg.mask_training,
                    s,
                    cfg.calib_per_cluster,
                    derive_seed(seed, 0x3a5c),
                    Some(&s_dir),
                )
                .stage("train-masks")?;
                let lib =
                    MaskLibrary::new(&model, encoder.config(), s, &candidates).stage("binarize")?;
                lib.save(&s_dir.join("library.json")).stage("binarize")?;
                let ev = evaluate_library(&lib, &model, &heldout, &heldout_tokens, &tasks)
                    .stage("eval")?;
                report.rows.push(EvalRow {
                    method: DYNAMIC.into(),
                    n_clusters: n,
                    sparsity: s,
                    seed,
                    perplexity: ev.perplexity,
                    tokens: ev.tokens,
                    mc_accuracy: ev.mc_accuracy,
                    flops_percentage: ev.flops_percentage,
                });
                for (k, &(docs_k, tokens_k, nll_k)) in ev.per_cluster.iter().enumerate() {
                    report.per_cluster.push(ClusterRow {
                        n_clusters: n,
                        sparsity: s,
                        seed,
                        cluster: k,
                        documents: docs_k,
                        tokens: tokens_k,
                        nll: nll_k,
                        perplexity: perplexity(nll_k, tokens_k),
                    });
                }
                report.heatmaps.push(Heatmap {
                    n_clusters: n,
                    sparsity: s,
                    seed,
                    gate_labels: gate_labels.clone(),
                    masks: lib.clusters.iter().map(|c| c.binary_mask.clone()).collect(),
                });
            }
        }

        let b = &cfg.baselines;
        if !(b.sleb || b.oneshot_ppl || b.evopress) {
            continue;
        }
        let mut calib_idx: Vec<usize> = (0..train_tokens.len()).collect();
        calib_idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xca1b)));
        calib_idx.truncate(cfg.baseline_calib_docs.max(1));
        calib_idx.sort_unstable();
        let calib: Vec<Vec<u32>> = calib_idx.iter().map(|&i| train_tokens[i].clone()).collect();
        for &s in &cfg.sparsities {
            let remove = zero_count(gates, s);
            let b_dir = seed_dir.join("baselines").join(sparsity_dir(s));
            create_dir(&b_dir).stage("baseline")?;
            let mut results: Vec<StaticMaskResult> = Vec::new();
            if b.sleb {
                results.push(sleb_prune(&model, &calib, remove).stage("baseline")?);
            }
            if b.oneshot_ppl {
                results.push(oneshot_importance_prune(&model, &calib, remove).stage("baseline")?);
            }
            if b.evopress {
                results.push(
                    evopress_search(
                        &model,
                        &calib,
                        s,
                        b.evopress_generations,
                        b.evopress_population,
                        derive_seed(seed, 0xe70),
                    )
                    .stage("baseline")?,
                );
            }
            for r in results {
                let lib = r
                    .to_library(&model, encoder.config(), s, centroid_all.clone())
                    .stage("baseline")?;
                lib.save(&b_dir.join(format!("{}.json", r.method)))
                    .stage("baseline")?;
                let ev = evaluate_library(&lib, &model, &heldout, &heldout_tokens, &tasks)
                    .stage("eval")?;
                report.rows.push(EvalRow {
                    method: r.method.to_string(),
                    n_clusters: 1,
                    sparsity: s,
                    seed,
                    perplexity: ev.perplexity,
                    tokens: ev.tokens,
                    mc_accuracy: ev.mc_accuracy,
                    flops_percentage: ev.flops_percentage,
                });
            }
        }
    }
    report.fill_sweep();
    report.write(out).stage("report")?;
    Ok(report)
}

/// Artifact paths produced by [`run_pipeline`] for one dynamic run.
pub fn library_path(out: &Path, seed: u64, n: usize, sparsity: f32) -> PathBuf {
    out.join(format!("seed{seed}"))
        .join(format!("n{n}"))
        .join(sparsity_dir(sparsity))
        .join("library.json")
}

pub fn baseline_path(out: &Path, seed: u64, sparsity: f32, method: &str) -> PathBuf {
    out.join(format!("seed{seed}"))
        .join("baselines")
        .join(sparsity_dir(sparsity))
        .join(format!("{method}.json"))
}
