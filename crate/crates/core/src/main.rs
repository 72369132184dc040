use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dynadepth::baselines::{evopress_search, oneshot_importance_prune, sleb_prune};
use dynadepth::error::StageContext;
use dynadepth::flops::{dense_flops, masked_flops, FlopsArch};
use dynadepth::gates::{zero_count, MaskCandidate};
use dynadepth::harness::{
    cluster_documents, load_corpus, load_tasks, make_synthetic_corpus, obtain_base_model,
    run_pipeline, tokenize_docs, train_cluster_masks, write_corpus, Clustering, CorpusSource,
    CorpusSpec, Document, ExperimentConfig, LibraryEval,
};
use dynadepth::model::{checkpoint, tokenizer, Transformer};
use dynadepth::router::{MaskLibrary, Router};
use dynadepth::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dynadepth",
    version,
    about = "Input-aware dynamic depth pruning for toy transformers"
)]
struct Cli {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Sleb,
    OneshotPpl,
    Evopress,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    /// Llama-3-8B.
    Llama3_8b,
    /// The model in the experiment config.
    Config,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-domain corpus.
    GenCorpus {
        #[arg(long, default_value_t = 4)]
        domains: usize,
        #[arg(long, default_value_t = 200)]
        docs_per_domain: usize,
        #[arg(long, default_value_t = 320)]
        doc_len: usize,
    },
    /// Pre-train the toy model on a corpus.
    TrainBase {
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
    },
    /// Embed and cluster a corpus.
    Cluster {
        #[arg(long)]
        clusters: usize,
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
    },
    /// Train one gate vector per cluster against a frozen checkpoint.
    TrainMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clustering: PathBuf,
        #[arg(long)]
        sparsity: f32,
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
    },
    /// Binarize trained candidates into a mask library.
    Binarize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        /// Clustering the candidates were trained from; supplies the encoder.
        #[arg(long)]
        clustering: PathBuf,
        #[arg(long)]
        sparsity: f32,
    },
    /// Route an input to a mask and optionally generate.
    Route {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "file")]
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        steps: usize,
    },
    /// Held-out perplexity and task accuracy of a mask library.
    Eval {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Static depth-pruning baseline.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sparsity: f32,
        #[arg(long, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        generations: usize,
        #[arg(long, default_value_t = 8)]
        population: usize,
    },
    /// Analytic forward FLOPs for a dense or masked model.
    Flops {
        #[arg(long, value_enum, default_value_t = Arch::Llama3_8b)]
        arch: Arch,
        #[arg(long, default_value_t = 2048)]
        seq_len: usize,
        /// Comma-separated 0/1 gates in flat order.
        #[arg(long)]
        mask: Option<String>,
    },
    /// Full experiment: corpus, base model, masks, baselines, report.
    Pipeline,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.clone(),
            source: e,
        })?;
        Ok(self.out.join(name))
    }

    /// The given corpus paths, else the config's corpus.
    fn corpus(&self, paths: &[PathBuf]) -> Result<Vec<Document>> {
        if !paths.is_empty() {
            return load_corpus(paths);
        }
        match &self.cfg.corpus {
            CorpusSource::Synthetic(spec) => make_synthetic_corpus(spec),
            CorpusSource::Paths(p) => load_corpus(p),
        }
    }

    fn model(&self, path: &Path) -> Result<Transformer> {
        Ok(checkpoint::load(path)?.with_granularity(self.cfg.granularity))
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_eval(ev: &LibraryEval) {
    println!("perplexity {:.6} over {} tokens", ev.perplexity, ev.tokens);
    println!("multiple-choice accuracy {:.4}", ev.mc_accuracy);
    println!(
        "mean forward FLOPs {:.2}% of dense",
        100.0 * ev.flops_percentage
    );
    for (k, &(docs, tokens, nll)) in ev.per_cluster.iter().enumerate() {
        println!(
            "  cluster {k}: {docs} documents, perplexity {:.6}",
            dynadepth::util::perplexity(nll, tokens)
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).stage("config")?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    let ctx = Ctx {
        out: cfg.output_dir.clone(),
        cfg,
    };

    match cli.command {
        Command::GenCorpus {
            domains,
            docs_per_domain,
            doc_len,
        } => {
            let spec = CorpusSpec {
                num_domains: domains,
                docs_per_domain,
                doc_len,
                seed: ctx.seed(),
            };
            let docs = make_synthetic_corpus(&spec).stage("gen-corpus")?;
            let paths = write_corpus(&docs, &ctx.out).stage("gen-corpus")?;
            println!(
                "wrote {} documents to {} files in {}",
                docs.len(),
                paths.len(),
                ctx.out.display()
            );
        }
        Command::TrainBase { corpus } => {
            let docs = ctx.corpus(&corpus).stage("train-base")?;
            let mut base = ctx.cfg.base_training.clone();
            if let Some(s) = cli.seed {
                base.seed = s;
            }
            let (model, losses) =
                obtain_base_model(&ctx.cfg.model_config(), &base, None, &tokenize_docs(&docs))
                    .stage("train-base")?;
            let path = ctx.out_file("base.ckpt")?;
            checkpoint::save(&model, &path).stage("train-base")?;
            println!(
                "trained {} steps, final loss {:.4}, fingerprint {}",
                losses.len(),
                losses.last().copied().unwrap_or(f32::NAN),
                checkpoint::fingerprint(&model)
            );
            println!("wrote {}", path.display());
        }
        Command::Cluster { clusters, corpus } => {
            let docs = ctx.corpus(&corpus).stage("cluster")?;
            let encoder = ctx.cfg.encoder.build(&docs).stage("cluster")?;
            let c = cluster_documents(&encoder, &docs, clusters, ctx.seed()).stage("cluster")?;
            let path = ctx.out_file("clusters.json")?;
            write_json(&path, &c).stage("cluster")?;
            println!(
                "inertia {:.6} after {} iterations",
                c.model.inertia,
                c.model.inertia_history.len()
            );
            for k in 0..clusters {
                println!("  cluster {k}: {} items", c.members(k).len());
            }
            println!("wrote {}", path.display());
        }
        Command::TrainMasks {
            checkpoint,
            clustering,
            sparsity,
            corpus,
        } => {
            let model = ctx.model(&checkpoint).stage("train-masks")?;
            let text = std::fs::read_to_string(&clustering).map_err(|e| Error::Io {
                path: clustering.clone(),
                source: e,
            })?;
            let c: Clustering = serde_json::from_str(&text).stage("train-masks")?;
            let docs = ctx.corpus(&corpus).stage("train-masks")?;
            let by_id: std::collections::HashMap<&str, &Document> =
                docs.iter().map(|d| (d.id.as_str(), d)).collect();
            let tokens: Vec<Vec<u32>> = c
                .item_ids
                .iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|d| tokenizer::encode(d.text.as_bytes()))
                        .ok_or_else(|| Error::Lookup(id.clone()))
                })
                .collect::<Result<_>>()
                .stage("train-masks")?;
            std::fs::create_dir_all(&ctx.out).map_err(|e| Error::Io {
                path: ctx.out.clone(),
                source: e,
            })?;
            let cands = train_cluster_masks(
                &model,
                &c,
                &tokens,
                &ctx.cfg.mask_training,
                sparsity,
                ctx.cfg.calib_per_cluster,
                ctx.seed(),
                Some(&ctx.out),
            )
            .stage("train-masks")?;
            let path = ctx.out_file("candidates.json")?;
            write_json(&path, &cands).stage("train-masks")?;
            for cand in &cands {
                println!("  cluster {}: mask {:?}", cand.cluster_id, cand.binary_mask);
            }
            println!("wrote {}", path.display());
        }
        Command::Binarize {
            checkpoint,
            candidates,
            clustering,
            sparsity,
        } => {
            let model = ctx.model(&checkpoint).stage("binarize")?;
            let text = std::fs::read_to_string(&candidates).map_err(|e| Error::Io {
                path: candidates.clone(),
                source: e,
            })?;
            let cands: Vec<MaskCandidate> = serde_json::from_str(&text).stage("binarize")?;
            let cands: Vec<MaskCandidate> = cands
                .into_iter()
                .map(|c| {
                    let mask = c.gate.binarize(sparsity)?;
                    Ok(MaskCandidate::new(c.cluster_id, c.centroid, c.gate, mask))
                })
                .collect::<Result<_>>()
                .stage("binarize")?;
            let text = std::fs::read_to_string(&clustering).map_err(|e| Error::Io {
                path: clustering.clone(),
                source: e,
            })?;
            let encoder = serde_json::from_str::<Clustering>(&text)
                .stage("binarize")?
                .encoder;
            let lib = MaskLibrary::new(&model, encoder, sparsity, &cands).stage("binarize")?;
            let path = ctx.out_file("library.json")?;
            lib.save(&path).stage("binarize")?;
            println!("wrote {}", path.display());
        }
        Command::Route {
            library,
            checkpoint,
            text,
            file,
            steps,
        } => {
            let model = ctx.model(&checkpoint).stage("route")?;
            let lib = MaskLibrary::load(&library).stage("route")?;
            let router = Router::new(lib, &model).stage("route")?;
            let input = match (text, file) {
                (Some(t), _) => t.into_bytes(),
                (None, Some(f)) => {
                    std::fs::read(&f).map_err(|e| Error::Io { path: f, source: e })?
                }
                (None, None) => {
                    return Err(Error::Input("pass --text or --file".into())).stage("route")
                }
            };
            let (tokens, report) = router.routed_generate(&input, steps).stage("route")?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if steps > 0 {
                println!("{}", String::from_utf8_lossy(&tokenizer::decode(&tokens)));
            }
        }
        Command::Eval {
            library,
            checkpoint,
            corpus,
            tasks,
        } => {
            let model = ctx.model(&checkpoint).stage("eval")?;
            let lib = MaskLibrary::load(&library).stage("eval")?;
            let docs = ctx.corpus(&corpus).stage("eval")?;
            let tasks = match tasks {
                Some(p) => load_tasks(&p).stage("eval")?,
                None => Vec::new(),
            };
            let tokens = tokenize_docs(&docs);
            let ev = dynadepth::harness::evaluate_library(&lib, &model, &docs, &tokens, &tasks)
                .stage("eval")?;
            print_eval(&ev);
        }
        Command::Baseline {
            method,
            checkpoint,
            sparsity,
            corpus,
            generations,
            population,
        } => {
            let model = ctx.model(&checkpoint).stage("baseline")?;
            let docs = ctx.corpus(&corpus).stage("baseline")?;
            let calib = tokenize_docs(&docs[..docs.len().min(ctx.cfg.baseline_calib_docs.max(1))]);
            let remove = zero_count(model.config().num_gates(), sparsity);
            let result = match method {
                Method::Sleb => sleb_prune(&model, &calib, remove),
                Method::OneshotPpl => oneshot_importance_prune(&model, &calib, remove),
                Method::Evopress => evopress_search(
                    &model,
                    &calib,
                    sparsity,
                    generations,
                    population,
                    ctx.seed(),
                ),
            }
            .stage("baseline")?;
            let encoder = ctx.cfg.encoder.build(&docs).stage("baseline")?;
            let emb = dynadepth::harness::embed_documents(&encoder, &docs).stage("baseline")?;
            let d = encoder.config().dim();
            let mut centroid = vec![0.0f32; d];
            for e in &emb {
                centroid
                    .iter_mut()
                    .zip(e)
                    .for_each(|(c, x)| *c += x / emb.len() as f32);
            }
            let lib = result
                .to_library(&model, encoder.config(), sparsity, centroid)
                .stage("baseline")?;
            let path = ctx.out_file(&format!("{}.json", result.method))?;
            lib.save(&path).stage("baseline")?;
            println!("{} mask {:?}", result.method, result.binary_mask);
            println!("wrote {}", path.display());
        }
        Command::Flops {
            arch,
            seq_len,
            mask,
        } => {
            let arch = match arch {
                Arch::Llama3_8b => FlopsArch::llama3_8b(),
                Arch::Config => FlopsArch::from(&ctx.cfg.model_config()),
            };
            let report = match mask {
                None => dense_flops(&arch, seq_len),
                Some(m) => {
                    let bits: Vec<u8> = m
                        .split(',')
                        .map(|t| match t.trim() {
                            "0" => Ok(0),
                            "1" => Ok(1),
                            other => {
                                Err(Error::Input(format!("mask entry {other:?} is not 0 or 1")))
                            }
                        })
                        .collect::<Result<_>>()
                        .stage("flops")?;
                    masked_flops(&arch, seq_len, &bits)
                }
            }
            .stage("flops")?;
            print!("{}", report.to_table());
            if cli.out.is_some() {
                let path = ctx.out_file("flops.csv")?;
                let f = std::fs::File::create(&path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                report.write_csv(f)?;
                println!("wrote {}", path.display());
            } else {
                report.write_csv(std::io::stdout())?;
            }
        }
        Command::Pipeline => {
            let report = run_pipeline(&ctx.cfg)?;
            print!("{}", report.summary());
            println!("artifacts in {}", ctx.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
