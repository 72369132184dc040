//! Experiment driver: synthetic corpora, the cluster → train → binarize →
//! route → evaluate pipeline, and report emission.

mod config;
mod corpus;
mod pipeline;
mod report;
mod tasks;

pub use config::{
    BaselineToggles, CorpusSource, EncoderChoice, ExperimentConfig, TaskOptions,
    CONFIG_SCHEMA_VERSION,
};
pub use corpus::{load_corpus, make_synthetic_corpus, write_corpus, CorpusSpec, Document};
pub use pipeline::{
    baseline_path, calibration_sample, cluster_documents, embed_document, embed_documents,
    evaluate_library, library_path, obtain_base_model, prepare_corpus, run_pipeline, split_holdout,
    tokenize_docs, train_cluster_masks, Clustering, LibraryEval,
};
pub use report::{ClusterRow, EvalReport, EvalRow, Heatmap, SweepRow, DYNAMIC};
pub use tasks::{
    choice_score, load_tasks, multiple_choice_accuracy, parse_tasks, predict, synthetic_tasks,
    toy_multiple_choice_eval, write_tasks, McTask,
};
