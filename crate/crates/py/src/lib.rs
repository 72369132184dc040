//! Python bindings: models, mask libraries, routing, FLOPs and the pipeline.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dynadepth::embed::{kmeans_fit, HashedNgramEncoder};
use dynadepth::flops::{self, FlopsArch, FlopsReport};
use dynadepth::gates::{binarize_scores, GateParams};
use dynadepth::harness::{self, CorpusSpec, ExperimentConfig};
use dynadepth::model::{checkpoint, tokenizer, ModelConfig, Transformer};
use dynadepth::router::{self, Router};
use dynadepth::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Training { .. } | Error::Stage { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn as_list(mask: &[u8]) -> Vec<u32> {
    mask.iter().map(|&b| b as u32).collect()
}

fn check_mask(model: &Transformer, mask: Option<Vec<u8>>) -> Vec<u8> {
    mask.unwrap_or_else(|| vec![1; model.config().num_gates()])
}

/// A toy decoder-only transformer over bytes.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: Transformer,
}

#[pymethods]
impl PyModel {
    /// Randomly initialized model from a JSON config (empty string for defaults).
    #[staticmethod]
    #[pyo3(signature = (config_json = "", seed = 0))]
    fn init(config_json: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = if config_json.is_empty() {
            ModelConfig::default()
        } else {
            serde_json::from_str(config_json).map_err(|e| to_py(e.into()))?
        };
        Ok(Self {
            inner: Transformer::init(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(path.as_ref()).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.inner, path.as_ref()).map_err(to_py)
    }

    fn fingerprint(&self) -> String {
        checkpoint::fingerprint(&self.inner)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(|e| to_py(e.into()))
    }

    #[getter]
    fn num_gates(&self) -> usize {
        self.inner.config().num_gates()
    }

    /// Logits `[len(tokens)][vocab]` through the skip path.
    #[pyo3(signature = (tokens, mask = None))]
    fn forward(&self, tokens: Vec<u32>, mask: Option<Vec<u8>>) -> PyResult<Vec<Vec<f32>>> {
        let mask = check_mask(&self.inner, mask);
        let mut cache = self.inner.new_cache();
        let maskf: Vec<f32> = mask.iter().map(|&b| b as f32).collect();
        let logits = self
            .inner
            .forward_infer(&tokens, &maskf, &mut cache)
            .map_err(to_py)?;
        let (rows, _) = logits.as_matrix();
        Ok((0..rows).map(|r| logits.row(r).to_vec()).collect())
    }

    /// Greedy continuation of `prompt`; returns the decoded text.
    #[pyo3(signature = (prompt, steps, mask = None))]
    fn generate(&self, prompt: &str, steps: usize, mask: Option<Vec<u8>>) -> PyResult<String> {
        let mask = check_mask(&self.inner, mask);
        let maskf: Vec<f32> = mask.iter().map(|&b| b as f32).collect();
        let out = self
            .inner
            .generate(&tokenizer::encode(prompt.as_bytes()), &maskf, steps)
            .map_err(to_py)?;
        Ok(String::from_utf8_lossy(&tokenizer::decode(&out)).into_owned())
    }

    /// Perplexity of `texts` under a binary mask.
    #[pyo3(signature = (texts, mask = None))]
    fn perplexity(&self, texts: Vec<String>, mask: Option<Vec<u8>>) -> PyResult<f64> {
        let mask = check_mask(&self.inner, mask);
        let data: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| tokenizer::encode(t.as_bytes()))
            .collect();
        router::evaluate_masked_ppl(&self.inner, &mask, &data).map_err(to_py)
    }
}

/// Per-cluster masks bound to one checkpoint.
#[pyclass(name = "MaskLibrary", frozen)]
struct PyMaskLibrary {
    inner: router::MaskLibrary,
}

#[pymethods]
impl PyMaskLibrary {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: router::MaskLibrary::load(path.as_ref()).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: router::MaskLibrary::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn num_clusters(&self) -> usize {
        self.inner.num_clusters()
    }

    #[getter]
    fn target_sparsity(&self) -> f32 {
        self.inner.target_sparsity
    }

    fn masks(&self) -> Vec<Vec<u32>> {
        self.inner
            .clusters
            .iter()
            .map(|c| as_list(&c.binary_mask))
            .collect()
    }

    /// `(cluster, squared distance, mask)` for `text`.
    fn route(&self, model: &PyModel, text: &str) -> PyResult<(usize, f64, Vec<u32>)> {
        let r = Router::new(self.inner.clone(), &model.inner).map_err(to_py)?;
        let route = r.route(text.as_bytes()).map_err(to_py)?;
        Ok((route.cluster, route.distance, as_list(&route.mask)))
    }

    /// Routes once, then decodes greedily; returns `(text, report)`.
    fn routed_generate<'py>(
        &self,
        py: Python<'py>,
        model: &PyModel,
        prompt: &str,
        steps: usize,
    ) -> PyResult<(String, Bound<'py, PyDict>)> {
        let r = Router::new(self.inner.clone(), &model.inner).map_err(to_py)?;
        let (tokens, report) = r.routed_generate(prompt.as_bytes(), steps).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("cluster", report.cluster)?;
        d.set_item("distance", report.distance)?;
        d.set_item("mask", as_list(&report.mask))?;
        d.set_item("skipped_flops_fraction", report.skipped_flops_fraction)?;
        Ok((
            String::from_utf8_lossy(&tokenizer::decode(&tokens)).into_owned(),
            d,
        ))
    }
}

fn report_dict<'py>(py: Python<'py>, r: &FlopsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("seq_len", r.seq_len)?;
    d.set_item("dense_flops", r.dense_flops)?;
    d.set_item("masked_flops", r.masked_flops)?;
    d.set_item("percentage", r.percentage)?;
    d.set_item("ffn", r.masked.ffn)?;
    d.set_item("attention_linear", r.masked.attention_linear)?;
    d.set_item("attention_scores", r.masked.attention_scores)?;
    d.set_item("kv_projections", r.masked.kv_projections)?;
    d.set_item("lm_head", r.masked.lm_head)?;
    d.set_item("exclusions", &r.exclusions)?;
    Ok(d)
}

fn arch_of(model: Option<&PyModel>) -> FlopsArch {
    model.map_or_else(FlopsArch::llama3_8b, |m| FlopsArch::from(m.inner.config()))
}

/// Dense FLOPs for `model`, or for Llama-3-8B when omitted.
#[pyfunction]
#[pyo3(signature = (seq_len, model = None))]
fn dense_flops<'py>(
    py: Python<'py>,
    seq_len: usize,
    model: Option<&PyModel>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = flops::dense_flops(&arch_of(model), seq_len).map_err(to_py)?;
    report_dict(py, &r)
}

#[pyfunction]
#[pyo3(signature = (seq_len, mask, model = None))]
fn masked_flops<'py>(
    py: Python<'py>,
    seq_len: usize,
    mask: Vec<u8>,
    model: Option<&PyModel>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = flops::masked_flops(&arch_of(model), seq_len, &mask).map_err(to_py)?;
    report_dict(py, &r)
}

/// Closed-form expected zero fraction of hard-concrete gates.
#[pyfunction]
fn expected_sparsity(log_alpha: Vec<f32>) -> f32 {
    GateParams {
        log_alpha,
        ..GateParams::new(0, 0.0)
    }
    .expected_sparsity()
}

#[pyfunction]
fn binarize(scores: Vec<f32>, target_sparsity: f32) -> PyResult<Vec<u32>> {
    binarize_scores(&scores, target_sparsity)
        .map(|m| as_list(&m))
        .map_err(to_py)
}

/// Hashed character n-gram embedding (unit IDF weights).
#[pyfunction]
#[pyo3(signature = (text, dim = 64, hash_seed = 0))]
fn encode(text: &str, dim: usize, hash_seed: u64) -> PyResult<Vec<f32>> {
    HashedNgramEncoder::new(dim, hash_seed)
        .encode(text.as_bytes())
        .map_err(to_py)
}

/// `(centroids, assignments, inertia)`.
#[pyfunction]
fn kmeans(
    embeddings: Vec<Vec<f32>>,
    n: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f32>>, Vec<usize>, f64)> {
    let m = kmeans_fit(&embeddings, n, seed).map_err(to_py)?;
    Ok((m.centroids, m.assignments, m.inertia))
}

/// `(id, domain, text)` triples.
#[pyfunction]
#[pyo3(signature = (num_domains = 4, docs_per_domain = 50, doc_len = 320, seed = 0))]
fn synthetic_corpus(
    num_domains: usize,
    docs_per_domain: usize,
    doc_len: usize,
    seed: u64,
) -> PyResult<Vec<(String, usize, String)>> {
    let docs = harness::make_synthetic_corpus(&CorpusSpec {
        num_domains,
        docs_per_domain,
        doc_len,
        seed,
    })
    .map_err(to_py)?;
    Ok(docs.into_iter().map(|d| (d.id, d.domain, d.text)).collect())
}

/// Runs the full experiment from a JSON config; returns the report as JSON.
#[pyfunction]
fn run_pipeline(config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    let report = harness::run_pipeline(&cfg).map_err(to_py)?;
    serde_json::to_string(&report).map_err(|e| to_py(e.into()))
}

#[pymodule]
#[pyo3(name = "dynadepth")]
fn dynadepth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyMaskLibrary>()?;
    m.add_function(wrap_pyfunction!(dense_flops, m)?)?;
    m.add_function(wrap_pyfunction!(masked_flops, m)?)?;
    m.add_function(wrap_pyfunction!(expected_sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
