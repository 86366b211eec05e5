use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use h2mt_core::memory::MemoryCache;
use h2mt_core::pipeline::{self, AskParams, ModelSpec};
use h2mt_core::{bench, tokenizer, BackboneConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn model_for(cache: &MemoryCache, seed: Option<u64>, ctx: Option<usize>) -> PyResult<h2mt_core::Model> {
    let spec = ModelSpec {
        seed: seed.unwrap_or(0),
        ctx,
        ..ModelSpec::default()
    };
    spec.for_cache(cache, seed.is_some()).and_then(|s| s.load()).map_err(err)
}

/// Parse `text` (format "md", "json" or "text") and return the tree as JSON.
#[pyfunction]
#[pyo3(signature = (text, format = "md", max_leaf_tokens = 256))]
fn build_tree(text: &str, format: &str, max_leaf_tokens: usize) -> PyResult<String> {
    let format = format.parse().map_err(err)?;
    Ok(pipeline::build_tree(text, format, max_leaf_tokens).map_err(err)?.to_json())
}

/// Build a cache for a tree and return the cache file bytes.
#[pyfunction]
#[pyo3(signature = (tree_json, policy = "mean", seed = 0, ctx = None, built_at = 0))]
fn memorize<'py>(
    py: Python<'py>,
    tree_json: &str,
    policy: &str,
    seed: u64,
    ctx: Option<usize>,
    built_at: u64,
) -> PyResult<Bound<'py, PyBytes>> {
    let tree = pipeline::read_tree(tree_json).map_err(err)?;
    let spec = ModelSpec {
        seed,
        policy: Some(policy.parse().map_err(err)?),
        ctx,
        weights: None,
    };
    let model = spec.load().map_err(err)?;
    let cache = h2mt_core::build_all(&tree, &model, built_at).map_err(err)?;
    Ok(PyBytes::new(py, &cache.to_bytes()))
}

/// Route a question; returns (answer JSON, trace JSON).
#[pyfunction]
#[pyo3(signature = (tree_json, cache, question, k = 2, max_depth = None, budget = 64, max_new_tokens = 32, leaves_only = false, seed = None, ctx = None))]
#[allow(clippy::too_many_arguments)]
fn ask(
    tree_json: &str,
    cache: &[u8],
    question: &str,
    k: usize,
    max_depth: Option<usize>,
    budget: usize,
    max_new_tokens: usize,
    leaves_only: bool,
    seed: Option<u64>,
    ctx: Option<usize>,
) -> PyResult<(String, String)> {
    let tree = pipeline::read_tree(tree_json).map_err(err)?;
    let cache = MemoryCache::from_bytes(cache).map_err(err)?;
    let model = model_for(&cache, seed, ctx)?;
    let params = AskParams {
        k,
        max_depth,
        budget,
        leaves_only,
        max_new_tokens,
    };
    let answer = pipeline::ask(&model, &tree, &cache, question, &params).map_err(err)?;
    let trace = serde_json::to_string(&answer.trace).map_err(err)?;
    Ok((serde_json::to_string(&answer).map_err(err)?, trace))
}

/// Cache entries as {node_id: [floats]}.
#[pyfunction]
fn cache_entries(cache: &[u8]) -> PyResult<Vec<(u64, Vec<f32>)>> {
    let cache = MemoryCache::from_bytes(cache).map_err(err)?;
    Ok(cache.entries.into_iter().map(|(id, v)| (id.0, v)).collect())
}

#[pyfunction]
fn encode(text: &str) -> Vec<u32> {
    tokenizer::encode(text)
}

#[pyfunction]
fn decode(tokens: Vec<u32>) -> String {
    tokenizer::decode(&tokens)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> f64 {
    bench::rouge_l(candidate, reference)
}

#[pyfunction]
fn token_f1(candidate: &str, reference: &str) -> f64 {
    bench::token_f1(candidate, reference)
}

/// Prefill cost in model units for the default backbone with `layers` and `d`.
#[pyfunction]
#[pyo3(signature = (n_q, length, layers = 2, d = 64))]
fn cost_model(n_q: usize, length: usize, layers: usize, d: usize) -> f64 {
    let cfg = BackboneConfig {
        layers,
        d,
        ..BackboneConfig::default()
    };
    bench::cost_model(n_q, length, &cfg)
}

#[pymodule]
fn h2mt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(build_tree, m)?)?;
    m.add_function(wrap_pyfunction!(memorize, m)?)?;
    m.add_function(wrap_pyfunction!(ask, m)?)?;
    m.add_function(wrap_pyfunction!(cache_entries, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(token_f1, m)?)?;
    m.add_function(wrap_pyfunction!(cost_model, m)?)?;
    Ok(())
}
