//! Prefill cost model, time-to-first-token measurement against a flat
//! full-document baseline, and QA text metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::memory::MemoryLookup;
use crate::model::Model;
use crate::router::{self, embed_query, first_step_logits, route, stack_retrieved, RoutingParams};
use crate::tokenizer;
use crate::tree::SemanticTree;

/// `L · (n_q + len)² · d`.
pub fn cost_model(n_q: usize, len: usize, config: &BackboneConfig) -> f64 {
    let n = (n_q + len) as f64;
    config.layers as f64 * n * n * config.d as f64
}

/// Bytes of the largest activations held during one prefill of `n`
/// positions: the residual stream, one layer's attention scores and the MLP
/// hidden layer.
pub fn live_tensor_bytes(n: usize, config: &BackboneConfig) -> u64 {
    let n = n as u64;
    let f = std::mem::size_of::<f64>() as u64;
    f * (n * config.d as u64 * 2 + config.heads as u64 * n * n + n * config.mlp_hidden as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchQuestion {
    pub question: String,
    #[serde(default)]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureOptions {
    /// Timed repetitions of the routed path; the median is reported.
    pub repeats: usize,
    /// Timed repetitions of the (much slower) flat path.
    pub flat_repeats: usize,
    /// Untimed runs of each path before measuring.
    pub warmup: usize,
    /// Skip the flat forward pass and report its cost model only.
    pub model_only_flat: bool,
    pub leaves_only: bool,
    /// Tokens to decode when a reference answer is given.
    pub max_new_tokens: usize,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            repeats: 15,
            flat_repeats: 3,
            warmup: 2,
            model_only_flat: false,
            leaves_only: false,
            max_new_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub question: String,
    /// Full-document token count.
    pub n_doc: usize,
    /// Question tokens in the prefill.
    pub n_q: usize,
    pub n_ret: usize,
    pub budget: usize,
    pub score_evals: usize,
    pub expanded_parents: usize,
    pub flat_prefill_cost: f64,
    pub routed_prefill_cost: f64,
    pub model_ratio: f64,
    pub flat_live_bytes: u64,
    pub routed_live_bytes: u64,
    /// Median wall times in milliseconds. `flat_ttft_ms` is absent when the
    /// document does not fit the context window or the flat pass was skipped.
    pub route_ms: f64,
    pub routed_ttft_ms: f64,
    pub flat_ttft_ms: Option<f64>,
    pub measured_ratio: Option<f64>,
    pub generated: Option<String>,
    pub rouge_l: Option<f64>,
    pub token_f1: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// All node texts in pre-order, concatenated with newlines, as tokens.
pub fn document_tokens(tree: &SemanticTree) -> Vec<u32> {
    let mut parts = Vec::new();
    let mut stack = vec![tree.root()];
    while let Some(id) = stack.pop() {
        if let Some(n) = tree.node(id) {
            if !n.text.is_empty() {
                parts.push(n.text.as_str());
            }
            stack.extend(n.children.iter().rev());
        }
    }
    tokenizer::encode(&parts.join("\n"))
}

/// Time to first token of the flat baseline: the whole document followed by
/// the question, through the same backbone.
pub fn flat_first_token(model: &Model, doc: &[u32], question: &[u32]) -> Result<u32> {
    let x = crate::graph::kernels::vstack(&[&model.backbone.embed(doc)?, &model.backbone.embed(question)?]);
    let h = model.backbone.forward(&x)?;
    let last = h.slice(ndarray::s![h.nrows() - 1.., ..]).to_owned();
    let logits = model.backbone.lm_logits(&last);
    let row = logits.row(0);
    Ok((0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b }) as u32)
}

/// Measures routed and flat time to first token for every question. The
/// timing boundary starts after tokenization and ends once the first token's
/// logits are available.
pub fn measure(
    model: &Model,
    tree: &SemanticTree,
    cache: &impl MemoryLookup,
    questions: &[BenchQuestion],
    params: &RoutingParams,
    opts: &MeasureOptions,
) -> Result<Vec<CostReport>> {
    let cfg = &model.backbone.config;
    let doc = document_tokens(tree);
    let repeats = opts.repeats.max(1);
    let flat_runs = opts.flat_repeats.max(1);
    let mut out = Vec::with_capacity(questions.len());
    for bq in questions {
        let q_tokens = tokenizer::encode(&bq.question);
        let mut route_times = Vec::new();
        let mut ttft = Vec::new();
        let mut last = None;
        for run in 0..opts.warmup + repeats {
            let t0 = Instant::now();
            let qv = embed_query(model, &bq.question)?;
            let trace = route(tree, cache, &qv, params)?;
            let route_ms = ms(t0);
            let m_ret = stack_retrieved(tree, &trace, cache, opts.leaves_only)?;
            let logits = first_step_logits(model, &m_ret, &q_tokens, &[])?;
            if run >= opts.warmup {
                ttft.push(ms(t0));
                route_times.push(route_ms);
            }
            std::hint::black_box(&logits);
            last = Some((trace, m_ret));
        }
        let (trace, m_ret) = last.expect("at least one repeat");
        let n_ret = m_ret.nrows();
        let n_q = q_tokens.len();

        let fits = doc.len() + n_q <= cfg.ctx;
        let flat_ttft_ms = if fits && !opts.model_only_flat && !doc.is_empty() {
            let mut times = Vec::new();
            for run in 0..opts.warmup.min(1) + flat_runs {
                let t0 = Instant::now();
                std::hint::black_box(flat_first_token(model, &doc, &q_tokens)?);
                if run >= opts.warmup.min(1) {
                    times.push(ms(t0));
                }
            }
            Some(median(times))
        } else {
            None
        };

        let routed_ttft_ms = median(ttft);
        let flat_cost = cost_model(n_q, doc.len(), cfg);
        let routed_cost = cost_model(n_q, n_ret, cfg);
        let (generated, rouge, f1) = match &bq.answer {
            Some(reference) if n_ret + n_q + opts.max_new_tokens <= cfg.ctx => {
                let toks = router::generate(model, &m_ret, &bq.question, opts.max_new_tokens)?;
                let text = tokenizer::decode(&toks);
                (Some(text.clone()), Some(rouge_l(&text, reference)), Some(token_f1(&text, reference)))
            }
            _ => (None, None, None),
        };
        out.push(CostReport {
            question: bq.question.clone(),
            n_doc: doc.len(),
            n_q,
            n_ret,
            budget: params.budget,
            score_evals: trace.score_evals(),
            expanded_parents: trace.expanded_parents(),
            flat_prefill_cost: flat_cost,
            routed_prefill_cost: routed_cost,
            model_ratio: flat_cost / routed_cost,
            flat_live_bytes: live_tensor_bytes(doc.len() + n_q, cfg),
            routed_live_bytes: live_tensor_bytes(n_ret + n_q, cfg),
            route_ms: median(route_times),
            routed_ttft_ms,
            measured_ratio: flat_ttft_ms.map(|f| f / routed_ttft_ms),
            flat_ttft_ms,
            generated,
            rouge_l: rouge,
            token_f1: f1,
        });
    }
    Ok(out)
}

/// Lowercased alphanumeric runs.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

fn f_measure(overlap: usize, cand: usize, reference: usize) -> f64 {
    if cand == 0 && reference == 0 {
        return 1.0;
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

/// LCS-based F-measure over normalized tokens. Two empty texts score 1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (normalize(candidate), normalize(reference));
    f_measure(lcs(&c, &r), c.len(), r.len())
}

/// Bag-of-tokens F1 over normalized tokens. Two empty texts score 1.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (normalize(candidate), normalize(reference));
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, c.len(), r.len())
}
