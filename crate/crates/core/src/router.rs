//! Query embedding, coarse-to-fine routing with per-parent top-k pruning and
//! memory-conditioned generation.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::Init;
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph, Mat};
use crate::memory::MemoryLookup;
use crate::model::{Handles, Model};
use crate::tokenizer::{self, EOS};
use crate::tree::{NodeId, SemanticTree};

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingParams {
    /// `d × d_h`, applied as `q W_q`.
    pub w_q: Mat,
    pub w_k: Mat,
    pub d_h: usize,
    pub k: usize,
    /// Deepest level that may be expanded into; `None` means the tree height.
    pub max_depth: Option<usize>,
    pub budget: usize,
    pub tau: f64,
}

impl RoutingParams {
    pub fn init(d: usize, d_h: usize, seed: u64) -> Self {
        let mut init = Init::new(seed);
        let std = 1.0 / (d as f64).sqrt();
        Self {
            w_q: init.normal(d, d_h, std),
            w_k: init.normal(d, d_h, std),
            d_h,
            k: 2,
            max_depth: None,
            budget: 64,
            tau: 1.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.k == 0 || self.budget == 0 || !(self.tau > 0.0) {
            return Err(Error::Config(format!(
                "routing needs k >= 1, budget >= 1, tau > 0 (got k={}, budget={}, tau={})",
                self.k, self.budget, self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVector {
    pub q: Vec<f64>,
    pub n_q: usize,
    pub question: String,
}

/// Number of question tokens used to form the query: `max(1, ⌊T/2⌋)`.
pub fn query_prefix_len(total_tokens: usize) -> usize {
    (total_tokens / 2).max(1)
}

pub fn embed_query_in<G: Graph>(g: &mut G, model: &Model, h: &Handles<G::T>, tokens: &[u32]) -> Result<G::T> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("question"));
    }
    let n_q = query_prefix_len(tokens.len());
    let e = g.constant(Arc::new(model.backbone.embed(&tokens[..n_q])?));
    let seq = g.vstack(&[h.e_write.clone(), e, h.e_read.clone()]);
    model.backbone.readout_in(g, &seq)
}

pub fn embed_query(model: &Model, question: &str) -> Result<QueryVector> {
    let tokens = tokenizer::encode(question);
    let mut g = Eager;
    let h = model.handles(&mut g, false);
    let q = embed_query_in(&mut g, model, &h, &tokens)?;
    Ok(QueryVector {
        q: q.row(0).to_vec(),
        n_q: query_prefix_len(tokens.len()),
        question: question.to_string(),
    })
}

/// Routing scores of `memories` (`c × d`) as a `1 × c` row.
pub fn scores_in<G: Graph>(g: &mut G, d_h: usize, h: &Handles<G::T>, q: &G::T, memories: &G::T) -> G::T {
    let qp = g.matmul(q, &h.w_q);
    let kp = g.matmul(memories, &h.w_k);
    let s = g.matmul_nt(&qp, &kp);
    g.scale(&s, 1.0 / (d_h as f64).sqrt())
}

/// `(W_q q)ᵀ (W_k m) / √d_h`.
pub fn score(q: &[f64], m: &[f64], params: &RoutingParams) -> f64 {
    let qp = project(q, &params.w_q);
    let kp = project(m, &params.w_k);
    dot(&qp, &kp) / (params.d_h as f64).sqrt()
}

fn project(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w.ncols()).map(|j| x.iter().enumerate().map(|(i, v)| v * w[[i, j]]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChild {
    pub parent: NodeId,
    pub child: NodeId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub parent: NodeId,
    pub level: usize,
    pub selected: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingTrace {
    /// Candidate sets per level, ids ascending. `levels[0] == [root]`.
    pub levels: Vec<Vec<NodeId>>,
    pub evaluated: Vec<ScoredChild>,
    pub expansions: Vec<ExpansionRecord>,
    /// Retrieved nodes in level-major, id-ascending order (the `M_ret` row order).
    pub retrieved: Vec<NodeId>,
    pub budget_hit: bool,
}

impl RoutingTrace {
    pub fn score_evals(&self) -> usize {
        self.evaluated.len()
    }

    pub fn expanded_parents(&self) -> usize {
        self.expansions.len()
    }
}

/// Score descending, then id ascending.
fn rank(a: &(NodeId, f64), b: &(NodeId, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// `TopK` under the tie rule used everywhere in routing.
pub fn top_k(scored: &[(NodeId, f64)], k: usize) -> Vec<(NodeId, f64)> {
    let mut v = scored.to_vec();
    v.sort_by(rank);
    v.truncate(k);
    v
}

pub fn route(
    tree: &SemanticTree,
    memories: &impl MemoryLookup,
    q: &QueryVector,
    params: &RoutingParams,
) -> Result<RoutingTrace> {
    params.check()?;
    let max_depth = params.max_depth.unwrap_or_else(|| tree.height());
    let qp = project(&q.q, &params.w_q);
    let inv = 1.0 / (params.d_h as f64).sqrt();
    let root = tree.root();
    if memories.memory(root).is_none() {
        return Err(Error::MissingMemory(root));
    }

    let mut levels = vec![vec![root]];
    let mut evaluated = Vec::new();
    let mut expansions = Vec::new();
    let mut retrieved_count = 1usize;
    let mut budget_hit = false;

    for level in 0.. {
        if level >= max_depth || budget_hit {
            break;
        }
        let mut next: Vec<(NodeId, f64)> = Vec::new();
        for &p in &levels[level] {
            let children = tree.children(p);
            if children.is_empty() {
                continue;
            }
            let mut scored = Vec::with_capacity(children.len());
            for &c in children {
                let m = memories.memory(c).ok_or(Error::MissingMemory(c))?;
                let s = dot(&qp, &project(&m, &params.w_k)) * inv;
                evaluated.push(ScoredChild {
                    parent: p,
                    child: c,
                    score: s,
                });
                scored.push((c, s));
            }
            let chosen = top_k(&scored, params.k);
            expansions.push(ExpansionRecord {
                parent: p,
                level,
                selected: chosen.iter().map(|c| c.0).collect(),
            });
            next.extend(chosen);
        }
        if next.is_empty() {
            break;
        }
        let room = params.budget - retrieved_count;
        if next.len() > room {
            next.sort_by(rank);
            next.truncate(room);
            budget_hit = true;
        }
        if next.is_empty() {
            break;
        }
        retrieved_count += next.len();
        let mut ids: Vec<NodeId> = next.into_iter().map(|c| c.0).collect();
        ids.sort();
        levels.push(ids);
        if retrieved_count == params.budget {
            budget_hit = true;
        }
    }

    let retrieved = levels.iter().flatten().copied().collect();
    Ok(RoutingTrace {
        levels,
        evaluated,
        expansions,
        retrieved,
        budget_hit,
    })
}

/// Retrieved memories stacked in trace order. With `leaves_only`, internal
/// nodes are dropped (falling back to the full set when no leaf was reached).
pub fn stack_retrieved(
    tree: &SemanticTree,
    trace: &RoutingTrace,
    memories: &impl MemoryLookup,
    leaves_only: bool,
) -> Result<Mat> {
    let mut ids: Vec<NodeId> = trace.retrieved.clone();
    if leaves_only {
        let leaves: Vec<NodeId> = ids.iter().copied().filter(|&id| tree.children(id).is_empty()).collect();
        if !leaves.is_empty() {
            ids = leaves;
        }
    }
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        rows.push(memories.memory(id).ok_or(Error::MissingMemory(id))?);
    }
    let d = rows.first().map_or(0, Vec::len);
    Ok(crate::graph::stack_rows(&rows, d))
}

/// `[M_ret; E(question); E(generated)]` as an `n × d` input.
pub fn generation_input(model: &Model, m_ret: &Mat, question: &[u32], generated: &[u32]) -> Result<Mat> {
    let q = model.backbone.embed(question)?;
    let a = model.backbone.embed(generated)?;
    Ok(crate::graph::kernels::vstack(&[m_ret, &q, &a]))
}

fn argmax(row: ndarray::ArrayView1<f64>) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding conditioned on the retrieved memories. Stops at EOS.
pub fn generate(model: &Model, m_ret: &Mat, question: &str, max_new_tokens: usize) -> Result<Vec<u32>> {
    let q = tokenizer::encode(question);
    if q.is_empty() {
        return Err(Error::EmptyInput("question"));
    }
    let total = m_ret.nrows() + q.len() + max_new_tokens;
    if total > model.backbone.config.ctx {
        return Err(Error::ContextOverflow {
            len: total,
            ctx: model.backbone.config.ctx,
        });
    }
    let mut out = Vec::with_capacity(max_new_tokens);
    for _ in 0..max_new_tokens {
        let logits = first_step_logits(model, m_ret, &q, &out)?;
        let next = argmax(logits.view());
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

/// Next-token logits at the end of `[M_ret; question; generated]`.
pub fn first_step_logits(model: &Model, m_ret: &Mat, question: &[u32], generated: &[u32]) -> Result<ndarray::Array1<f64>> {
    let x = generation_input(model, m_ret, question, generated)?;
    let h = model.backbone.forward(&x)?;
    let last = h.slice(ndarray::s![h.nrows() - 1.., ..]).to_owned();
    Ok(model.backbone.lm_logits(&last).row(0).to_owned())
}

/// Every node in `R` has its ancestors in `R`.
pub fn is_ancestor_closed(tree: &SemanticTree, retrieved: &[NodeId]) -> bool {
    let set: BTreeSet<NodeId> = retrieved.iter().copied().collect();
    retrieved.iter().all(|&v| tree.ancestors(v).iter().all(|a| set.contains(a)))
}
