//! Training objectives for the lightweight modules, gradient verification and
//! a momentum optimizer. The backbone stays frozen throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::next_token_ce_in;
use crate::error::{Error, Result};
use crate::graph::{kernels, Eager, Graph, Mat, Tape};
use crate::memory::{internal_memory_in, leaf_memory_in};
use crate::model::{Handles, Model};
use crate::router::{embed_query_in, route, scores_in, top_k, QueryVector, RoutingParams};
use crate::tokenizer::{self, RECONSTRUCTION_PROMPT};
use crate::tree::{post_order, NodeId, SemanticTree, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ae: f64,
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ae: 0.1,
            lambda_r: 1.0,
            lambda_s: 1.0,
            tau: 1.0,
        }
    }
}

impl LossWeights {
    pub fn check(&self) -> Result<()> {
        let ok = |x: f64| x >= 0.0 && x.is_finite();
        if !(ok(self.lambda_ae) && ok(self.lambda_r) && ok(self.lambda_s)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("routing temperature must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Which nodes contribute reconstruction terms to the QA objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncNodes {
    #[default]
    Leaves,
    All,
}

/// Per-parent routing labels derived from gold nodes by propagating them to
/// every ancestor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoutingSupervision {
    /// `g(p)`: the child on the path towards the lowest-id gold node.
    pub path: BTreeMap<NodeId, NodeId>,
    /// `G(p)`: every gold child of `p`.
    pub sets: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl RoutingSupervision {
    pub fn from_gold(tree: &SemanticTree, gold: &[NodeId]) -> Result<Self> {
        let mut sorted: Vec<NodeId> = gold.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut out = Self::default();
        for &leaf in &sorted {
            let node = tree.node(leaf).ok_or(Error::MissingMemory(leaf))?;
            let mut child = node.id;
            let mut parent = node.parent;
            while let Some(p) = parent {
                out.path.entry(p).or_insert(child);
                out.sets.entry(p).or_default().insert(child);
                child = p;
                parent = tree.node(p).and_then(|n| n.parent);
            }
        }
        out.check(tree)?;
        Ok(out)
    }

    pub fn check(&self, tree: &SemanticTree) -> Result<()> {
        for (&p, &c) in &self.path {
            if !tree.children(p).contains(&c) {
                return Err(Error::BadSupervision { parent: p, child: c });
            }
        }
        for (&p, set) in &self.sets {
            if set.is_empty() {
                return Err(Error::Config(format!("empty gold set at parent {p}")));
            }
            if let Some(&c) = set.iter().find(|c| !tree.children(p).contains(c)) {
                return Err(Error::BadSupervision { parent: p, child: c });
            }
        }
        Ok(())
    }

    /// Routed parents `P`.
    pub fn parents(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.path.keys().copied()
    }

    /// Gold node set (ancestor-closed minus the root).
    pub fn gold_nodes(&self) -> BTreeSet<NodeId> {
        self.sets.values().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub answer: String,
    pub gold: Vec<NodeId>,
}

fn one<G: Graph>(g: &mut G, x: f64) -> G::T {
    g.constant(Arc::new(Mat::from_elem((1, 1), x)))
}

fn sum_terms<G: Graph>(g: &mut G, terms: Vec<G::T>) -> Option<G::T> {
    let mut it = terms.into_iter();
    let first = it.next()?;
    Some(it.fold(first, |acc, t| g.add(&acc, &t)))
}

fn embed<G: Graph>(g: &mut G, model: &Model, tokens: &[u32]) -> Result<G::T> {
    Ok(g.constant(Arc::new(model.backbone.embed(tokens)?)))
}

/// Memories of every node, built bottom-up inside the graph so gradients reach
/// the write/read slots and the aggregation parameters.
pub fn memories_in<G: Graph>(
    g: &mut G,
    model: &Model,
    h: &Handles<G::T>,
    tree: &SemanticTree,
) -> Result<BTreeMap<NodeId, G::T>> {
    let mut out: BTreeMap<NodeId, G::T> = BTreeMap::new();
    for id in post_order(tree)? {
        let node = tree.node(id).ok_or(Error::MissingMemory(id))?;
        let tokens = node.tokens();
        let m = if node.is_leaf() {
            leaf_memory_in(g, model, h, &tokens)?
        } else {
            let rows: Vec<G::T> = node
                .children
                .iter()
                .map(|c| out.get(c).cloned().ok_or(Error::OrderingViolation { parent: id, child: *c }))
                .collect::<Result<_>>()?;
            let stack = g.vstack(&rows);
            internal_memory_in(g, model, h, &tokens, &stack)?.0
        };
        out.insert(id, m);
    }
    Ok(out)
}

/// LM loss of `x_v` conditioned on `[m_v; E_v]`; `None` for empty text.
pub fn lm_loss_in<G: Graph>(g: &mut G, model: &Model, tokens: &[u32], m_v: &G::T) -> Result<Option<G::T>> {
    if tokens.is_empty() {
        return Ok(None);
    }
    let e = embed(g, model, tokens)?;
    let x = g.vstack(&[m_v.clone(), e]);
    let hid = model.backbone.forward_in(g, &x)?;
    let hid = g.slice_rows(&hid, 0, tokens.len());
    let logits = model.backbone.lm_logits_in(g, &hid);
    next_token_ce_in(g, &logits, tokens).map(Some)
}

/// Reconstruction loss of `x_v` from `[m_v; prompt; E_v]`.
pub fn ae_loss_in<G: Graph>(g: &mut G, model: &Model, tokens: &[u32], m_v: &G::T) -> Result<Option<G::T>> {
    if tokens.is_empty() {
        return Ok(None);
    }
    let p = embed(g, model, &RECONSTRUCTION_PROMPT)?;
    let e = embed(g, model, tokens)?;
    let x = g.vstack(&[m_v.clone(), p, e]);
    let hid = model.backbone.forward_in(g, &x)?;
    let hid = g.slice_rows(&hid, RECONSTRUCTION_PROMPT.len(), tokens.len());
    let logits = model.backbone.lm_logits_in(g, &hid);
    next_token_ce_in(g, &logits, tokens).map(Some)
}

/// Answer loss under the generation layout `[M_ret; E_q; E_a]`.
pub fn gen_loss_in<G: Graph>(g: &mut G, model: &Model, m_ret: &G::T, question: &[u32], answer: &[u32]) -> Result<G::T> {
    if answer.is_empty() {
        return Err(Error::EmptyInput("answer"));
    }
    if question.is_empty() {
        return Err(Error::EmptyInput("question"));
    }
    let r = g.value(m_ret).nrows();
    let q = embed(g, model, question)?;
    let a = embed(g, model, answer)?;
    let x = g.vstack(&[m_ret.clone(), q, a]);
    let hid = model.backbone.forward_in(g, &x)?;
    let hid = g.slice_rows(&hid, r + question.len() - 1, answer.len());
    let logits = model.backbone.lm_logits_in(g, &hid);
    next_token_ce_in(g, &logits, answer)
}

/// `-log π_p(gold)` for one parent's `1 × c` score row.
pub fn route_loss_in<G: Graph>(g: &mut G, scores: &G::T, gold: usize, tau: f64) -> G::T {
    let s = g.scale(scores, 1.0 / tau);
    let ls = g.log_softmax_rows(&s);
    let picked = g.gather(&ls, &[(0, gold)]);
    g.scale(&picked, -1.0)
}

/// `-log Σ_{u∈G} π_p(u)`.
pub fn sel_loss_in<G: Graph>(g: &mut G, scores: &G::T, gold: &[usize], tau: f64) -> Result<G::T> {
    if gold.is_empty() {
        return Err(Error::EmptyInput("gold set"));
    }
    let s = g.scale(scores, 1.0 / tau);
    let ls = g.log_softmax_rows(&s);
    let idx: Vec<(usize, usize)> = gold.iter().map(|&j| (0, j)).collect();
    let picked = g.gather(&ls, &idx);
    let lse = g.logsumexp(&picked);
    Ok(g.scale(&lse, -1.0))
}

/// `π_p = softmax(s / τ)`.
pub fn routing_distribution(scores: &[f64], tau: f64) -> Vec<f64> {
    let row = Mat::from_shape_fn((1, scores.len()), |(_, j)| scores[j] / tau);
    kernels::softmax_rows(&row, false).row(0).to_vec()
}

pub fn loss_lm(model: &Model, node: &TreeNode, m_v: &[f64]) -> Result<f64> {
    let mut g = Eager;
    let m = Arc::new(crate::graph::row(m_v));
    Ok(lm_loss_in(&mut g, model, &node.tokens(), &m)?.map_or(0.0, |l| l[[0, 0]]))
}

pub fn loss_ae(model: &Model, node: &TreeNode, m_v: &[f64]) -> Result<f64> {
    let mut g = Eager;
    let m = Arc::new(crate::graph::row(m_v));
    Ok(ae_loss_in(&mut g, model, &node.tokens(), &m)?.map_or(0.0, |l| l[[0, 0]]))
}

pub fn loss_gen(model: &Model, question: &str, m_ret: &Mat, answer: &str) -> Result<f64> {
    let mut g = Eager;
    let m = Arc::new(m_ret.clone());
    let l = gen_loss_in(&mut g, model, &m, &tokenizer::encode(question), &tokenizer::encode(answer))?;
    Ok(l[[0, 0]])
}

/// One routed parent with its children (ascending id) and their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentScores {
    pub parent: NodeId,
    pub children: Vec<NodeId>,
    pub scores: Vec<f64>,
}

impl ParentScores {
    fn index(&self, c: NodeId) -> Result<usize> {
        self.children
            .iter()
            .position(|&x| x == c)
            .ok_or(Error::BadSupervision { parent: self.parent, child: c })
    }

    fn row(&self) -> Arc<Mat> {
        Arc::new(crate::graph::row(&self.scores))
    }
}

/// Σ over supervised parents of the routing cross-entropy.
pub fn loss_route(parents: &[ParentScores], sup: &RoutingSupervision, tau: f64) -> Result<f64> {
    let mut total = 0.0;
    for p in parents {
        if let Some(&gold) = sup.path.get(&p.parent) {
            let l = route_loss_in(&mut Eager, &p.row(), p.index(gold)?, tau);
            total += l[[0, 0]];
        }
    }
    Ok(total)
}

pub fn loss_sel(parents: &[ParentScores], sup: &RoutingSupervision, tau: f64) -> Result<f64> {
    let mut total = 0.0;
    for p in parents {
        if let Some(set) = sup.sets.get(&p.parent) {
            let idx: Vec<usize> = set.iter().map(|&c| p.index(c)).collect::<Result<_>>()?;
            total += sel_loss_in(&mut Eager, &p.row(), &idx, tau)?[[0, 0]];
        }
    }
    Ok(total)
}

/// Eager child scores for every supervised parent.
pub fn parent_scores(
    tree: &SemanticTree,
    memories: &BTreeMap<NodeId, Vec<f64>>,
    q: &[f64],
    params: &RoutingParams,
    sup: &RoutingSupervision,
) -> Result<Vec<ParentScores>> {
    sup.parents()
        .map(|p| {
            let children = tree.children(p).to_vec();
            let scores = children
                .iter()
                .map(|c| {
                    let m = memories.get(c).ok_or(Error::MissingMemory(*c))?;
                    Ok(crate::router::score(q, m, params))
                })
                .collect::<Result<_>>()?;
            Ok(ParentScores {
                parent: p,
                children,
                scores,
            })
        })
        .collect()
}

/// A scalar objective that can be evaluated on any graph.
pub trait LossFn {
    fn eval<G: Graph>(&self, g: &mut G, model: &Model, h: &Handles<G::T>) -> Result<G::T>;
}

/// Σ_v (L_LM + λ_ae L_AE) over every node with text.
#[derive(Debug, Clone)]
pub struct CorpusObjective<'a> {
    pub tree: &'a SemanticTree,
    pub weights: LossWeights,
}

impl LossFn for CorpusObjective<'_> {
    fn eval<G: Graph>(&self, g: &mut G, model: &Model, h: &Handles<G::T>) -> Result<G::T> {
        self.weights.check()?;
        let mems = memories_in(g, model, h, self.tree)?;
        let mut terms = Vec::new();
        for node in self.tree.nodes() {
            let tokens = node.tokens();
            let m = &mems[&node.id];
            if let Some(l) = lm_loss_in(g, model, &tokens, m)? {
                terms.push(l);
            }
            if self.weights.lambda_ae > 0.0 {
                if let Some(l) = ae_loss_in(g, model, &tokens, m)? {
                    terms.push(g.scale(&l, self.weights.lambda_ae));
                }
            }
        }
        Ok(sum_terms(g, terms).unwrap_or_else(|| one(g, 0.0)))
    }
}

pub fn total_corpus_loss(model: &Model, tree: &SemanticTree, weights: LossWeights) -> Result<f64> {
    let l = CorpusObjective { tree, weights }.eval(&mut Eager, model, &model.handles(&mut Eager, false))?;
    Ok(l[[0, 0]])
}

/// Unweighted components of the QA objective for one example.
#[derive(Debug, Clone)]
pub struct QaTerms<T> {
    pub gen: T,
    pub route: Option<T>,
    pub sel: Option<T>,
    pub ae: Option<T>,
    pub retrieved: Vec<NodeId>,
}

/// Builds every QA component. Hard top-k routing runs on detached values, so
/// the generation term carries no gradient into the routing projections.
pub fn qa_terms_in<G: Graph>(
    g: &mut G,
    model: &Model,
    h: &Handles<G::T>,
    tree: &SemanticTree,
    ex: &QaExample,
    tau: f64,
    enc: EncNodes,
) -> Result<QaTerms<G::T>> {
    let sup = RoutingSupervision::from_gold(tree, &ex.gold)?;
    let mems = memories_in(g, model, h, tree)?;
    let q_tokens = tokenizer::encode(&ex.question);
    let q = embed_query_in(g, model, h, &q_tokens)?;

    let detached: BTreeMap<NodeId, Vec<f64>> = mems.iter().map(|(&id, m)| (id, g.value(m).row(0).to_vec())).collect();
    let qv = QueryVector {
        q: g.value(&q).row(0).to_vec(),
        n_q: crate::router::query_prefix_len(q_tokens.len()),
        question: ex.question.clone(),
    };
    let trace = route(tree, &detached, &qv, &model.routing)?;
    let rows: Vec<G::T> = trace.retrieved.iter().map(|id| mems[id].clone()).collect();
    let m_ret = g.vstack(&rows);
    let gen = gen_loss_in(g, model, &m_ret, &q_tokens, &tokenizer::encode(&ex.answer))?;

    let mut route_terms = Vec::new();
    let mut sel_terms = Vec::new();
    for p in sup.parents() {
        let children = tree.children(p);
        let stack: Vec<G::T> = children.iter().map(|c| mems[c].clone()).collect();
        let stack = g.vstack(&stack);
        let s = scores_in(g, model.routing.d_h, h, &q, &stack);
        let pos = |c: NodeId| children.iter().position(|&x| x == c).expect("checked supervision");
        route_terms.push(route_loss_in(g, &s, pos(sup.path[&p]), tau));
        let set: Vec<usize> = sup.sets[&p].iter().map(|&c| pos(c)).collect();
        sel_terms.push(sel_loss_in(g, &s, &set, tau)?);
    }

    let mut ae_terms = Vec::new();
    for node in tree.nodes() {
        if enc == EncNodes::Leaves && !node.is_leaf() {
            continue;
        }
        if let Some(l) = ae_loss_in(g, model, &node.tokens(), &mems[&node.id])? {
            ae_terms.push(l);
        }
    }

    Ok(QaTerms {
        gen,
        route: sum_terms(g, route_terms),
        sel: sum_terms(g, sel_terms),
        ae: sum_terms(g, ae_terms),
        retrieved: trace.retrieved,
    })
}

fn weighted_qa<G: Graph>(g: &mut G, t: QaTerms<G::T>, w: &LossWeights) -> G::T {
    let mut acc = t.gen;
    for (term, lambda) in [(t.route, w.lambda_r), (t.sel, w.lambda_s), (t.ae, w.lambda_ae)] {
        if let Some(term) = term {
            if lambda != 0.0 {
                let s = g.scale(&term, lambda);
                acc = g.add(&acc, &s);
            }
        }
    }
    acc
}

/// Mean over examples of `L_gen + λ_r L_route + λ_s L_sel + λ_ae Σ_{V_enc} L_AE`.
#[derive(Debug, Clone)]
pub struct QaObjective<'a> {
    pub tree: &'a SemanticTree,
    pub examples: &'a [QaExample],
    pub weights: LossWeights,
    pub enc: EncNodes,
}

impl LossFn for QaObjective<'_> {
    fn eval<G: Graph>(&self, g: &mut G, model: &Model, h: &Handles<G::T>) -> Result<G::T> {
        self.weights.check()?;
        if self.examples.is_empty() {
            return Err(Error::EmptyInput("QA batch"));
        }
        let mut per = Vec::with_capacity(self.examples.len());
        for ex in self.examples {
            let t = qa_terms_in(g, model, h, self.tree, ex, self.weights.tau, self.enc)?;
            per.push(weighted_qa(g, t, &self.weights));
        }
        let n = per.len() as f64;
        let total = sum_terms(g, per).expect("non-empty batch");
        Ok(g.scale(&total, 1.0 / n))
    }
}

pub fn total_qa_loss(model: &Model, tree: &SemanticTree, batch: &[QaExample], weights: LossWeights, enc: EncNodes) -> Result<f64> {
    let obj = QaObjective {
        tree,
        examples: batch,
        weights,
        enc,
    };
    let l = obj.eval(&mut Eager, model, &model.handles(&mut Eager, false))?;
    Ok(l[[0, 0]])
}

/// Unweighted QA components as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaParts {
    pub gen: f64,
    pub route: f64,
    pub sel: f64,
    pub ae: f64,
}

impl QaParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.gen + w.lambda_r * self.route + w.lambda_s * self.sel + w.lambda_ae * self.ae
    }
}

pub fn qa_parts(model: &Model, tree: &SemanticTree, ex: &QaExample, tau: f64, enc: EncNodes) -> Result<QaParts> {
    let mut g = Eager;
    let h = model.handles(&mut g, false);
    let t = qa_terms_in(&mut g, model, &h, tree, ex, tau, enc)?;
    let v = |x: Option<Arc<Mat>>| x.map_or(0.0, |m| m[[0, 0]]);
    Ok(QaParts {
        gen: t.gen[[0, 0]],
        route: v(t.route),
        sel: v(t.sel),
        ae: v(t.ae),
    })
}

/// A single QA-side loss term, for isolated gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Lm,
    Ae,
    Gen,
    Route,
    Sel,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Lm, Term::Ae, Term::Gen, Term::Route, Term::Sel];
}

#[derive(Debug, Clone)]
pub struct TermObjective<'a> {
    pub tree: &'a SemanticTree,
    pub example: &'a QaExample,
    pub term: Term,
    pub tau: f64,
}

impl LossFn for TermObjective<'_> {
    fn eval<G: Graph>(&self, g: &mut G, model: &Model, h: &Handles<G::T>) -> Result<G::T> {
        match self.term {
            Term::Lm => {
                let w = LossWeights {
                    lambda_ae: 0.0,
                    ..Default::default()
                };
                CorpusObjective { tree: self.tree, weights: w }.eval(g, model, h)
            }
            Term::Ae => {
                let mems = memories_in(g, model, h, self.tree)?;
                let mut terms = Vec::new();
                for node in self.tree.nodes() {
                    if let Some(l) = ae_loss_in(g, model, &node.tokens(), &mems[&node.id])? {
                        terms.push(l);
                    }
                }
                Ok(sum_terms(g, terms).unwrap_or_else(|| one(g, 0.0)))
            }
            Term::Gen | Term::Route | Term::Sel => {
                let t = qa_terms_in(g, model, h, self.tree, self.example, self.tau, EncNodes::Leaves)?;
                let picked = match self.term {
                    Term::Gen => Some(t.gen),
                    Term::Route => t.route,
                    _ => t.sel,
                };
                Ok(picked.unwrap_or_else(|| one(g, 0.0)))
            }
        }
    }
}

/// Loss value and the gradient of every trainable tensor (zeros when unused).
pub fn analytic_gradients(model: &Model, loss: &impl LossFn) -> Result<(f64, Vec<(&'static str, Mat)>)> {
    let mut tape = Tape::new();
    let h = model.handles(&mut tape, true);
    let l = loss.eval(&mut tape, model, &h)?;
    let value = tape.scalar(&l);
    let grads = tape.backward(l);
    let out = h
        .named()
        .into_iter()
        .zip(model.trainable())
        .map(|((name, var), (_, m))| (name, grads.get_or_zeros(var, m)))
        .collect();
    Ok((value, out))
}

/// Names of trainable tensors that received a non-zero gradient.
pub fn touched_tensors(grads: &[(&'static str, Mat)]) -> Vec<&'static str> {
    grads.iter().filter(|(_, g)| g.iter().any(|&x| x != 0.0)).map(|(n, _)| *n).collect()
}

/// Gradient norms below this are compared in absolute terms: central
/// differences carry roundoff of order `ε·|L| / step`, about 2e-9 for a
/// loss near 100 at step 1e-5, so the smallest resolvable error is ~1e-8.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_FLOOR)` over the sampled coordinates.
    pub rel_error: f64,
    pub finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn get(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

fn eval_eager(model: &Model, loss: &impl LossFn) -> Result<f64> {
    let mut g = Eager;
    let h = model.handles(&mut g, false);
    Ok(loss.eval(&mut g, model, &h)?[[0, 0]])
}

/// Compares analytic gradients with central differences on up to
/// `coords_per_tensor` sampled entries of every trainable tensor.
pub fn grad_check(model: &Model, loss: &impl LossFn, step: f64, tol: f64, coords_per_tensor: usize, seed: u64) -> Result<GradCheckReport> {
    let (value, grads) = analytic_gradients(model, loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    let mut probe = model.clone();
    for (name, grad) in &grads {
        let len = grad.len();
        let coords: Vec<usize> = if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            let mut picked = BTreeSet::new();
            while picked.len() < coords_per_tensor {
                picked.insert(rng.random_range(0..len));
            }
            picked.into_iter().collect()
        };
        let cols = grad.ncols();
        let (mut diff, mut an, mut nu, mut finite) = (0.0, 0.0, 0.0, true);
        for &flat in &coords {
            let (r, c) = (flat / cols, flat % cols);
            let orig = tensor_mut(&mut probe, name)[[r, c]];
            tensor_mut(&mut probe, name)[[r, c]] = orig + step;
            let plus = eval_eager(&probe, loss)?;
            tensor_mut(&mut probe, name)[[r, c]] = orig - step;
            let minus = eval_eager(&probe, loss)?;
            tensor_mut(&mut probe, name)[[r, c]] = orig;
            let num = (plus - minus) / (2.0 * step);
            let a = grad[[r, c]];
            finite &= num.is_finite() && a.is_finite();
            diff += (a - num).powi(2);
            an += a * a;
            nu += num * num;
        }
        let (an, nu) = (an.sqrt(), nu.sqrt());
        let rel = diff.sqrt() / an.max(nu).max(GRAD_FLOOR);
        tensors.push(TensorCheck {
            name: name.to_string(),
            coords: coords.len(),
            analytic_norm: an,
            numeric_norm: nu,
            rel_error: if finite { rel } else { f64::INFINITY },
            finite,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss: value,
        passed: max_rel_error < tol && value.is_finite(),
        tensors,
        max_rel_error,
        tol,
    })
}

fn tensor_mut<'a>(model: &'a mut Model, name: &str) -> &'a mut Mat {
    model
        .trainable_mut()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, m)| m)
        .expect("known trainable tensor")
}

/// First-order update with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub lr: f64,
    pub beta: f64,
    velocity: BTreeMap<&'static str, Mat>,
}

impl Momentum {
    pub fn new(lr: f64, beta: f64) -> Self {
        Self {
            lr,
            beta,
            velocity: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, model: &mut Model, grads: &[(&'static str, Mat)]) {
        let grads: BTreeMap<&str, &Mat> = grads.iter().map(|(n, g)| (*n, g)).collect();
        for (name, param) in model.trainable_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self.velocity.entry(name).or_insert_with(|| Mat::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta * *v + g);
            param.zip_mut_with(v, |p, &v| *p -= self.lr * v);
        }
    }
}

impl Default for Momentum {
    fn default() -> Self {
        Self::new(1e-3, 0.9)
    }
}

/// One optimizer step on the lightweight parameters. Returns the pre-update loss.
pub fn train_step(model: &mut Model, opt: &mut Momentum, loss: &impl LossFn, step: usize) -> Result<f64> {
    let (value, grads) = analytic_gradients(model, loss)?;
    if !value.is_finite() {
        return Err(Error::Divergence { step, loss: value });
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        debug!("non-finite gradient in {name} at step {step}");
        return Err(Error::Divergence { step, loss: value });
    }
    opt.apply(model, &grads);
    Ok(value)
}

/// A routing task with planted memories: each query is the sum of the memories
/// on the path to its gold leaf plus noise, so the gold child at every parent
/// is recoverable once the projections align.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub tree: SemanticTree,
    pub memories: BTreeMap<NodeId, Vec<f64>>,
    pub queries: Vec<PlantedQuery>,
    pub weights: LossWeights,
}

#[derive(Debug, Clone)]
pub struct PlantedQuery {
    pub q: Vec<f64>,
    pub gold_leaf: NodeId,
    pub supervision: RoutingSupervision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingAccuracy {
    /// Fraction of supervised parents whose argmax child is `g(p)`.
    pub per_parent: f64,
    /// Fraction of gold nodes present in the hard-routed set.
    pub recall: f64,
}

impl PlantedTask {
    pub fn new(d: usize, branching: usize, height: usize, noise: f64, seed: u64) -> Result<Self> {
        let tree = complete_tree(branching, height);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let scale = 1.0 / (d as f64).sqrt();
        let mut memories = BTreeMap::new();
        for id in tree.ids() {
            memories.insert(id, gauss(d).into_iter().map(|x| x * scale).collect::<Vec<f64>>());
        }
        let mut queries = Vec::new();
        for leaf in tree.leaves().map(|n| n.id).collect::<Vec<_>>() {
            let mut q: Vec<f64> = gauss(d).into_iter().map(|x| x * noise * scale).collect();
            let mut path = tree.ancestors(leaf);
            path.push(leaf);
            for id in path.into_iter().filter(|&id| id != tree.root()) {
                for (qi, mi) in q.iter_mut().zip(&memories[&id]) {
                    *qi += mi;
                }
            }
            queries.push(PlantedQuery {
                q,
                gold_leaf: leaf,
                supervision: RoutingSupervision::from_gold(&tree, &[leaf])?,
            });
        }
        Ok(Self {
            tree,
            memories,
            queries,
            weights: LossWeights::default(),
        })
    }

    pub fn accuracy(&self, params: &RoutingParams) -> Result<RoutingAccuracy> {
        let (mut hit, mut total, mut found, mut gold) = (0usize, 0usize, 0usize, 0usize);
        for pq in &self.queries {
            for ps in parent_scores(&self.tree, &self.memories, &pq.q, params, &pq.supervision)? {
                let scored: Vec<(NodeId, f64)> = ps.children.iter().copied().zip(ps.scores.iter().copied()).collect();
                total += 1;
                if top_k(&scored, 1)[0].0 == pq.supervision.path[&ps.parent] {
                    hit += 1;
                }
            }
            let qv = QueryVector {
                q: pq.q.clone(),
                n_q: 1,
                question: String::new(),
            };
            let trace = route(&self.tree, &self.memories, &qv, params)?;
            let r: BTreeSet<NodeId> = trace.retrieved.into_iter().collect();
            let g = pq.supervision.gold_nodes();
            gold += g.len();
            found += g.intersection(&r).count();
        }
        Ok(RoutingAccuracy {
            per_parent: hit as f64 / total.max(1) as f64,
            recall: found as f64 / gold.max(1) as f64,
        })
    }
}

impl LossFn for PlantedTask {
    fn eval<G: Graph>(&self, g: &mut G, model: &Model, h: &Handles<G::T>) -> Result<G::T> {
        let w = &self.weights;
        let mut per = Vec::new();
        for pq in &self.queries {
            let q = g.constant(Arc::new(crate::graph::row(&pq.q)));
            for p in pq.supervision.parents() {
                let children = self.tree.children(p);
                let rows: Vec<&Vec<f64>> = children.iter().map(|c| &self.memories[c]).collect();
                let stack = g.constant(Arc::new(crate::graph::stack_rows(&rows, pq.q.len())));
                let s = scores_in(g, model.routing.d_h, h, &q, &stack);
                let pos = |c: NodeId| children.iter().position(|&x| x == c).expect("supervised child");
                let lr = route_loss_in(g, &s, pos(pq.supervision.path[&p]), w.tau);
                per.push(g.scale(&lr, w.lambda_r));
                let set: Vec<usize> = pq.supervision.sets[&p].iter().map(|&c| pos(c)).collect();
                let ls = sel_loss_in(g, &s, &set, w.tau)?;
                per.push(g.scale(&ls, w.lambda_s));
            }
        }
        let n = self.queries.len().max(1) as f64;
        let total = sum_terms(g, per).unwrap_or_else(|| one(g, 0.0));
        Ok(g.scale(&total, 1.0 / n))
    }
}

fn complete_tree(branching: usize, height: usize) -> SemanticTree {
    let mut nodes = vec![TreeNode {
        id: NodeId(0),
        title: None,
        text: String::new(),
        parent: None,
        children: vec![],
        depth: 0,
    }];
    let mut frontier = vec![0usize];
    for depth in 1..=height {
        let mut next = Vec::new();
        for &p in &frontier {
            for _ in 0..branching {
                let id = nodes.len();
                nodes.push(TreeNode {
                    id: NodeId(id as u64),
                    title: None,
                    text: format!("planted {id}"),
                    parent: Some(NodeId(p as u64)),
                    children: vec![],
                    depth,
                });
                nodes[p].children.push(NodeId(id as u64));
                next.push(id);
            }
        }
        frontier = next;
    }
    SemanticTree::from_nodes(nodes, NodeId(0), 64)
}

/// Loss curve entry emitted by training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
}

/// Runs `steps` optimizer steps and returns the loss curve.
pub fn train(model: &mut Model, opt: &mut Momentum, loss: &impl LossFn, steps: usize) -> Result<Vec<LogEntry>> {
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let l = train_step(model, opt, loss, step)?;
        debug!("step {step}: loss {l:.6}");
        log.push(LogEntry { step, loss: l });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Policy;
    use crate::backbone::next_token_ce;
    use crate::memory::build_memories;
    use crate::test_support::{tiny_model, uniform_tree};
    use crate::tokenizer::VOCAB_SIZE;
    use crate::tree::tests::node;

    fn uniform_model() -> Model {
        let mut m = tiny_model(Policy::Mean);
        for (name, w) in m.backbone.weights.frozen_mut() {
            if name == "tok_emb" {
                Arc::make_mut(w).fill(0.0);
            }
        }
        m
    }

    fn rand_vec(seed: u64, d: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Plain per-row log-softmax cross-entropy.
    fn ce_oracle(logits: &Mat, targets: &[u32]) -> f64 {
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let r = logits.row(i);
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - mx).exp()).sum();
            total += -(r[t as usize] - mx - z.ln());
        }
        total / targets.len() as f64
    }

    #[test]
    fn lm_loss_on_uniform_model_is_log_vocab() {
        let m = uniform_model();
        let l = loss_lm(&m, &node(0, None, &[], 0, "a"), &[0.0; 16]).unwrap();
        assert!((l - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
        assert_eq!(loss_lm(&m, &node(0, None, &[1], 0, ""), &[0.0; 16]).unwrap(), 0.0);
    }

    #[test]
    fn lm_and_ae_match_direct_oracles() {
        let m = tiny_model(Policy::Mean);
        let n = node(0, None, &[], 0, "hello there");
        let mv = rand_vec(4, 16);
        let toks = n.tokens();
        let mrow = crate::graph::row(&mv);

        let x = kernels::vstack(&[&mrow, &m.backbone.embed(&toks).unwrap()]);
        let h = m.backbone.forward(&x).unwrap();
        let logits = m.backbone.lm_logits(&h.slice(ndarray::s![0..toks.len(), ..]).to_owned());
        let lm = loss_lm(&m, &n, &mv).unwrap();
        assert!((lm - ce_oracle(&logits, &toks)).abs() < 1e-8);
        assert!((lm - next_token_ce(&logits, &toks).unwrap()).abs() < 1e-12);

        let p = m.backbone.embed(&RECONSTRUCTION_PROMPT).unwrap();
        let x = kernels::vstack(&[&mrow, &p, &m.backbone.embed(&toks).unwrap()]);
        let h = m.backbone.forward(&x).unwrap();
        let logits = m.backbone.lm_logits(&h.slice(ndarray::s![4..4 + toks.len(), ..]).to_owned());
        let ae = loss_ae(&m, &n, &mv).unwrap();
        assert!((ae - ce_oracle(&logits, &toks)).abs() < 1e-8);
        assert!((ae - lm).abs() > 1e-6);
    }

    #[test]
    fn gen_loss_layout_and_uniform_value() {
        let m = uniform_model();
        let mret = Mat::from_shape_fn((3, 16), |(i, j)| ((i + j) as f64).sin());
        assert!((loss_gen(&m, "q?", &mret, "a").unwrap() - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
        assert!(loss_gen(&m, "q?", &mret, "").is_err());

        let m = tiny_model(Policy::Mean);
        let (q, a) = (tokenizer::encode("why?"), tokenizer::encode("because"));
        let x = kernels::vstack(&[&mret, &m.backbone.embed(&q).unwrap(), &m.backbone.embed(&a).unwrap()]);
        let h = m.backbone.forward(&x).unwrap();
        let start = 3 + q.len() - 1;
        let logits = m.backbone.lm_logits(&h.slice(ndarray::s![start..start + a.len(), ..]).to_owned());
        assert!((loss_gen(&m, "why?", &mret, "because").unwrap() - ce_oracle(&logits, &a)).abs() < 1e-8);

        let mut spiked = Mat::zeros((1, VOCAB_SIZE));
        spiked[[0, a[0] as usize]] = 1e4;
        assert!(next_token_ce(&spiked, &a[..1]).unwrap() < 1e-12);
    }

    fn ps(scores: &[f64]) -> (ParentScores, SemanticTree) {
        let c: Vec<u64> = (1..=scores.len() as u64).collect();
        let mut nodes = vec![node(0, None, &c, 0, "")];
        nodes.extend(c.iter().map(|&i| node(i, Some(0), &[], 1, "x")));
        (
            ParentScores {
                parent: NodeId(0),
                children: c.into_iter().map(NodeId).collect(),
                scores: scores.to_vec(),
            },
            SemanticTree::from_nodes(nodes, NodeId(0), 64),
        )
    }

    fn sup_for(tree: &SemanticTree, gold: &[u64]) -> RoutingSupervision {
        RoutingSupervision::from_gold(tree, &gold.iter().map(|&g| NodeId(g)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn route_loss_examples() {
        let (p, t) = ps(&[0.3, 0.3]);
        let s = sup_for(&t, &[1]);
        assert!((loss_route(&[p], &s, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        let (p, t) = ps(&[1e4, 0.0, 0.0]);
        assert!(loss_route(&[p], &sup_for(&t, &[1]), 1.0).unwrap() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let scores: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let best = (0..5).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            let (p, t) = ps(&scores);
            let s = sup_for(&t, &[best as u64 + 1]);
            let tau = rng.random_range(0.2..3.0);
            let full = loss_route(&[p.clone()], &s, tau).unwrap();
            let half = loss_route(&[p], &s, tau / 2.0).unwrap();
            assert!(half <= full + 1e-12);
        }
    }

    #[test]
    fn bad_gold_child_is_rejected() {
        let (p, t) = ps(&[0.1, 0.2]);
        let mut s = sup_for(&t, &[1]);
        s.path.insert(NodeId(0), NodeId(7));
        assert!(matches!(loss_route(&[p], &s, 1.0), Err(Error::BadSupervision { .. })));
        assert!(s.check(&t).is_err());
    }

    #[test]
    fn sel_loss_examples() {
        let (p, t) = ps(&[0.4, -1.0, 2.0]);
        let all = sup_for(&t, &[1, 2, 3]);
        assert!(loss_sel(&[p.clone()], &all, 1.0).unwrap().abs() < 1e-12);
        let single = sup_for(&t, &[2]);
        let a = loss_sel(&[p.clone()], &single, 0.7).unwrap();
        let b = loss_route(&[p.clone()], &single, 0.7).unwrap();
        assert!((a - b).abs() < 1e-12);

        let two = sup_for(&t, &[1, 3]);
        let pi = routing_distribution(&p.scores, 1.3);
        let oracle = -(pi[0] + pi[2]).ln();
        assert!((loss_sel(&[p], &two, 1.3).unwrap() - oracle).abs() < 1e-12);
        assert!(sel_loss_in(&mut Eager, &Arc::new(Mat::zeros((1, 2))), &[], 1.0).is_err());
    }

    #[test]
    fn sel_gradient_vanishes_when_every_child_is_gold() {
        let mut tape = Tape::new();
        let s = tape.param(Arc::new(crate::graph::row(&[0.3, -0.2, 1.1])));
        let l = sel_loss_in(&mut tape, &s, &[0, 1, 2], 1.0).unwrap();
        let g = tape.backward(l);
        assert!(g.get(s).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn routing_distribution_is_a_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.random_range(1..9);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let pi = routing_distribution(&s, rng.random_range(0.1..4.0));
            assert!(pi.iter().all(|&p| p >= 0.0));
            assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn supervision_propagates_to_ancestors() {
        let tree = uniform_tree(2, 3);
        // Leaves are 7..=14; 8 has ancestors 3, 1, 0.
        let s = RoutingSupervision::from_gold(&tree, &[NodeId(12), NodeId(8)]).unwrap();
        assert_eq!(s.path[&NodeId(0)], NodeId(1));
        assert_eq!(s.path[&NodeId(3)], NodeId(8));
        assert_eq!(s.sets[&NodeId(0)], [NodeId(1), NodeId(2)].into_iter().collect());
        assert_eq!(s.parents().count(), 5);
    }

    fn qa_setup() -> (SemanticTree, QaExample) {
        let tree = uniform_tree(2, 2);
        let ex = QaExample {
            question: "leaf 4 holds what".into(),
            answer: "fact".into(),
            gold: vec![NodeId(4)],
        };
        (tree, ex)
    }

    #[test]
    fn qa_totals_are_weighted_sums_of_parts() {
        let m = tiny_model(Policy::Gat);
        let (tree, ex) = qa_setup();
        let parts = qa_parts(&m, &tree, &ex, 1.0, EncNodes::Leaves).unwrap();
        let zero = LossWeights {
            lambda_ae: 0.0,
            lambda_r: 0.0,
            lambda_s: 0.0,
            tau: 1.0,
        };
        let batch = std::slice::from_ref(&ex);
        assert_eq!(total_qa_loss(&m, &tree, batch, zero, EncNodes::Leaves).unwrap(), parts.gen);
        let w = LossWeights::default();
        let total = total_qa_loss(&m, &tree, batch, w, EncNodes::Leaves).unwrap();
        assert!((total - parts.total(&w)).abs() < 1e-10);

        let double = LossWeights { lambda_r: 2.0, ..w };
        let t2 = total_qa_loss(&m, &tree, batch, double, EncNodes::Leaves).unwrap();
        assert!(((t2 - total) - parts.route).abs() < 1e-10);

        let all = qa_parts(&m, &tree, &ex, 1.0, EncNodes::All).unwrap();
        assert!(all.ae > parts.ae);
        let neg = LossWeights { lambda_r: -1.0, ..w };
        assert!(total_qa_loss(&m, &tree, batch, neg, EncNodes::Leaves).is_err());
    }

    #[test]
    fn corpus_loss_sums_node_terms() {
        let m = tiny_model(Policy::Mean);
        let tree = uniform_tree(2, 1);
        let (mems, _) = build_memories(&tree, &m).unwrap();
        let w = LossWeights::default();
        let mut oracle = 0.0;
        for n in tree.nodes() {
            let mv: Vec<f64> = mems[&n.id].iter().map(|&x| x as f64).collect();
            oracle += loss_lm(&m, n, &mv).unwrap() + w.lambda_ae * loss_ae(&m, n, &mv).unwrap();
        }
        // Cached memories are f32-rounded; the differentiable build is not.
        assert!((total_corpus_loss(&m, &tree, w).unwrap() - oracle).abs() < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences_for_every_policy_and_term() {
        let (tree, ex) = qa_setup();
        for policy in Policy::ALL {
            let m = tiny_model(policy);
            for term in Term::ALL {
                let obj = TermObjective {
                    tree: &tree,
                    example: &ex,
                    term,
                    tau: 1.0,
                };
                let r = grad_check(&m, &obj, 1e-5, 1e-4, 3, 7).unwrap();
                assert!(r.passed, "{policy} {term:?}: {:#?}", r.tensors);
            }
        }
    }

    #[test]
    fn generation_loss_sends_no_gradient_to_routing_projections() {
        let (tree, ex) = qa_setup();
        let m = tiny_model(Policy::CrossAttn);
        let (_, grads) = analytic_gradients(
            &m,
            &TermObjective {
                tree: &tree,
                example: &ex,
                term: Term::Gen,
                tau: 1.0,
            },
        )
        .unwrap();
        let touched = touched_tensors(&grads);
        assert!(!touched.contains(&"route.w_q") && !touched.contains(&"route.w_k"));
        assert!(touched.contains(&"e_write"));
        let (_, grads) = analytic_gradients(
            &m,
            &TermObjective {
                tree: &tree,
                example: &ex,
                term: Term::Route,
                tau: 1.0,
            },
        )
        .unwrap();
        assert!(touched_tensors(&grads).contains(&"route.w_q"));
    }

    #[test]
    fn train_step_leaves_backbone_untouched_and_zero_lr_is_identity() {
        let (tree, ex) = qa_setup();
        let batch = [ex];
        let obj = QaObjective {
            tree: &tree,
            examples: &batch,
            weights: LossWeights::default(),
            enc: EncNodes::Leaves,
        };
        let mut m = tiny_model(Policy::ParentToken);
        let before = m.clone();
        train_step(&mut m, &mut Momentum::new(0.0, 0.9), &obj, 0).unwrap();
        assert_eq!(m, before);
        train_step(&mut m, &mut Momentum::new(1e-2, 0.9), &obj, 0).unwrap();
        assert_eq!(m.backbone.weights.frozen(), before.backbone.weights.frozen());
        assert_ne!(m.backbone.weights.e_write, before.backbone.weights.e_write);
    }

    struct NanLoss;
    impl LossFn for NanLoss {
        fn eval<G: Graph>(&self, g: &mut G, _: &Model, h: &Handles<G::T>) -> Result<G::T> {
            let s = g.sum_all(&h.e_write);
            let nan = one(g, f64::NAN);
            Ok(g.add(&s, &nan))
        }
    }

    #[test]
    fn divergence_aborts() {
        let mut m = tiny_model(Policy::Mean);
        let err = train_step(&mut m, &mut Momentum::default(), &NanLoss, 3).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 3, .. }));
    }

    #[test]
    fn named_handles_follow_trainable_order() {
        let m = tiny_model(Policy::Mean);
        let h = m.handles(&mut Eager, false);
        let a: Vec<&str> = h.named().into_iter().map(|(n, _)| n).collect();
        let b: Vec<&str> = m.trainable().into_iter().map(|(n, _)| n).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn planted_routing_is_learned() {
        let mut m = tiny_model(Policy::Mean);
        let task = PlantedTask::new(16, 3, 3, 0.3, 11).unwrap();
        let start = task.accuracy(&m.routing).unwrap();
        let mut opt = Momentum::new(0.05, 0.9);
        let log = train(&mut m, &mut opt, &task, 200).unwrap();
        let end = task.accuracy(&m.routing).unwrap();
        assert!(start.per_parent < 1.0);
        assert_eq!(end.per_parent, 1.0, "{start:?} -> {end:?}");
        assert!(end.recall >= 0.8);
        let upticks = log.windows(2).filter(|w| w[1].loss > w[0].loss * 1.0001).count();
        assert!(upticks <= 10, "{upticks} upticks");
        assert!(log.last().unwrap().loss < log[0].loss);
    }
}
