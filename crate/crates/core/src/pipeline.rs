//! End-to-end operations shared by the CLI and the Python bindings.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::Policy;
use crate::bench::{self, BenchQuestion, CostReport, MeasureOptions};
use crate::error::{Error, Result};
use crate::gmm::{induce_hierarchy, Induced, InduceParams};
use crate::ingest::{self, HeadingDoc, IngestConfig, DEFAULT_MAX_LEAF_TOKENS};
use crate::memory::{build_all, leaf_memory, MemoryCache};
use crate::model::{Model, ModelConfig};
use crate::router::{self, embed_query, route, stack_retrieved, RoutingTrace};
use crate::tokenizer::{self, prefix_within};
use crate::trainer::{self, CorpusObjective, EncNodes, LogEntry, LossWeights, Momentum, QaExample, QaObjective};
use crate::tree::{validate_tree, JsonNode, NodeId, SemanticTree, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Markdown,
    Json,
    /// Unstructured paragraphs.
    Text,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(Self::Markdown),
            "json" => Ok(Self::Json),
            "text" | "txt" => Ok(Self::Text),
            other => Err(Error::Config(format!("unknown input format {other:?} (expected md, json or text)"))),
        }
    }
}

pub fn build_tree(input: &str, format: InputFormat, max_leaf_tokens: usize) -> Result<SemanticTree> {
    let config = IngestConfig::with_max_leaf_tokens(max_leaf_tokens);
    match format {
        InputFormat::Markdown => ingest::build_tree_from_headings(HeadingDoc::Markdown(input), &config),
        InputFormat::Text => ingest::segment_unstructured_with(input, &config),
        InputFormat::Json => {
            let mut tree = SemanticTree::from_json(input, max_leaf_tokens)?;
            ingest::split_oversized_leaves(&mut tree);
            validate_tree(&tree).into_result()?;
            Ok(tree)
        }
    }
}

/// Reads a tree file. The leaf limit is not stored on disk, so it is taken
/// as the larger of the default and the longest leaf.
pub fn read_tree(json: &str) -> Result<SemanticTree> {
    fn longest_leaf(n: &JsonNode) -> usize {
        if n.children.is_empty() {
            tokenizer::token_len(&n.text)
        } else {
            n.children.iter().map(longest_leaf).max().unwrap_or(0)
        }
    }
    let root: JsonNode = serde_json::from_str(json)?;
    let limit = longest_leaf(&root).max(DEFAULT_MAX_LEAF_TOKENS);
    let tree = SemanticTree::from_json_node(&root, limit)?;
    validate_tree(&tree).into_result()?;
    Ok(tree)
}

/// `SOURCE_DATE_EPOCH` when set, otherwise the current time.
pub fn build_timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()) {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// How to obtain a model: a checkpoint, or fresh initialization from a seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSpec {
    pub seed: u64,
    pub policy: Option<Policy>,
    /// Context window for fresh models; ignored for checkpoints.
    pub ctx: Option<usize>,
    pub weights: Option<PathBuf>,
}

impl ModelSpec {
    pub fn load(&self) -> Result<Model> {
        let model = match &self.weights {
            Some(path) => Model::load(path)?,
            None => {
                let mut cfg = ModelConfig::with_seed(self.seed);
                if let Some(ctx) = self.ctx {
                    cfg.backbone.ctx = ctx;
                }
                Model::new(&cfg)?
            }
        };
        Ok(match self.policy {
            Some(p) => model.with_policy(p),
            None => model,
        })
    }

    /// Fills unset fields from a cache's metadata.
    pub fn for_cache(mut self, cache: &MemoryCache, seed_given: bool) -> Result<Self> {
        if !seed_given && self.weights.is_none() {
            self.seed = cache.meta.seed;
        }
        if self.policy.is_none() {
            self.policy = Some(cache.meta.policy.parse()?);
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AskParams {
    pub k: usize,
    pub max_depth: Option<usize>,
    pub budget: usize,
    pub leaves_only: bool,
    pub max_new_tokens: usize,
}

impl Default for AskParams {
    fn default() -> Self {
        Self {
            k: 2,
            max_depth: None,
            budget: 64,
            leaves_only: false,
            max_new_tokens: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub question: String,
    pub retrieved: Vec<NodeId>,
    pub n_ret: usize,
    pub tokens: Vec<u32>,
    pub text: String,
    #[serde(skip)]
    pub trace: RoutingTrace,
}

pub fn routing_params(model: &Model, p: &AskParams) -> Result<router::RoutingParams> {
    let mut params = model.routing.clone();
    params.k = p.k;
    params.max_depth = p.max_depth;
    params.budget = p.budget;
    params.check()?;
    Ok(params)
}

pub fn ask(model: &Model, tree: &SemanticTree, cache: &MemoryCache, question: &str, p: &AskParams) -> Result<Answer> {
    cache.verify(tree, model)?;
    let params = routing_params(model, p)?;
    let qv = embed_query(model, question)?;
    let trace = route(tree, cache, &qv, &params)?;
    let m_ret = stack_retrieved(tree, &trace, cache, p.leaves_only)?;
    let tokens = router::generate(model, &m_ret, question, p.max_new_tokens)?;
    Ok(Answer {
        question: question.to_string(),
        retrieved: trace.retrieved.clone(),
        n_ret: m_ret.nrows(),
        text: tokenizer::decode(&tokens),
        tokens,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Corpus,
    Qa,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corpus" => Ok(Self::Corpus),
            "qa" => Ok(Self::Qa),
            other => Err(Error::Config(format!("unknown training mode {other:?} (expected corpus or qa)"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Corpus => "corpus",
            Self::Qa => "qa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub mode: TrainMode,
    pub steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// Picks synthetic QA examples.
    pub seed: u64,
    pub max_examples: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            mode: TrainMode::Corpus,
            steps: 10,
            lr: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            max_examples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub params: TrainParams,
    pub examples: usize,
    pub losses: Vec<LogEntry>,
}

const SYNTH_QUESTION_TOKENS: usize = 48;
const SYNTH_ANSWER_TOKENS: usize = 24;

/// Self-supervised QA pairs: the first half of a leaf's words asks for the
/// rest, with that leaf as the gold node.
pub fn synth_qa(tree: &SemanticTree, max_examples: usize, seed: u64) -> Vec<QaExample> {
    let mut leaves: Vec<&TreeNode> = tree.leaves().collect();
    leaves.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    leaves
        .into_iter()
        .filter_map(|leaf| {
            let words: Vec<&str> = leaf.text.split_whitespace().collect();
            if words.len() < 2 {
                return None;
            }
            let cut = words.len().div_ceil(2);
            let question = words[..cut].join(" ");
            let answer = words[cut..].join(" ");
            Some(QaExample {
                question: prefix_within(&question, SYNTH_QUESTION_TOKENS).to_string(),
                answer: prefix_within(&answer, SYNTH_ANSWER_TOKENS).trim_end().to_string(),
                gold: vec![leaf.id],
            })
        })
        .filter(|ex| !ex.answer.is_empty())
        .take(max_examples)
        .collect()
}

/// Trains the lightweight tensors in place. `examples` defaults to
/// [`synth_qa`] in QA mode.
pub fn train(model: &mut Model, tree: &SemanticTree, examples: Option<Vec<QaExample>>, p: &TrainParams) -> Result<TrainLog> {
    p.weights.check()?;
    let mut opt = Momentum::new(p.lr, 0.9);
    let (losses, n) = match p.mode {
        TrainMode::Corpus => {
            let obj = CorpusObjective {
                tree,
                weights: p.weights,
            };
            (trainer::train(model, &mut opt, &obj, p.steps)?, tree.len())
        }
        TrainMode::Qa => {
            let examples = examples.unwrap_or_else(|| synth_qa(tree, p.max_examples, p.seed));
            if examples.is_empty() {
                return Err(Error::EmptyInput("QA examples"));
            }
            let obj = QaObjective {
                tree,
                examples: &examples,
                weights: p.weights,
                enc: EncNodes::Leaves,
            };
            (trainer::train(model, &mut opt, &obj, p.steps)?, examples.len())
        }
    };
    Ok(TrainLog {
        params: *p,
        examples: n,
        losses,
    })
}

/// One JSON value per non-empty line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(s: &str) -> Result<Vec<T>> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ChunkLine {
    Text(String),
    Object { text: String },
}

/// Lines are either JSON strings or objects with a `text` field.
pub fn read_chunks(s: &str) -> Result<Vec<String>> {
    Ok(read_jsonl::<ChunkLine>(s)?
        .into_iter()
        .map(|c| match c {
            ChunkLine::Text(t) | ChunkLine::Object { text: t } => t,
        })
        .collect())
}

/// Chunk memories, hierarchy induction and a cache that is rebuilt from the
/// induced tree and checked against the clustering's own memories.
pub fn gmm_tree(model: &Model, chunks: &[String], params: &InduceParams, built_at: u64) -> Result<(Induced, MemoryCache)> {
    let mut items = Vec::new();
    for text in chunks {
        for piece in ingest::chunk_text(text.trim(), params.max_leaf_tokens) {
            let node = TreeNode {
                id: NodeId(items.len() as u64),
                title: None,
                text: piece.to_string(),
                parent: None,
                children: Vec::new(),
                depth: 0,
            };
            let m = leaf_memory(model, &node)?;
            items.push((node.text, m.into_iter().map(|x| x as f32 as f64).collect()));
        }
    }
    let induced = induce_hierarchy(&items, &model.agg, params)?;
    let cache = build_all(&induced.tree, model, built_at)?;
    for (id, m) in &induced.memories {
        let built = cache.get(*id).ok_or(Error::MissingMemory(*id))?;
        if built.len() != m.len() || built.iter().zip(m).any(|(&a, &b)| a as f64 != b) {
            return Err(Error::Shape(format!("memory of induced node {id} differs from the rebuilt cache")));
        }
    }
    Ok((induced, cache))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: ModelConfig,
    pub routing: AskParams,
    pub options: MeasureOptions,
    /// What the TTFT timers include.
    pub timing_boundary: String,
    pub reports: Vec<CostReport>,
}

pub const TIMING_BOUNDARY: &str =
    "starts after question tokenization; includes query embedding, routing, stacking retrieved memories and the prefill; ends when first-token logits are available";

pub fn bench(
    model: &Model,
    tree: &SemanticTree,
    cache: &MemoryCache,
    questions: &[BenchQuestion],
    p: &AskParams,
    opts: &MeasureOptions,
) -> Result<BenchReport> {
    cache.verify(tree, model)?;
    let params = routing_params(model, p)?;
    let opts = MeasureOptions {
        leaves_only: p.leaves_only,
        ..*opts
    };
    let reports = bench::measure(model, tree, cache, questions, &params, &opts)?;
    Ok(BenchReport {
        model: model.config(),
        routing: *p,
        options: opts,
        timing_boundary: TIMING_BOUNDARY.to_string(),
        reports,
    })
}
