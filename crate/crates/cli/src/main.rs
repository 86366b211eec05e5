use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use h2mt_core::bench::{BenchQuestion, MeasureOptions};
use h2mt_core::gmm::InduceParams;
use h2mt_core::memory::{load_cache, save_cache};
use h2mt_core::pipeline::{self, AskParams, InputFormat, ModelSpec, TrainMode, TrainParams};
use h2mt_core::trainer::{LossWeights, QaExample};
use h2mt_core::{MemoryCache, Model, Policy, SemanticTree};

#[derive(Parser)]
#[command(name = "h2mt", version, about = "Hierarchical memory trees over long documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Seed for fresh weights. Defaults to the cache's seed where a cache is read.
    #[arg(long)]
    seed: Option<u64>,
    /// Context window of fresh weights.
    #[arg(long)]
    ctx: Option<usize>,
    /// Checkpoint written by `train --weights-out`.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl ModelArgs {
    fn spec(&self, policy: Option<Policy>) -> ModelSpec {
        ModelSpec {
            seed: self.seed.unwrap_or(0),
            policy,
            ctx: self.ctx,
            weights: self.weights.clone(),
        }
    }

    fn for_cache(&self, cache: &MemoryCache) -> Result<Model> {
        Ok(self.spec(None).for_cache(cache, self.seed.is_some())?.load()?)
    }
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Defaults to the tree height.
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long, default_value_t = 64)]
    budget: usize,
    /// Feed only retrieved leaves to generation (not the default retrieved set).
    #[arg(long)]
    leaves_only: bool,
}

impl RouteArgs {
    fn params(&self, max_new_tokens: usize) -> AskParams {
        AskParams {
            k: self.k,
            max_depth: self.max_depth,
            budget: self.budget,
            leaves_only: self.leaves_only,
            max_new_tokens,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a document into a semantic tree.
    BuildTree {
        #[arg(long)]
        input: PathBuf,
        /// md, json or text
        #[arg(long, default_value = "md")]
        format: String,
        #[arg(long, default_value_t = 256)]
        max_leaf_tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the memory cache of a tree.
    Memorize {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long, default_value = "mean")]
        policy: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Route a question and generate an answer from the retrieved memories.
    Ask {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        question: String,
        #[command(flatten)]
        route: RouteArgs,
        #[arg(long, default_value_t = 32)]
        max_new_tokens: usize,
        /// Write the routing trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train the write/read slots, aggregation and routing parameters.
    Train {
        #[arg(long)]
        tree: PathBuf,
        /// corpus or qa
        #[arg(long, default_value = "corpus")]
        mode: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_r: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_s: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda_ae: f64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value = "mean")]
        policy: String,
        /// JSON lines of {"question", "answer", "gold": [ids]}; synthesized from leaves when absent.
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_examples: usize,
        /// Loss log destination; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        weights_out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Induce a tree over unstructured chunks by recursive mixture clustering.
    GmmTree {
        /// JSON lines, each a string or {"text": ...}.
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        cache_out: PathBuf,
        #[arg(long)]
        tree_out: PathBuf,
        #[arg(long, default_value_t = 4)]
        k_g: usize,
        #[arg(long, default_value_t = 4)]
        max_depth: usize,
        #[arg(long, default_value_t = 0.9)]
        min_compression: f64,
        #[arg(long, default_value_t = 256)]
        max_leaf_tokens: usize,
        #[arg(long, default_value = "mean")]
        policy: String,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Compare routed and flat time to first token.
    Bench {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// JSON lines of {"question", "answer"?}.
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        route: RouteArgs,
        #[arg(long, default_value_t = 15)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        flat_repeats: usize,
        /// Report the flat path's cost model without running it.
        #[arg(long)]
        model_only_flat: bool,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_tree(path: &Path) -> Result<SemanticTree> {
    pipeline::read_tree(&read(path)?).with_context(|| format!("loading tree {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildTree {
            input,
            format,
            max_leaf_tokens,
            out,
        } => {
            let format: InputFormat = format.parse()?;
            let tree = pipeline::build_tree(&read(&input)?, format, max_leaf_tokens)?;
            write(&out, tree.to_json())?;
            log::info!("{} nodes, height {}", tree.len(), tree.height());
        }
        Command::Memorize {
            tree,
            policy,
            out,
            model,
        } => {
            let tree = read_tree(&tree)?;
            let model = model.spec(Some(policy.parse()?)).load()?;
            let cache = h2mt_core::build_all(&tree, &model, pipeline::build_timestamp())?;
            save_cache(&cache, &out)?;
            log::info!("{} memories written", cache.len());
        }
        Command::Ask {
            tree,
            cache,
            question,
            route,
            max_new_tokens,
            trace,
            model,
        } => {
            let tree = read_tree(&tree)?;
            let cache = load_cache(&cache)?;
            let model = model.for_cache(&cache)?;
            let answer = pipeline::ask(&model, &tree, &cache, &question, &route.params(max_new_tokens))?;
            if let Some(path) = trace {
                write(&path, serde_json::to_string_pretty(&answer.trace)?)?;
            }
            println!("{}", serde_json::to_string_pretty(&answer)?);
        }
        Command::Train {
            tree,
            mode,
            steps,
            lr,
            lambda_r,
            lambda_s,
            lambda_ae,
            tau,
            policy,
            questions,
            max_examples,
            log: log_path,
            weights_out,
            model,
        } => {
            let tree = read_tree(&tree)?;
            let mut m = model.spec(Some(policy.parse()?)).load()?;
            let examples = match &questions {
                Some(p) => Some(pipeline::read_jsonl::<QaExample>(&read(p)?)?),
                None => None,
            };
            let params = TrainParams {
                mode: mode.parse::<TrainMode>()?,
                steps,
                lr,
                weights: LossWeights {
                    lambda_ae,
                    lambda_r,
                    lambda_s,
                    tau,
                },
                seed: model.seed.unwrap_or(0),
                max_examples,
            };
            let log = pipeline::train(&mut m, &tree, examples, &params)?;
            let json = serde_json::to_string_pretty(&log)?;
            match log_path {
                Some(p) => write(&p, json)?,
                None => println!("{json}"),
            }
            if let Some(p) = weights_out {
                m.save(&p)?;
            }
        }
        Command::GmmTree {
            chunks,
            cache_out,
            tree_out,
            k_g,
            max_depth,
            min_compression,
            max_leaf_tokens,
            policy,
            model,
        } => {
            let chunks = pipeline::read_chunks(&read(&chunks)?)?;
            let m = model.spec(Some(policy.parse()?)).load()?;
            let params = InduceParams {
                k_g,
                max_depth,
                min_compression,
                seed: model.seed.unwrap_or(0),
                max_leaf_tokens,
                ..InduceParams::default()
            };
            let (induced, cache) = pipeline::gmm_tree(&m, &chunks, &params, pipeline::build_timestamp())?;
            write(&tree_out, induced.tree.to_json())?;
            save_cache(&cache, &cache_out)?;
            log::info!("{} nodes over {} rounds", induced.tree.len(), induced.levels.len());
        }
        Command::Bench {
            tree,
            cache,
            questions,
            out,
            route,
            repeats,
            flat_repeats,
            model_only_flat,
            max_new_tokens,
            model,
        } => {
            let tree = read_tree(&tree)?;
            let cache = load_cache(&cache)?;
            let m = model.for_cache(&cache)?;
            let questions = pipeline::read_jsonl::<BenchQuestion>(&read(&questions)?)?;
            let opts = MeasureOptions {
                repeats,
                flat_repeats,
                model_only_flat,
                max_new_tokens,
                ..MeasureOptions::default()
            };
            let report = pipeline::bench(&m, &tree, &cache, &questions, &route.params(max_new_tokens), &opts)?;
            write(&out, serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
