//! Small causal transformer: pre-norm attention + SiLU MLP blocks with
//! learned absolute positions and a tied LM head.
//!
//! Inserted vectors (write/read slots, aggregated child memories, retrieved
//! memories) are plain rows of the input embedding matrix, so they take the
//! positional slots they occupy in the sequence.

use std::sync::Arc;

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eager, Graph, Mat};
use crate::tokenizer::VOCAB_SIZE;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub ctx: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 2,
            mlp_hidden: 256,
            vocab: VOCAB_SIZE,
            ctx: 512,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d = {} is not divisible by heads = {}", self.d, self.heads)));
        }
        if self.layers == 0 || self.ctx < 4 || self.vocab < VOCAB_SIZE || self.mlp_hidden == 0 {
            return Err(Error::Config(format!("degenerate backbone config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Arc<Mat>,
    pub wk: Arc<Mat>,
    pub wv: Arc<Mat>,
    pub wo: Arc<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Arc<Mat>,
    pub heads: Vec<HeadWeights>,
    pub mlp_norm: Arc<Mat>,
    pub w_up: Arc<Mat>,
    pub w_down: Arc<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub tok_emb: Arc<Mat>,
    pub pos_emb: Arc<Mat>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Arc<Mat>,
    pub e_write: Mat,
    pub e_read: Mat,
}

/// Draws matrices whose entries are exactly representable in f32, so the
/// checkpoint format reproduces them bit for bit.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let dist = Normal::new(0.0, std).expect("finite std");
        Mat::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng) as f32 as f64)
    }
}

impl BackboneWeights {
    pub fn init(cfg: &BackboneConfig) -> Self {
        let mut init = Init::new(cfg.seed);
        let d = cfg.d;
        let dh = cfg.head_dim();
        let tok_emb = init.normal(cfg.vocab, d, 1.0);
        let pos_emb = init.normal(cfg.ctx, d, 0.3);
        let proj = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                attn_norm: Arc::new(Mat::ones((1, d))),
                heads: (0..cfg.heads)
                    .map(|_| HeadWeights {
                        wq: Arc::new(init.normal(d, dh, proj)),
                        wk: Arc::new(init.normal(d, dh, proj)),
                        wv: Arc::new(init.normal(d, dh, proj)),
                        wo: Arc::new(init.normal(dh, d, 1.0 / (d as f64).sqrt())),
                    })
                    .collect(),
                mlp_norm: Arc::new(Mat::ones((1, d))),
                w_up: Arc::new(init.normal(d, cfg.mlp_hidden, proj)),
                w_down: Arc::new(init.normal(cfg.mlp_hidden, d, 1.0 / (cfg.mlp_hidden as f64).sqrt())),
            })
            .collect();
        let e_write = init.normal(1, d, 1.0);
        let e_read = init.normal(1, d, 1.0);
        Self {
            tok_emb: Arc::new(tok_emb),
            pos_emb: Arc::new(pos_emb),
            layers,
            final_norm: Arc::new(Mat::ones((1, d))),
            e_write,
            e_read,
        }
    }

    /// Frozen tensors in checkpoint order.
    pub fn frozen(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("tok_emb".to_string(), &*self.tok_emb), ("pos_emb".to_string(), &*self.pos_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &*layer.attn_norm));
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layers.{l}.heads.{h}.wq"), &*head.wq));
                out.push((format!("layers.{l}.heads.{h}.wk"), &*head.wk));
                out.push((format!("layers.{l}.heads.{h}.wv"), &*head.wv));
                out.push((format!("layers.{l}.heads.{h}.wo"), &*head.wo));
            }
            out.push((format!("layers.{l}.mlp_norm"), &*layer.mlp_norm));
            out.push((format!("layers.{l}.w_up"), &*layer.w_up));
            out.push((format!("layers.{l}.w_down"), &*layer.w_down));
        }
        out.push(("final_norm".to_string(), &*self.final_norm));
        out
    }

    pub(crate) fn frozen_mut(&mut self) -> Vec<(String, &mut Arc<Mat>)> {
        let mut out = vec![("tok_emb".to_string(), &mut self.tok_emb), ("pos_emb".to_string(), &mut self.pos_emb)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &mut layer.attn_norm));
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layers.{l}.heads.{h}.wq"), &mut head.wq));
                out.push((format!("layers.{l}.heads.{h}.wk"), &mut head.wk));
                out.push((format!("layers.{l}.heads.{h}.wv"), &mut head.wv));
                out.push((format!("layers.{l}.heads.{h}.wo"), &mut head.wo));
            }
            out.push((format!("layers.{l}.mlp_norm"), &mut layer.mlp_norm));
            out.push((format!("layers.{l}.w_up"), &mut layer.w_up));
            out.push((format!("layers.{l}.w_down"), &mut layer.w_down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub weights: BackboneWeights,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let weights = BackboneWeights::init(&config);
        Ok(Self { config, weights })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Token embedding rows, `n × d`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Mat> {
        let d = self.config.d;
        let mut out = Mat::zeros((tokens.len(), d));
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= self.config.vocab {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab,
                });
            }
            out.row_mut(i).assign(&self.weights.tok_emb.row(t));
        }
        Ok(out)
    }

    /// Final-layer hidden states (after the output norm) for an `n × d` input.
    pub fn forward_in<G: Graph>(&self, g: &mut G, x: &G::T) -> Result<G::T> {
        let n = g.value(x).nrows();
        if n > self.config.ctx {
            return Err(Error::ContextOverflow {
                len: n,
                ctx: self.config.ctx,
            });
        }
        if g.value(x).ncols() != self.config.d {
            return Err(Error::Shape(format!(
                "input has {} columns, backbone width is {}",
                g.value(x).ncols(),
                self.config.d
            )));
        }
        let w = &self.weights;
        let pos = g.constant(Arc::new(w.pos_emb.slice(s![..n, ..]).to_owned()));
        let mut h = g.add(x, &pos);
        let inv = 1.0 / (self.config.head_dim() as f64).sqrt();
        for layer in &w.layers {
            let gain = g.constant(layer.attn_norm.clone());
            let a = g.rms_norm(&h, NORM_EPS);
            let a = g.mul_row(&a, &gain);
            let mut attn: Option<G::T> = None;
            for head in &layer.heads {
                let (wq, wk, wv, wo) = (
                    g.constant(head.wq.clone()),
                    g.constant(head.wk.clone()),
                    g.constant(head.wv.clone()),
                    g.constant(head.wo.clone()),
                );
                let q = g.matmul(&a, &wq);
                let k = g.matmul(&a, &wk);
                let v = g.matmul(&a, &wv);
                let scores = g.matmul_nt(&q, &k);
                let scores = g.scale(&scores, inv);
                let p = g.softmax_rows(&scores, true);
                let o = g.matmul(&p, &v);
                let o = g.matmul(&o, &wo);
                attn = Some(match attn {
                    None => o,
                    Some(acc) => g.add(&acc, &o),
                });
            }
            h = g.add(&h, &attn.expect("at least one head"));
            let gain = g.constant(layer.mlp_norm.clone());
            let m = g.rms_norm(&h, NORM_EPS);
            let m = g.mul_row(&m, &gain);
            let (up, down) = (g.constant(layer.w_up.clone()), g.constant(layer.w_down.clone()));
            let u = g.matmul(&m, &up);
            let u = g.silu(&u);
            let u = g.matmul(&u, &down);
            h = g.add(&h, &u);
        }
        let gain = g.constant(w.final_norm.clone());
        let out = g.rms_norm(&h, NORM_EPS);
        Ok(g.mul_row(&out, &gain))
    }

    /// Hidden state at the last position (the read slot).
    pub fn readout_in<G: Graph>(&self, g: &mut G, x: &G::T) -> Result<G::T> {
        let n = g.value(x).nrows();
        if n == 0 {
            return Err(Error::EmptyInput("readout sequence"));
        }
        let h = self.forward_in(g, x)?;
        Ok(g.slice_rows(&h, n - 1, 1))
    }

    pub fn lm_logits_in<G: Graph>(&self, g: &mut G, hidden: &G::T) -> G::T {
        let emb = g.constant(self.weights.tok_emb.clone());
        g.matmul_nt(hidden, &emb)
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let out = self.forward_in(&mut Eager, &Arc::new(x.clone()))?;
        Ok(Arc::unwrap_or_clone(out))
    }

    pub fn readout(&self, x: &Mat) -> Result<Vec<f64>> {
        let out = self.readout_in(&mut Eager, &Arc::new(x.clone()))?;
        Ok(out.row(0).to_vec())
    }

    pub fn lm_logits(&self, hidden: &Mat) -> Mat {
        Arc::unwrap_or_clone(self.lm_logits_in(&mut Eager, &Arc::new(hidden.clone())))
    }
}

/// Mean over rows of `-log softmax(logits)[target]`, as a `1 × 1` node.
pub fn next_token_ce_in<G: Graph>(g: &mut G, logits: &G::T, targets: &[u32]) -> Result<G::T> {
    let (rows, vocab) = g.value(logits).dim();
    if rows != targets.len() {
        return Err(Error::Shape(format!("{rows} logit rows for {} targets", targets.len())));
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput("targets"));
    }
    let mut idx = Vec::with_capacity(rows);
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { token: t as usize, vocab });
        }
        idx.push((i, t as usize));
    }
    let ls = g.log_softmax_rows(logits);
    let picked = g.gather(&ls, &idx);
    let total = g.sum_all(&picked);
    Ok(g.scale(&total, -1.0 / rows as f64))
}

pub fn next_token_ce(logits: &Mat, targets: &[u32]) -> Result<f64> {
    let l = next_token_ce_in(&mut Eager, &Arc::new(logits.clone()), targets)?;
    Ok(l[[0, 0]])
}
