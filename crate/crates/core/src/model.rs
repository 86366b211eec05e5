//! The full parameter bundle (frozen backbone plus the lightweight trainable
//! modules) and its checkpoint format.
//!
//! Checkpoint layout: magic `H2MW`, version `u32`, header length `u64`, a JSON
//! header (config, scalars, tensor names/shapes/offsets), then every tensor
//! as little-endian `f32` in header order.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{AggHandles, AggParams, Policy};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat};
use crate::router::RoutingParams;

const MAGIC: &[u8; 4] = b"H2MW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub policy: Policy,
    pub agg_d_h: usize,
    pub route_d_h: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            policy: Policy::Mean,
            agg_d_h: 32,
            route_d_h: 32,
        }
    }
}

impl ModelConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut c = Self::default();
        c.backbone.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub agg: AggParams,
    pub routing: RoutingParams,
}

/// Graph handles for every trainable tensor.
#[derive(Debug, Clone)]
pub struct Handles<T> {
    pub e_write: T,
    pub e_read: T,
    pub w_q: T,
    pub w_k: T,
    pub agg: AggHandles<T>,
}

impl<T: Clone> Handles<T> {
    /// Handles under the same names and order as [`Model::trainable`].
    pub fn named(&self) -> Vec<(&'static str, T)> {
        let a = &self.agg;
        vec![
            ("e_write", self.e_write.clone()),
            ("e_read", self.e_read.clone()),
            ("route.w_q", self.w_q.clone()),
            ("route.w_k", self.w_k.clone()),
            ("agg.w_q", a.w_q.clone()),
            ("agg.w_k", a.w_k.clone()),
            ("agg.w_v", a.w_v.clone()),
            ("agg.a_p", a.a_p.clone()),
            ("agg.a_c", a.a_c.clone()),
            ("agg.w_child", a.w_child.clone()),
            ("agg.w_parent", a.w_parent.clone()),
            ("agg.m_par", a.m_par.clone()),
            ("agg.fallback_query", a.fallback_query.clone()),
        ]
    }
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(config.backbone.clone())?;
        let d = config.backbone.d;
        let seed = config.backbone.seed;
        let agg = AggParams::init(config.policy, d, config.agg_d_h, seed.wrapping_add(0x0a66));
        let routing = RoutingParams::init(d, config.route_d_h, seed.wrapping_add(0x5c0e));
        Ok(Self {
            backbone,
            agg,
            routing,
        })
    }

    pub fn d(&self) -> usize {
        self.backbone.config.d
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.config.clone(),
            policy: self.agg.policy,
            agg_d_h: self.agg.d_h,
            route_d_h: self.routing.d_h,
        }
    }

    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.agg.policy = policy;
        self
    }

    pub fn trainable(&self) -> Vec<(&'static str, &Mat)> {
        let mut out = vec![
            ("e_write", &self.backbone.weights.e_write),
            ("e_read", &self.backbone.weights.e_read),
            ("route.w_q", &self.routing.w_q),
            ("route.w_k", &self.routing.w_k),
        ];
        out.extend(self.agg.tensors());
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        let mut out = vec![
            ("e_write", &mut self.backbone.weights.e_write),
            ("e_read", &mut self.backbone.weights.e_read),
            ("route.w_q", &mut self.routing.w_q),
            ("route.w_k", &mut self.routing.w_k),
        ];
        out.extend(self.agg.tensors_mut());
        out
    }

    pub fn handles<G: Graph>(&self, g: &mut G, track: bool) -> Handles<G::T> {
        let mut mk = |m: &Mat| {
            let m = Arc::new(m.clone());
            if track {
                g.param(m)
            } else {
                g.constant(m)
            }
        };
        let e_write = mk(&self.backbone.weights.e_write);
        let e_read = mk(&self.backbone.weights.e_read);
        let w_q = mk(&self.routing.w_q);
        let w_k = mk(&self.routing.w_k);
        let agg = self.agg.handles(g, track);
        Handles {
            e_write,
            e_read,
            w_q,
            w_k,
            agg,
        }
    }

    /// Identifies everything node memories depend on: backbone weights,
    /// write/read slots and the aggregation policy with its parameters.
    pub fn memory_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.backbone.config).expect("config serializes"));
        h.update(self.agg.policy.as_str().as_bytes());
        h.update(format!("{}|{}|{}|{}", self.agg.d_h, self.agg.n_queries, self.agg.tau_gat, self.agg.leaky_slope));
        let mut feed = |m: &Mat| {
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        };
        for (_, m) in self.backbone.weights.frozen() {
            feed(m);
        }
        feed(&self.backbone.weights.e_write);
        feed(&self.backbone.weights.e_read);
        for (_, m) in self.agg.tensors() {
            feed(m);
        }
        hex::encode(h.finalize())
    }

    fn all_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = self.backbone.weights.frozen();
        out.extend(self.trainable().into_iter().map(|(n, m)| (n.to_string(), m)));
        out
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let tensors = self.all_tensors();
        let mut offset = 0usize;
        let entries: Vec<TensorEntry> = tensors
            .iter()
            .map(|(name, m)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: [m.nrows(), m.ncols()],
                    offset,
                };
                offset += m.len();
                e
            })
            .collect();
        let header = Header {
            config: self.config(),
            seed: self.backbone.config.seed,
            agg: AggScalars {
                n_queries: self.agg.n_queries,
                tau_gat: self.agg.tau_gat,
                leaky_slope: self.agg.leaky_slope,
            },
            routing: RouteScalars {
                k: self.routing.k,
                max_depth: self.routing.max_depth,
                budget: self.routing.budget,
                tau: self.routing.tau,
            },
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &tensors {
            for v in m.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated("checkpoint header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("not a weight checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated("checkpoint header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let data = &bytes[body..];

        let mut model = Model::new(&header.config)?;
        model.agg.n_queries = header.agg.n_queries;
        model.agg.tau_gat = header.agg.tau_gat;
        model.agg.leaky_slope = header.agg.leaky_slope;
        model.routing.k = header.routing.k;
        model.routing.max_depth = header.routing.max_depth;
        model.routing.budget = header.routing.budget;
        model.routing.tau = header.routing.tau;

        let read = |entry: &TensorEntry, target: &mut Mat| -> Result<()> {
            let want = (target.nrows(), target.ncols());
            if (entry.shape[0], entry.shape[1]) != want {
                return Err(Error::Corrupt(format!(
                    "tensor {} has shape {:?}, expected {want:?}",
                    entry.name, entry.shape
                )));
            }
            let start = entry.offset * 4;
            let end = start + target.len() * 4;
            if end > data.len() {
                return Err(Error::Truncated(format!("tensor {}", entry.name)));
            }
            for (v, chunk) in target.iter_mut().zip(data[start..end].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            Ok(())
        };
        let find = |name: &str| {
            header
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks tensor {name}")))
        };
        for (name, slot) in model.backbone.weights.frozen_mut() {
            let entry = find(&name)?;
            read(entry, Arc::make_mut(slot))?;
        }
        for (name, slot) in model.trainable_mut() {
            let entry = find(name)?;
            read(entry, slot)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AggScalars {
    n_queries: usize,
    tau_gat: f64,
    leaky_slope: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RouteScalars {
    k: usize,
    max_depth: Option<usize>,
    budget: usize,
    tau: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    agg: AggScalars,
    routing: RouteScalars,
    tensors: Vec<TensorEntry>,
}
