//! Bottom-up memory construction and the on-disk memory cache.
//!
//! Leaves read out `[e_write; E_v; e_read]`; internal nodes read out
//! `[e_write; Agg(children); E_v; e_read]`, or return `Agg(children)` directly
//! when their own text is empty.
//!
//! Cache layout: magic `H2MC`, version `u32`, `d: u32`, `count: u64`, then
//! `count` records of `(node id: u64, d × f32)`, all little-endian, followed
//! by a JSON metadata footer running to the end of the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_in, parent_queries_in, ChildStack};
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph, Mat};
use crate::model::{Handles, Model};
use crate::tree::{post_order, NodeId, SemanticTree, TreeNode};

const MAGIC: &[u8; 4] = b"H2MC";
const VERSION: u32 = 1;

/// Node memory source for routing and generation.
pub trait MemoryLookup {
    fn memory(&self, id: NodeId) -> Option<Vec<f64>>;
}

impl MemoryLookup for BTreeMap<NodeId, Vec<f64>> {
    fn memory(&self, id: NodeId) -> Option<Vec<f64>> {
        self.get(&id).cloned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub d: usize,
    pub policy: String,
    pub backbone_hash: String,
    pub tree_hash: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub built_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryCache {
    pub entries: BTreeMap<NodeId, Vec<f32>>,
    pub meta: CacheMeta,
}

impl MemoryLookup for MemoryCache {
    fn memory(&self, id: NodeId) -> Option<Vec<f64>> {
        self.entries.get(&id).map(|v| v.iter().map(|&x| x as f64).collect())
    }
}

impl MemoryCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    /// Rejects caches built for another tree, model or policy.
    pub fn verify(&self, tree: &SemanticTree, model: &Model) -> Result<()> {
        let checks = [
            ("tree", &self.meta.tree_hash, tree.content_hash()),
            ("backbone", &self.meta.backbone_hash, model.memory_hash()),
            ("policy", &self.meta.policy, model.agg.policy.to_string()),
        ];
        for (what, found, expected) in checks {
            if *found != expected {
                return Err(Error::HashMismatch {
                    what,
                    found: found.clone(),
                    expected,
                });
            }
        }
        if self.meta.d != model.d() {
            return Err(Error::HashMismatch {
                what: "dimension",
                found: self.meta.d.to_string(),
                expected: model.d().to_string(),
            });
        }
        for id in tree.ids() {
            if !self.entries.contains_key(&id) {
                return Err(Error::MissingMemory(id));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.meta.d;
        let mut out = Vec::with_capacity(20 + self.entries.len() * (8 + 4 * d));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&id.0.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&serde_json::to_vec(&self.meta).expect("meta serializes"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("cache magic".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("not a memory cache (bad magic)".into()));
        }
        if bytes.len() < 20 {
            return Err(Error::Truncated("cache header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported cache version {version}")));
        }
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let record = 8 + 4 * d as u64;
        let body_end = count
            .checked_mul(record)
            .and_then(|b| b.checked_add(20))
            .ok_or_else(|| Error::Corrupt("record count overflows".into()))?;
        if body_end > bytes.len() as u64 {
            return Err(Error::Truncated(format!(
                "{count} records of {d} floats need {body_end} bytes, file has {}",
                bytes.len()
            )));
        }
        let mut entries = BTreeMap::new();
        for rec in bytes[20..body_end as usize].chunks_exact(record as usize) {
            let id = NodeId(u64::from_le_bytes(rec[..8].try_into().unwrap()));
            let v: Vec<f32> = rec[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if entries.insert(id, v).is_some() {
                return Err(Error::Corrupt(format!("duplicate record for node {id}")));
            }
        }
        let footer = &bytes[body_end as usize..];
        let meta: CacheMeta = serde_json::from_slice(footer).map_err(|e| {
            if e.is_eof() {
                Error::Truncated("cache metadata footer".into())
            } else {
                Error::Corrupt(format!("cache metadata: {e}"))
            }
        })?;
        if meta.d != d {
            return Err(Error::Corrupt(format!("footer says d = {}, header says {d}", meta.d)));
        }
        Ok(Self { entries, meta })
    }
}

pub fn save_cache(cache: &MemoryCache, path: &Path) -> Result<()> {
    fs::write(path, cache.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_cache(path: &Path) -> Result<MemoryCache> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MemoryCache::from_bytes(&bytes)
}

/// Loads a cache and checks it against the current tree and model. A stale
/// cache is returned with a warning rather than an error; callers decide
/// whether to rebuild.
pub fn load_cache_checked(path: &Path, tree: &SemanticTree, model: &Model) -> Result<(MemoryCache, Option<Error>)> {
    let cache = load_cache(path)?;
    match cache.verify(tree, model) {
        Ok(()) => Ok((cache, None)),
        Err(e @ (Error::HashMismatch { .. } | Error::MissingMemory(_))) => {
            log::warn!("{}: {e}", path.display());
            Ok((cache, Some(e)))
        }
        Err(e) => Err(e),
    }
}

fn embed_const<G: Graph>(g: &mut G, model: &Model, tokens: &[u32]) -> Result<G::T> {
    Ok(g.constant(Arc::new(model.backbone.embed(tokens)?)))
}

/// Readout of `[e_write; E_v; e_read]`.
pub fn leaf_memory_in<G: Graph>(g: &mut G, model: &Model, h: &Handles<G::T>, tokens: &[u32]) -> Result<G::T> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("leaf text"));
    }
    let e = embed_const(g, model, tokens)?;
    let seq = g.vstack(&[h.e_write.clone(), e, h.e_read.clone()]);
    model.backbone.readout_in(g, &seq)
}

/// `(m_v, used_backbone)` for an internal node given its stacked child memories.
pub fn internal_memory_in<G: Graph>(
    g: &mut G,
    model: &Model,
    h: &Handles<G::T>,
    tokens: &[u32],
    children: &G::T,
) -> Result<(G::T, bool)> {
    let queries = if model.agg.policy.uses_queries() {
        Some(parent_queries_in(g, &model.backbone, &model.agg, &h.agg, tokens)?)
    } else {
        None
    };
    let agg = aggregate_in(g, &model.agg, &h.agg, children, queries.as_ref())?;
    if tokens.is_empty() {
        return Ok((agg, false));
    }
    let e = embed_const(g, model, tokens)?;
    let seq = g.vstack(&[h.e_write.clone(), agg, e, h.e_read.clone()]);
    Ok((model.backbone.readout_in(g, &seq)?, true))
}

pub fn leaf_memory(model: &Model, node: &TreeNode) -> Result<Vec<f64>> {
    let mut g = Eager;
    let h = model.handles(&mut g, false);
    Ok(leaf_memory_in(&mut g, model, &h, &node.tokens())?.row(0).to_vec())
}

pub fn internal_memory(model: &Model, node: &TreeNode, children: &ChildStack) -> Result<Vec<f64>> {
    let mut g = Eager;
    let h = model.handles(&mut g, false);
    let m = Arc::new(children.matrix().clone());
    Ok(internal_memory_in(&mut g, model, &h, &node.tokens(), &m)?.0.row(0).to_vec())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildStats {
    /// Backbone passes over node sequences (parent-query passes excluded).
    pub node_passes: usize,
    pub query_passes: usize,
    pub bypassed: Vec<NodeId>,
    pub order: Vec<NodeId>,
}

/// Memories for every node, in post-order, without metadata.
pub fn build_memories(tree: &SemanticTree, model: &Model) -> Result<(BTreeMap<NodeId, Vec<f32>>, BuildStats)> {
    let order = post_order(tree)?;
    build_memories_in_order(tree, model, &order)
}

/// Builds in the given order; fails with [`Error::OrderingViolation`] as soon
/// as a node is reached before one of its children.
pub fn build_memories_in_order(
    tree: &SemanticTree,
    model: &Model,
    order: &[NodeId],
) -> Result<(BTreeMap<NodeId, Vec<f32>>, BuildStats)> {
    let mut g = Eager;
    let h = model.handles(&mut g, false);
    let d = model.d();
    let mut entries: BTreeMap<NodeId, Vec<f32>> = BTreeMap::new();
    let mut stats = BuildStats::default();
    for &id in order {
        let node = tree.node(id).ok_or(Error::MissingMemory(id))?;
        let tokens = node.tokens();
        let out = if node.is_leaf() {
            stats.node_passes += 1;
            leaf_memory_in(&mut g, model, &h, &tokens)?
        } else {
            let mut rows = Mat::zeros((node.children.len(), d));
            for (i, c) in node.children.iter().enumerate() {
                let m = entries.get(c).ok_or(Error::OrderingViolation { parent: id, child: *c })?;
                for (j, &x) in m.iter().enumerate() {
                    rows[[i, j]] = x as f64;
                }
            }
            let (out, used) = internal_memory_in(&mut g, model, &h, &tokens, &Arc::new(rows))?;
            if used {
                stats.node_passes += 1;
                if model.agg.policy.uses_queries() {
                    stats.query_passes += 1;
                }
            } else {
                stats.bypassed.push(id);
            }
            out
        };
        let v: Vec<f32> = out.row(0).iter().map(|&x| x as f32).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape(format!("memory of node {id} is not finite")));
        }
        entries.insert(id, v);
        stats.order.push(id);
    }
    Ok((entries, stats))
}

pub fn cache_meta(tree: &SemanticTree, model: &Model, built_at: u64) -> CacheMeta {
    CacheMeta {
        d: model.d(),
        policy: model.agg.policy.to_string(),
        backbone_hash: model.memory_hash(),
        tree_hash: tree.content_hash(),
        seed: model.backbone.config.seed,
        built_at,
    }
}

/// Offline pass over the whole tree. `built_at` is recorded verbatim.
pub fn build_all(tree: &SemanticTree, model: &Model, built_at: u64) -> Result<MemoryCache> {
    let (entries, _) = build_memories(tree, model)?;
    Ok(MemoryCache {
        entries,
        meta: cache_meta(tree, model, built_at),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Policy;
    use crate::tree::tests::node;
    use crate::test_support::tiny_model;

    fn five() -> SemanticTree {
        SemanticTree::from_nodes(
            vec![
                node(0, None, &[1, 4], 0, "root heading"),
                node(1, Some(0), &[2, 3], 1, ""),
                node(2, Some(1), &[], 2, "alpha leaf"),
                node(3, Some(1), &[], 2, "beta leaf"),
                node(4, Some(0), &[], 1, "gamma leaf"),
            ],
            NodeId(0),
            64,
        )
    }

    #[test]
    fn leaf_memory_is_deterministic_and_text_sensitive() {
        let m = tiny_model(Policy::Mean);
        let a = node(0, None, &[], 0, "some text");
        let b = node(0, None, &[], 0, "some texT");
        assert_eq!(leaf_memory(&m, &a).unwrap(), leaf_memory(&m, &a).unwrap());
        assert_ne!(leaf_memory(&m, &a).unwrap(), leaf_memory(&m, &b).unwrap());
        assert!(leaf_memory(&m, &node(0, None, &[], 0, "")).is_err());
    }

    #[test]
    fn leaf_overflow_is_reported() {
        let m = tiny_model(Policy::Mean);
        let long = node(0, None, &[], 0, &"z".repeat(63));
        assert!(matches!(leaf_memory(&m, &long), Err(Error::ContextOverflow { len: 65, .. })));
        assert!(leaf_memory(&m, &node(0, None, &[], 0, &"z".repeat(62))).is_ok());
    }

    #[test]
    fn empty_internal_node_bypasses_the_backbone() {
        let m = tiny_model(Policy::Mean);
        let stack = ChildStack::from_rows(&[vec![1.0; 16], vec![3.0; 16]]).unwrap();
        let out = internal_memory(&m, &node(0, None, &[1, 2], 0, ""), &stack).unwrap();
        assert_eq!(out, vec![2.0; 16]);
        for policy in [Policy::Mean, Policy::SelfAttn, Policy::CrossAttn] {
            let m = tiny_model(policy);
            let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.4).collect();
            let one = ChildStack::from_rows(&[v.clone()]).unwrap();
            let out = internal_memory(&m, &node(0, None, &[1], 0, ""), &one).unwrap();
            assert!(out.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12), "{policy}");
        }
    }

    #[test]
    fn internal_memory_depends_on_children() {
        let m = tiny_model(Policy::Mean);
        let n = node(0, None, &[1, 2], 0, "heading");
        let a = ChildStack::from_rows(&[vec![0.5; 16], vec![-0.5; 16]]).unwrap();
        let mut rows = vec![vec![0.5; 16], vec![-0.5; 16]];
        rows[1][3] += 0.25;
        let b = ChildStack::from_rows(&rows).unwrap();
        assert_ne!(internal_memory(&m, &n, &a).unwrap(), internal_memory(&m, &n, &b).unwrap());
        assert_ne!(internal_memory(&m, &n, &a).unwrap(), leaf_memory(&m, &n).unwrap());
    }

    #[test]
    fn build_all_counts_and_bypass() {
        let m = tiny_model(Policy::Mean);
        let t = five();
        let (entries, stats) = build_memories(&t, &m).unwrap();
        assert_eq!(entries.len(), 5);
        assert_eq!(stats.bypassed, vec![NodeId(1)]);
        assert_eq!(stats.node_passes, 4);
        let c2: Vec<f64> = entries[&NodeId(2)].iter().map(|&x| x as f64).collect();
        let c3: Vec<f64> = entries[&NodeId(3)].iter().map(|&x| x as f64).collect();
        let mean: Vec<f32> = c2.iter().zip(&c3).map(|(a, b)| ((a + b) / 2.0) as f32).collect();
        assert_eq!(entries[&NodeId(1)], mean);
        assert_eq!(build_all(&t, &m, 0).unwrap(), build_all(&t, &m, 0).unwrap());
    }

    #[test]
    fn wrong_order_trips_the_ordering_check() {
        let m = tiny_model(Policy::Mean);
        let t = five();
        let order = [NodeId(2), NodeId(1), NodeId(3), NodeId(4), NodeId(0)];
        assert!(matches!(
            build_memories_in_order(&t, &m, &order),
            Err(Error::OrderingViolation { parent: NodeId(1), child: NodeId(3) })
        ));
    }

    #[test]
    fn cache_round_trip_and_failure_kinds() {
        let m = tiny_model(Policy::Gat);
        let t = five();
        let cache = build_all(&t, &m, 1234).unwrap();
        let bytes = cache.to_bytes();
        let back = MemoryCache::from_bytes(&bytes).unwrap();
        assert_eq!(back, cache);
        for (id, v) in &cache.entries {
            let w = &back.entries[id];
            assert!(v.iter().zip(w).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(matches!(MemoryCache::from_bytes(&bytes[..100]), Err(Error::Truncated(_))));
        assert!(matches!(MemoryCache::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MemoryCache::from_bytes(&bad), Err(Error::Corrupt(_))));
        back.verify(&t, &m).unwrap();
    }

    #[test]
    fn cache_from_another_seed_is_flagged() {
        let t = five();
        let cache = build_all(&t, &tiny_model(Policy::Mean), 0).unwrap();
        let mut cfg = tiny_model(Policy::Mean).config();
        cfg.backbone.seed = 2;
        let other = Model::new(&cfg).unwrap();
        assert!(matches!(
            cache.verify(&t, &other),
            Err(Error::HashMismatch { what: "backbone", .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.h2mc");
        save_cache(&cache, &path).unwrap();
        let (_, warning) = load_cache_checked(&path, &t, &other).unwrap();
        assert!(warning.is_some());
        let (_, ok) = load_cache_checked(&path, &t, &tiny_model(Policy::Mean)).unwrap();
        assert!(ok.is_none());
    }
}
