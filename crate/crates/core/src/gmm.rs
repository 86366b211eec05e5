//! Diagonal Gaussian mixtures fitted by EM, and recursive clustering of chunk
//! memories into a tree for documents without usable structure.

use std::collections::BTreeMap;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggParams, ChildStack};
use crate::error::{Error, Result};
use crate::graph::{kernels, stack_rows, Mat};
use crate::tree::{validate_tree, NodeId, SemanticTree, TreeNode};

pub const VAR_FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub n_components: usize,
    pub means: Mat,
    /// Diagonal variances, each at least [`VAR_FLOOR`].
    pub variances: Mat,
    pub weights: Vec<f64>,
    /// Mean per-point log-likelihood before each M-step and after the last.
    pub ll_history: Vec<f64>,
    pub degenerate: bool,
}

impl GmmModel {
    /// `n × K` log of `w_k N(x | μ_k, σ²_k)`.
    fn log_joint(&self, x: &Mat) -> Mat {
        let (n, d) = x.dim();
        let mut out = Mat::zeros((n, self.n_components));
        for k in 0..self.n_components {
            let lw = self.weights[k].ln();
            let mut norm = 0.0;
            for j in 0..d {
                norm += self.variances[[k, j]].ln() + LN_2PI;
            }
            for i in 0..n {
                let mut q = 0.0;
                for j in 0..d {
                    let z = x[[i, j]] - self.means[[k, j]];
                    q += z * z / self.variances[[k, j]];
                }
                out[[i, k]] = lw - 0.5 * (norm + q);
            }
        }
        out
    }

    fn e_step(&self, x: &Mat) -> (Mat, f64) {
        let lj = self.log_joint(x);
        let mut resp = Mat::zeros(lj.raw_dim());
        let mut ll = 0.0;
        for (i, row) in lj.rows().into_iter().enumerate() {
            let lse = kernels::logsumexp(&row.to_owned().insert_axis(ndarray::Axis(0)));
            ll += lse;
            for k in 0..row.len() {
                resp[[i, k]] = (row[k] - lse).exp();
            }
        }
        (resp, ll / x.nrows() as f64)
    }

    pub fn responsibilities(&self, x: &Mat) -> Mat {
        self.e_step(x).0
    }

    pub fn log_likelihood(&self, x: &Mat) -> f64 {
        self.e_step(x).1
    }

    /// Hard assignment: argmax responsibility, lowest component on ties.
    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        self.log_joint(x)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for k in 1..r.len() {
                    if r[k] > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    fn m_step(&mut self, x: &Mat, resp: &Mat) {
        let (n, d) = x.dim();
        for k in 0..self.n_components {
            let nk: f64 = resp.column(k).sum();
            self.weights[k] = nk / n as f64;
            if nk <= 0.0 {
                continue;
            }
            for j in 0..d {
                let mu = (0..n).map(|i| resp[[i, k]] * x[[i, j]]).sum::<f64>() / nk;
                let var = (0..n).map(|i| resp[[i, k]] * (x[[i, j]] - mu).powi(2)).sum::<f64>() / nk;
                self.means[[k, j]] = mu;
                self.variances[[k, j]] = var.max(VAR_FLOOR);
            }
        }
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding: each new centre is drawn with probability proportional
/// to the squared distance from the nearest existing one.
fn seed_centres(x: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.nrows();
    let mut centres = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(centres[0]))).collect();
    while centres.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total <= 0.0 {
            (0..n).find(|i| !centres.contains(i)).unwrap_or(0)
        } else {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &dv) in dist.iter().enumerate() {
                if u < dv {
                    pick = i;
                    break;
                }
                u -= dv;
            }
            pick
        };
        centres.push(next);
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    centres
}

/// k-means refinement of the seeded centres; returns hard labels.
fn lloyd(x: &Mat, mut centres: Mat, iters: usize) -> Vec<usize> {
    let (n, d) = x.dim();
    let k = centres.nrows();
    let nearest = |c: &Mat, i: usize| {
        (0..k)
            .map(|j| (j, sq_dist(x.row(i), c.row(j))))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0
    };
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(&centres, i)).collect();
    for _ in 0..iters {
        let mut sums = Mat::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut r = sums.row_mut(l);
            r += &x.row(i);
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mut r = centres.row_mut(j);
                r.assign(&(&sums.row(j) / counts[j] as f64));
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(&centres, i)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

pub fn fit_gmm(x: &Mat, k: usize, max_iters: usize, seed: u64) -> Result<GmmModel> {
    let (n, d) = x.dim();
    if k == 0 {
        return Err(Error::Config("a mixture needs at least one component".into()));
    }
    if n < k {
        return Err(Error::Config(format!("{n} points cannot support {k} components")));
    }
    let mean = x.mean_axis(ndarray::Axis(0)).expect("n >= 1");
    let global_var: Vec<f64> = (0..d)
        .map(|j| (x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64).max(VAR_FLOOR))
        .collect();

    let identical = (1..n).all(|i| x.row(i) == x.row(0));
    if identical {
        warn!("all {n} points are identical; fitting a single component");
        let mut m = GmmModel {
            n_components: 1,
            means: x.slice(ndarray::s![0..1, ..]).to_owned(),
            variances: Mat::from_elem((1, d), VAR_FLOOR),
            weights: vec![1.0],
            ll_history: vec![],
            degenerate: true,
        };
        m.ll_history.push(m.log_likelihood(x));
        return Ok(m);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = seed_centres(x, k, &mut rng);
    let labels = lloyd(x, stack_rows(&centres.iter().map(|&c| x.row(c).to_vec()).collect::<Vec<_>>(), d), 50);
    let mut model = GmmModel {
        n_components: k,
        means: Mat::zeros((k, d)),
        variances: Mat::from_shape_fn((k, d), |(_, j)| global_var[j]),
        weights: vec![1.0 / k as f64; k],
        ll_history: vec![],
        degenerate: false,
    };
    let hard = Mat::from_shape_fn((n, k), |(i, c)| if labels[i] == c { 1.0 } else { 0.0 });
    model.m_step(x, &hard);
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..max_iters {
        let (resp, ll) = model.e_step(x);
        model.ll_history.push(ll);
        if ll - prev < TOL {
            return Ok(model);
        }
        prev = ll;
        model.m_step(x, &resp);
    }
    model.ll_history.push(model.log_likelihood(x));
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InduceParams {
    pub k_g: usize,
    /// Maximum height of the induced tree, root included.
    pub max_depth: usize,
    /// Stop once `nodes_next / nodes_current` exceeds this.
    pub min_compression: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub max_leaf_tokens: usize,
}

impl Default for InduceParams {
    fn default() -> Self {
        Self {
            k_g: 4,
            max_depth: 4,
            min_compression: 0.9,
            max_iters: 200,
            seed: 0,
            max_leaf_tokens: crate::ingest::DEFAULT_MAX_LEAF_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Induced {
    pub tree: SemanticTree,
    /// Memory of every node; parents hold `Agg(children)` rounded to `f32`.
    pub memories: BTreeMap<NodeId, Vec<f64>>,
    /// Node ids per clustering round, leaves first.
    pub levels: Vec<Vec<NodeId>>,
}

/// Groups indices by cluster label, ordering clusters by their smallest
/// member, so relabelling components never changes the result.
pub fn canonical_partition(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_label.into_values().collect();
    groups.sort_by_key(|g| g[0]);
    groups
}

fn round_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn agg_of(agg: &AggParams, rows: &[&Vec<f64>]) -> Result<Vec<f64>> {
    let stack = ChildStack::from_rows(rows)?;
    let queries = agg.policy.uses_queries().then_some(&agg.fallback_query);
    Ok(round_f32(aggregate(agg, &stack, queries)?))
}

/// Clusters chunk memories level by level. Every created parent has empty
/// text, so its memory is exactly `Agg` of its children.
pub fn induce_hierarchy(chunks: &[(String, Vec<f64>)], agg: &AggParams, params: &InduceParams) -> Result<Induced> {
    if chunks.is_empty() {
        return Err(Error::EmptyInput("chunks"));
    }
    if chunks.len() < 2 {
        return Err(Error::Config("hierarchy induction needs at least two chunks".into()));
    }
    if params.k_g == 0 || params.max_depth < 1 {
        return Err(Error::Config("k_g and max_depth must be at least 1".into()));
    }
    let d = chunks[0].1.len();
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut memories = BTreeMap::new();
    for (i, (text, m)) in chunks.iter().enumerate() {
        if m.len() != d {
            return Err(Error::Shape(format!("chunk {i} memory has {} dims, expected {d}", m.len())));
        }
        nodes.push(TreeNode {
            id: NodeId(i as u64),
            title: None,
            text: text.clone(),
            parent: None,
            children: vec![],
            depth: 0,
        });
        memories.insert(NodeId(i as u64), round_f32(m.clone()));
    }
    let mut current: Vec<NodeId> = (0..chunks.len() as u64).map(NodeId).collect();
    let mut levels = vec![current.clone()];

    let new_parent = |nodes: &mut Vec<TreeNode>, memories: &mut BTreeMap<NodeId, Vec<f64>>, kids: Vec<NodeId>| -> Result<NodeId> {
        let id = NodeId(nodes.len() as u64);
        let rows: Vec<&Vec<f64>> = kids.iter().map(|k| &memories[k]).collect();
        let m = agg_of(agg, &rows)?;
        for k in &kids {
            nodes[k.0 as usize].parent = Some(id);
        }
        nodes.push(TreeNode {
            id,
            title: None,
            text: String::new(),
            parent: None,
            children: kids,
            depth: 0,
        });
        memories.insert(id, m);
        Ok(id)
    };

    for round in 0..params.max_depth.saturating_sub(1) {
        let n = current.len();
        if n <= 1 {
            break;
        }
        let k = params.k_g.min(n.div_ceil(2));
        let x = stack_rows(&current.iter().map(|id| memories[id].clone()).collect::<Vec<_>>(), d);
        let gmm = fit_gmm(&x, k, params.max_iters, params.seed.wrapping_add(round as u64))?;
        let groups = canonical_partition(&gmm.predict(&x));
        let ratio = groups.len() as f64 / n as f64;
        if ratio > params.min_compression {
            break;
        }
        let mut next = Vec::with_capacity(groups.len());
        for g in groups {
            let kids: Vec<NodeId> = g.into_iter().map(|i| current[i]).collect();
            next.push(new_parent(&mut nodes, &mut memories, kids)?);
        }
        current = next;
        levels.push(current.clone());
    }
    let root = if current.len() == 1 {
        current[0]
    } else {
        let r = new_parent(&mut nodes, &mut memories, current)?;
        levels.push(vec![r]);
        r
    };

    let mut stack = vec![(root, 0usize)];
    while let Some((id, depth)) = stack.pop() {
        let node = &mut nodes[id.0 as usize];
        node.depth = depth;
        stack.extend(node.children.iter().map(|&c| (c, depth + 1)));
    }
    let tree = SemanticTree::from_nodes(nodes, root, params.max_leaf_tokens);
    validate_tree(&tree).into_result()?;
    Ok(Induced { tree, memories, levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{agg_mean, Policy};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    /// `per` points around each centre with unit spread.
    fn blobs(centres: &[Vec<f64>], per: usize, seed: u64) -> (Mat, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = centres[0].len();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..per {
                rows.push(centre.iter().map(|m| m + gauss(&mut rng)).collect::<Vec<_>>());
                truth.push(c);
            }
        }
        (stack_rows(&rows, d), truth)
    }

    #[test]
    fn separated_clusters_are_recovered_confidently() {
        let (x, truth) = blobs(&[vec![0.0, 0.0, 0.0], vec![12.0, 0.0, 0.0]], 40, 1);
        let g = fit_gmm(&x, 2, 100, 3).unwrap();
        let resp = g.responsibilities(&x);
        let label_of_first = g.predict(&x)[0];
        for (i, &t) in truth.iter().enumerate() {
            let k = if t == 0 { label_of_first } else { 1 - label_of_first };
            assert!(resp[[i, k]] >= 0.999, "point {i}: {}", resp[[i, k]]);
        }
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_component_is_the_sample_moments() {
        let x = Mat::from_shape_vec((4, 2), vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 6.0, 5.0]).unwrap();
        let g = fit_gmm(&x, 1, 50, 0).unwrap();
        assert!((g.means[[0, 0]] - 3.0).abs() < 1e-12 && (g.means[[0, 1]] - 5.0).abs() < 1e-12);
        assert!((g.variances[[0, 0]] - 3.5).abs() < 1e-12);
        assert_eq!(g.variances[[0, 1]], VAR_FLOOR);
    }

    #[test]
    fn degenerate_and_undersized_inputs() {
        let x = Mat::from_elem((5, 3), 0.25);
        let g = fit_gmm(&x, 3, 10, 0).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.n_components, 1);
        assert!(fit_gmm(&Mat::zeros((2, 3)), 3, 10, 0).is_err());
    }

    #[test]
    fn ll_is_monotone_on_random_instances() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(6..40);
            let d = rng.random_range(1..6);
            let x = Mat::from_shape_fn((n, d), |_| gauss(&mut rng) * 2.0);
            let k = rng.random_range(1..4);
            let g = fit_gmm(&x, k, 100, seed).unwrap();
            for w in g.ll_history.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {:?}", g.ll_history);
            }
        }
    }

    fn chunk_set(memories: &[Vec<f64>]) -> Vec<(String, Vec<f64>)> {
        memories.iter().enumerate().map(|(i, m)| (format!("chunk {i}"), m.clone())).collect()
    }

    #[test]
    fn eight_chunks_build_a_valid_tree_of_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mems: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| gauss(&mut rng)).collect()).collect();
        let agg = AggParams::init(Policy::Mean, 6, 4, 0);
        let params = InduceParams {
            k_g: 2,
            max_depth: 3,
            ..Default::default()
        };
        let out = induce_hierarchy(&chunk_set(&mems), &agg, &params).unwrap();
        assert!(out.tree.height() >= 2);
        let leaves: Vec<NodeId> = out.tree.leaves().map(|n| n.id).collect();
        assert_eq!(leaves, (0..8).map(NodeId).collect::<Vec<_>>());
        for n in out.tree.nodes().filter(|n| !n.is_leaf()) {
            let rows: Vec<&Vec<f64>> = n.children.iter().map(|c| &out.memories[c]).collect();
            let want = round_f32(agg_mean(&ChildStack::from_rows(&rows).unwrap()));
            assert_eq!(out.memories[&n.id], want);
        }
    }

    #[test]
    fn two_chunks_get_a_single_root() {
        let agg = AggParams::init(Policy::Mean, 2, 2, 0);
        let out = induce_hierarchy(&chunk_set(&[vec![0.0, 1.0], vec![5.0, 1.0]]), &agg, &InduceParams::default()).unwrap();
        assert_eq!(out.tree.len(), 3);
        assert_eq!(out.tree.children(out.tree.root()), &[NodeId(0), NodeId(1)]);
        assert!(induce_hierarchy(&[], &agg, &InduceParams::default()).is_err());
    }

    #[test]
    fn planted_clusters_become_the_first_level() {
        let (x, truth) = blobs(&[vec![0.0; 4], vec![15.0, 0.0, 0.0, 0.0]], 6, 8);
        // Interleave so clusters are not contiguous in id order.
        let order: Vec<usize> = (0..6).flat_map(|i| [i, i + 6]).collect();
        let mems: Vec<Vec<f64>> = order.iter().map(|&i| x.row(i).to_vec()).collect();
        let agg = AggParams::init(Policy::Mean, 4, 4, 0);
        let params = InduceParams {
            k_g: 2,
            ..Default::default()
        };
        let out = induce_hierarchy(&chunk_set(&mems), &agg, &params).unwrap();
        let level1: Vec<Vec<NodeId>> = out.levels[1].iter().map(|p| out.tree.children(*p).to_vec()).collect();
        let mut want: Vec<Vec<NodeId>> = vec![vec![], vec![]];
        for (pos, &i) in order.iter().enumerate() {
            want[truth[i]].push(NodeId(pos as u64));
        }
        assert_eq!(level1, want);
    }

    proptest! {
        #[test]
        fn partition_ignores_label_permutation(labels in prop::collection::vec(0usize..4, 1..30), perm in Just([2usize, 0, 3, 1])) {
            let relabelled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            prop_assert_eq!(canonical_partition(&labels), canonical_partition(&relabelled));
        }
    }
}
