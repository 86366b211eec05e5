//! Child-memory aggregation policies.
//!
//! Each policy compresses the stacked child memories `M` (`c × d`, rows in
//! document order) into a single `1 × d` vector. Projections use the row
//! convention `Q = M W_Q` with `W_Q: d × d_h`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Init};
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Mean,
    SelfAttn,
    CrossAttn,
    Gat,
    ParentToken,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Mean,
        Policy::SelfAttn,
        Policy::CrossAttn,
        Policy::Gat,
        Policy::ParentToken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Mean => "mean",
            Policy::SelfAttn => "self_attn",
            Policy::CrossAttn => "cross_attn",
            Policy::Gat => "gat",
            Policy::ParentToken => "parent_token",
        }
    }

    /// Whether the policy consumes parent query tokens.
    pub fn uses_queries(self) -> bool {
        matches!(self, Policy::CrossAttn | Policy::Gat)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggParams {
    pub policy: Policy,
    pub d_h: usize,
    /// Number of parent query tokens taken from the parent's text.
    pub n_queries: usize,
    pub tau_gat: f64,
    pub leaky_slope: f64,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub a_p: Mat,
    pub a_c: Mat,
    pub w_child: Mat,
    pub w_parent: Mat,
    pub m_par: Mat,
    /// Learned query used when the parent has no text.
    pub fallback_query: Mat,
}

impl AggParams {
    pub fn init(policy: Policy, d: usize, d_h: usize, seed: u64) -> Self {
        let mut init = Init::new(seed);
        let p = 1.0 / (d as f64).sqrt();
        let a = 1.0 / (d_h as f64).sqrt();
        Self {
            policy,
            d_h,
            n_queries: 4,
            tau_gat: 1.0,
            leaky_slope: 0.01,
            w_q: init.normal(d, d_h, p),
            w_k: init.normal(d, d_h, p),
            w_v: init.normal(d, d, p),
            a_p: init.normal(1, d_h, a),
            a_c: init.normal(1, d_h, a),
            w_child: init.normal(d, d_h, p),
            w_parent: init.normal(d, d_h, p),
            m_par: init.normal(1, d, 1.0),
            fallback_query: init.normal(1, d, 1.0),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("agg.w_q", &self.w_q),
            ("agg.w_k", &self.w_k),
            ("agg.w_v", &self.w_v),
            ("agg.a_p", &self.a_p),
            ("agg.a_c", &self.a_c),
            ("agg.w_child", &self.w_child),
            ("agg.w_parent", &self.w_parent),
            ("agg.m_par", &self.m_par),
            ("agg.fallback_query", &self.fallback_query),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("agg.w_q", &mut self.w_q),
            ("agg.w_k", &mut self.w_k),
            ("agg.w_v", &mut self.w_v),
            ("agg.a_p", &mut self.a_p),
            ("agg.a_c", &mut self.a_c),
            ("agg.w_child", &mut self.w_child),
            ("agg.w_parent", &mut self.w_parent),
            ("agg.m_par", &mut self.m_par),
            ("agg.fallback_query", &mut self.fallback_query),
        ]
    }

    /// Names of the tensors the active policy reads.
    pub fn active_tensors(&self) -> &'static [&'static str] {
        match self.policy {
            Policy::Mean => &[],
            Policy::SelfAttn => &["agg.w_q", "agg.w_k"],
            Policy::CrossAttn => &["agg.w_q", "agg.w_k", "agg.fallback_query"],
            Policy::Gat => &[
                "agg.w_v",
                "agg.a_p",
                "agg.a_c",
                "agg.w_child",
                "agg.w_parent",
                "agg.fallback_query",
            ],
            Policy::ParentToken => &["agg.w_q", "agg.w_k", "agg.w_v", "agg.m_par"],
        }
    }

    pub fn handles<G: Graph>(&self, g: &mut G, track: bool) -> AggHandles<G::T> {
        let mut mk = |m: &Mat| {
            let m = Arc::new(m.clone());
            if track {
                g.param(m)
            } else {
                g.constant(m)
            }
        };
        AggHandles {
            w_q: mk(&self.w_q),
            w_k: mk(&self.w_k),
            w_v: mk(&self.w_v),
            a_p: mk(&self.a_p),
            a_c: mk(&self.a_c),
            w_child: mk(&self.w_child),
            w_parent: mk(&self.w_parent),
            m_par: mk(&self.m_par),
            fallback_query: mk(&self.fallback_query),
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        if !(self.tau_gat > 0.0) {
            return Err(Error::Config(format!("GAT temperature must be > 0, got {}", self.tau_gat)));
        }
        let shapes = [
            ("w_q", &self.w_q, (d, self.d_h)),
            ("w_k", &self.w_k, (d, self.d_h)),
            ("w_v", &self.w_v, (d, d)),
            ("a_p", &self.a_p, (1, self.d_h)),
            ("a_c", &self.a_c, (1, self.d_h)),
            ("w_child", &self.w_child, (d, self.d_h)),
            ("w_parent", &self.w_parent, (d, self.d_h)),
            ("m_par", &self.m_par, (1, d)),
            ("fallback_query", &self.fallback_query, (1, d)),
        ];
        for (name, m, want) in shapes {
            if m.dim() != want {
                return Err(Error::Shape(format!("{name} is {:?}, expected {want:?}", m.dim())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AggHandles<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub a_p: T,
    pub a_c: T,
    pub w_child: T,
    pub w_parent: T,
    pub m_par: T,
    pub fallback_query: T,
}

/// Stacked child memories in document order; never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildStack(Mat);

impl ChildStack {
    pub fn new(m: Mat) -> Result<Self> {
        if m.nrows() == 0 {
            return Err(Error::EmptyInput("child stack"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("child stack has non-finite entries".into()));
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        Self::new(crate::graph::stack_rows(rows, d))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Applies `params.policy` to `m` (`c × d`). `queries` (`K × d`) is required by
/// the cross-attention and GAT policies.
pub fn aggregate_in<G: Graph>(
    g: &mut G,
    params: &AggParams,
    h: &AggHandles<G::T>,
    m: &G::T,
    queries: Option<&G::T>,
) -> Result<G::T> {
    let (c, d) = g.value(m).dim();
    if c == 0 {
        return Err(Error::EmptyInput("child stack"));
    }
    params.check(d)?;
    let inv = 1.0 / (params.d_h as f64).sqrt();
    let need_queries = || queries.ok_or(Error::Config(format!("{} aggregation needs parent queries", params.policy)));
    Ok(match params.policy {
        Policy::Mean => {
            let s = g.sum_rows(m);
            g.scale(&s, 1.0 / c as f64)
        }
        Policy::SelfAttn => {
            let q = g.matmul(m, &h.w_q);
            let k = g.matmul(m, &h.w_k);
            let a = g.matmul_nt(&q, &k);
            let a = g.scale(&a, inv);
            let a = g.softmax_rows(&a, false);
            let w = g.sum_rows(&a);
            let total = g.sum_all(&w);
            let w = g.div_scalar(&w, &total);
            g.matmul(&w, m)
        }
        Policy::CrossAttn => {
            let queries = need_queries()?;
            let kq = g.value(queries).nrows();
            let q = g.matmul(queries, &h.w_q);
            let k = g.matmul(m, &h.w_k);
            let s = g.matmul_nt(&q, &k);
            let s = g.scale(&s, inv);
            let s = g.softmax_rows(&s, false);
            let w = g.sum_rows(&s);
            let w = g.scale(&w, 1.0 / kq as f64);
            g.matmul(&w, m)
        }
        Policy::Gat => {
            let queries = need_queries()?;
            let kq = g.value(queries).nrows();
            let qbar = g.sum_rows(queries);
            let qbar = g.scale(&qbar, 1.0 / kq as f64);
            let keys = g.matmul(m, &h.w_child);
            let p = g.matmul(&qbar, &h.w_parent);
            let parent_term = g.matmul_nt(&p, &h.a_p);
            let child_terms = g.matmul_nt(&keys, &h.a_c);
            let e = g.add_row(&child_terms, &parent_term);
            let e = g.leaky_relu(&e, params.leaky_slope);
            let e = g.transpose(&e);
            let e = g.scale(&e, 1.0 / params.tau_gat);
            let alpha = g.softmax_rows(&e, false);
            let v = g.matmul(m, &h.w_v);
            g.matmul(&alpha, &v)
        }
        Policy::ParentToken => {
            let full = g.vstack(&[h.m_par.clone(), m.clone()]);
            let q = g.matmul(&full, &h.w_q);
            let k = g.matmul(&full, &h.w_k);
            let v = g.matmul(&full, &h.w_v);
            let a = g.matmul_nt(&q, &k);
            let a = g.scale(&a, inv);
            let a = g.softmax_rows(&a, false);
            let o = g.matmul(&a, &v);
            g.slice_rows(&o, 0, 1)
        }
    })
}

/// Parent query tokens: final hidden states of the first `n_queries` tokens of
/// the parent's text, or the learned fallback when the text is empty.
pub fn parent_queries_in<G: Graph>(
    g: &mut G,
    backbone: &Backbone,
    params: &AggParams,
    h: &AggHandles<G::T>,
    parent_tokens: &[u32],
) -> Result<G::T> {
    if parent_tokens.is_empty() || params.n_queries == 0 {
        return Ok(h.fallback_query.clone());
    }
    let k = parent_tokens.len().min(params.n_queries);
    let e = backbone.embed(&parent_tokens[..k])?;
    let e = g.constant(Arc::new(e));
    backbone.forward_in(g, &e)
}

pub fn aggregate(params: &AggParams, m: &ChildStack, queries: Option<&Mat>) -> Result<Vec<f64>> {
    let mut g = Eager;
    let h = params.handles(&mut g, false);
    let mm = Arc::new(m.matrix().clone());
    let q = queries.map(|q| Arc::new(q.clone()));
    let out = aggregate_in(&mut g, params, &h, &mm, q.as_ref())?;
    Ok(out.row(0).to_vec())
}

fn with_policy(params: &AggParams, policy: Policy) -> AggParams {
    AggParams {
        policy,
        ..params.clone()
    }
}

pub fn agg_mean(m: &ChildStack) -> Vec<f64> {
    let c = m.len() as f64;
    m.matrix().sum_axis(ndarray::Axis(0)).iter().map(|v| v / c).collect()
}

pub fn agg_self_attn(m: &ChildStack, params: &AggParams) -> Result<Vec<f64>> {
    aggregate(&with_policy(params, Policy::SelfAttn), m, None)
}

pub fn agg_cross_attn(m: &ChildStack, params: &AggParams, queries: &Mat) -> Result<Vec<f64>> {
    aggregate(&with_policy(params, Policy::CrossAttn), m, Some(queries))
}

pub fn agg_gat(m: &ChildStack, params: &AggParams, queries: &Mat) -> Result<Vec<f64>> {
    aggregate(&with_policy(params, Policy::Gat), m, Some(queries))
}

pub fn agg_parent_token(m: &ChildStack, params: &AggParams) -> Result<Vec<f64>> {
    aggregate(&with_policy(params, Policy::ParentToken), m, None)
}

/// The mixing weights a policy applies to its (possibly projected) rows:
/// `ŵ` for self-attention, `w` for cross-attention, `α` for GAT, and the
/// parent-position attention row for the parent-token policy.
pub fn mixing_weights(params: &AggParams, m: &ChildStack, queries: Option<&Mat>) -> Result<Vec<f64>> {
    use crate::graph::kernels::softmax_rows;
    let mm = m.matrix();
    let c = mm.nrows();
    let inv = 1.0 / (params.d_h as f64).sqrt();
    let need = || queries.ok_or(Error::Config("parent queries required".into()));
    Ok(match params.policy {
        Policy::Mean => vec![1.0 / c as f64; c],
        Policy::SelfAttn => {
            let a = softmax_rows(&(mm.dot(&params.w_q).dot(&mm.dot(&params.w_k).t()) * inv), false);
            let w = a.sum_axis(ndarray::Axis(0));
            let t = w.sum();
            w.iter().map(|v| v / t).collect()
        }
        Policy::CrossAttn => {
            let q = need()?;
            let s = softmax_rows(&(q.dot(&params.w_q).dot(&mm.dot(&params.w_k).t()) * inv), false);
            s.sum_axis(ndarray::Axis(0)).iter().map(|v| v / q.nrows() as f64).collect()
        }
        Policy::Gat => {
            let q = need()?;
            let qbar = q.sum_axis(ndarray::Axis(0)) / q.nrows() as f64;
            let p = qbar.dot(&params.w_parent);
            let pt = p.dot(&params.a_p.row(0));
            let e: Vec<f64> = (0..c)
                .map(|i| {
                    let x = mm.row(i).dot(&params.w_child).dot(&params.a_c.row(0)) + pt;
                    let x = if x >= 0.0 { x } else { params.leaky_slope * x };
                    x / params.tau_gat
                })
                .collect();
            softmax_rows(&crate::graph::row(&e), false).row(0).to_vec()
        }
        Policy::ParentToken => {
            let full = crate::graph::kernels::vstack(&[&params.m_par, mm]);
            let a = softmax_rows(&(full.dot(&params.w_q).dot(&full.dot(&params.w_k).t()) * inv), false);
            a.row(0).to_vec()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack(rows: &[&[f64]]) -> ChildStack {
        ChildStack::from_rows(rows).unwrap()
    }

    fn zeroed(mut p: AggParams) -> AggParams {
        p.w_q.fill(0.0);
        p.w_k.fill(0.0);
        p
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn mean_examples() {
        assert_eq!(agg_mean(&stack(&[&[1.0, 2.0], &[3.0, 4.0]])), vec![2.0, 3.0]);
        assert_eq!(agg_mean(&stack(&[&[5.0, -1.0]])), vec![5.0, -1.0]);
        let v = [0.1, 0.7, -0.3];
        assert!(close(&agg_mean(&stack(&[&v, &v, &v])), &v, 1e-15));
        assert!(ChildStack::new(Mat::zeros((0, 3))).is_err());
    }

    #[test]
    fn mean_policy_is_permutation_invariant() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![4.0, 8.0], vec![16.0, 32.0]];
        let a = agg_mean(&ChildStack::from_rows(&rows).unwrap());
        let b = agg_mean(&ChildStack::from_rows(&[rows[2].clone(), rows[0].clone(), rows[1].clone()]).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_projections_reduce_to_mean() {
        let p = zeroed(AggParams::init(Policy::SelfAttn, 3, 2, 1));
        let m = stack(&[&[1.0, 2.0, 3.0], &[0.5, -1.0, 2.0], &[4.0, 0.0, 1.0]]);
        let mean = agg_mean(&m);
        assert!(close(&agg_self_attn(&m, &p).unwrap(), &mean, 1e-12));
        let q = Mat::from_shape_fn((4, 3), |(i, j)| (i + j) as f64);
        assert!(close(&agg_cross_attn(&m, &p, &q).unwrap(), &mean, 1e-12));
    }

    #[test]
    fn single_child_is_returned_unchanged() {
        let p = AggParams::init(Policy::SelfAttn, 3, 2, 2);
        let m = stack(&[&[0.3, -0.2, 0.9]]);
        assert!(close(&agg_self_attn(&m, &p).unwrap(), &[0.3, -0.2, 0.9], 1e-15));
        let q = Mat::from_shape_fn((1, 3), |(_, j)| j as f64);
        assert!(close(&agg_cross_attn(&m, &p, &q).unwrap(), &[0.3, -0.2, 0.9], 1e-15));
    }

    #[test]
    fn gat_identical_children_and_zero_child_vector() {
        let mut p = AggParams::init(Policy::Gat, 3, 2, 3);
        let q = Mat::from_shape_fn((2, 3), |(i, j)| (i as f64) - j as f64);
        let r = [0.2, -0.4, 1.0];
        let wv: Vec<f64> = (0..3).map(|j| (0..3).map(|i| r[i] * p.w_v[[i, j]]).sum()).collect();
        let out = agg_gat(&stack(&[&r, &r, &r]), &p, &q).unwrap();
        assert!(close(&out, &wv, 1e-12));

        p.a_c.fill(0.0);
        let m = stack(&[&[1.0, 0.0, 2.0], &[0.0, 3.0, -1.0]]);
        let proj = m.matrix().dot(&p.w_v);
        let want: Vec<f64> = (0..3).map(|j| (proj[[0, j]] + proj[[1, j]]) / 2.0).collect();
        assert!(close(&agg_gat(&m, &p, &q).unwrap(), &want, 1e-12));
    }

    #[test]
    fn gat_rejects_nonpositive_temperature() {
        let mut p = AggParams::init(Policy::Gat, 2, 2, 3);
        p.tau_gat = 0.0;
        let q = Mat::ones((1, 2));
        assert!(agg_gat(&stack(&[&[1.0, 2.0]]), &p, &q).is_err());
    }

    #[test]
    fn query_policies_require_queries() {
        let p = AggParams::init(Policy::CrossAttn, 2, 2, 3);
        assert!(aggregate(&p, &stack(&[&[1.0, 2.0]]), None).is_err());
    }

    #[test]
    fn parent_token_degenerations() {
        let mut p = AggParams::init(Policy::ParentToken, 3, 2, 4);
        let mpar = p.m_par.row(0).to_vec();
        let wv_par: Vec<f64> = p.m_par.dot(&p.w_v).row(0).to_vec();
        assert!(close(&agg_parent_token(&stack(&[&mpar]), &p).unwrap(), &wv_par, 1e-12));

        p = zeroed(p);
        let m = stack(&[&[1.0, 2.0, 0.0], &[0.0, -1.0, 3.0]]);
        let full = crate::graph::kernels::vstack(&[&p.m_par, m.matrix()]).dot(&p.w_v);
        let want: Vec<f64> = (0..3).map(|j| full.column(j).sum() / 3.0).collect();
        assert!(close(&agg_parent_token(&m, &p).unwrap(), &want, 1e-12));
    }

    #[test]
    fn mixing_weights_are_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for policy in Policy::ALL {
            for s in 0..20 {
                let p = AggParams::init(policy, 6, 3, s);
                let c = rng.random_range(1..8);
                let m = ChildStack::new(Mat::from_shape_fn((c, 6), |_| rng.random_range(-2.0..2.0))).unwrap();
                let q = Mat::from_shape_fn((3, 6), |_| rng.random_range(-2.0..2.0));
                let w = mixing_weights(&p, &m, Some(&q)).unwrap();
                assert!(w.iter().all(|&x| x >= 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert!("max".parse::<Policy>().is_err());
    }
}
