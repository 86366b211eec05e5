//! Semantic hierarchy trees: the node table, the nested JSON format and
//! structural validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub title: Option<String>,
    pub text: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub depth: usize,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn tokens(&self) -> Vec<u32> {
        tokenizer::encode(&self.text)
    }

    pub fn token_len(&self) -> usize {
        tokenizer::token_len(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticTree {
    nodes: BTreeMap<NodeId, TreeNode>,
    root: NodeId,
    max_leaf_tokens: usize,
}

/// Nested on-disk form: `{"id", "title", "text", "children": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonNode {
    pub id: u64,
    pub title: Option<String>,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub children: Vec<JsonNode>,
}

impl SemanticTree {
    /// Assembles a tree from raw nodes without checking any invariant.
    /// Run [`validate_tree`] on the result before relying on it.
    pub fn from_nodes(nodes: Vec<TreeNode>, root: NodeId, max_leaf_tokens: usize) -> Self {
        Self {
            nodes: nodes.into_iter().map(|n| (n.id, n)).collect(),
            root,
            max_leaf_tokens,
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn max_leaf_tokens(&self) -> usize {
        self.max_leaf_tokens
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.nodes.get(&id).map(|n| n.children.as_slice()).unwrap_or(&[])
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values().filter(|n| n.is_leaf())
    }

    pub fn height(&self) -> usize {
        self.nodes.values().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn max_branching(&self) -> usize {
        self.nodes.values().map(|n| n.children.len()).max().unwrap_or(0)
    }

    /// Ids of the subtree rooted at `id`, including `id`.
    pub fn subtree(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(v) = stack.pop() {
            if out.insert(v) {
                stack.extend(self.children(v).iter().copied());
            }
        }
        out
    }

    /// Ancestors of `id` from its parent up to the root.
    pub fn ancestors(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.node(id).and_then(|n| n.parent);
        while let Some(p) = cur {
            if out.len() > self.nodes.len() {
                break;
            }
            out.push(p);
            cur = self.node(p).and_then(|n| n.parent);
        }
        out
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut TreeNode> {
        self.nodes.get_mut(&id)
    }

    pub fn to_json_node(&self) -> JsonNode {
        fn build(t: &SemanticTree, id: NodeId) -> JsonNode {
            let n = &t.nodes[&id];
            JsonNode {
                id: id.0,
                title: n.title.clone(),
                text: n.text.clone(),
                children: n.children.iter().map(|&c| build(t, c)).collect(),
            }
        }
        build(self, self.root)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_node()).expect("tree serializes")
    }

    /// Parses the nested JSON format, deriving parent links and depths.
    pub fn from_json_node(root: &JsonNode, max_leaf_tokens: usize) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        let mut stack = vec![(root, None::<NodeId>, 0usize)];
        while let Some((jn, parent, depth)) = stack.pop() {
            let id = NodeId(jn.id);
            let node = TreeNode {
                id,
                title: jn.title.clone(),
                text: jn.text.clone(),
                parent,
                children: jn.children.iter().map(|c| NodeId(c.id)).collect(),
                depth,
            };
            if nodes.insert(id, node).is_some() {
                return Err(Error::InvalidTree(format!("duplicate node id {id}")));
            }
            for c in jn.children.iter().rev() {
                stack.push((c, Some(id), depth + 1));
            }
        }
        Ok(Self {
            nodes,
            root: NodeId(root.id),
            max_leaf_tokens,
        })
    }

    pub fn from_json(s: &str, max_leaf_tokens: usize) -> Result<Self> {
        let root: JsonNode = serde_json::from_str(s)?;
        Self::from_json_node(&root, max_leaf_tokens)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let canon = serde_json::to_vec(&self.to_json_node()).expect("tree serializes");
        hex::encode(Sha256::digest(&canon))
    }

    pub(crate) fn next_id(&self) -> NodeId {
        NodeId(self.nodes.keys().next_back().map_or(0, |k| k.0 + 1))
    }

    pub(crate) fn insert(&mut self, node: TreeNode) {
        self.nodes.insert(node.id, node);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    SingleRoot,
    Acyclic,
    DepthConsistent,
    OrderConsistent,
    TokenLimits,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub check: Check,
    pub passed: bool,
    pub offending: Vec<NodeId>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, check: Check) -> &CheckResult {
        self.checks.iter().find(|c| c.check == check).expect("every check is reported")
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{:?} at {:?}", c.check, c.offending))
            .collect();
        Err(Error::InvalidTree(failed.join("; ")))
    }
}

fn result(check: Check, mut offending: Vec<NodeId>) -> CheckResult {
    offending.sort();
    offending.dedup();
    CheckResult {
        check,
        passed: offending.is_empty(),
        offending,
    }
}

/// Checks every structural invariant and reports offenders per check.
pub fn validate_tree(tree: &SemanticTree) -> ValidationReport {
    let n = tree.nodes.len();

    let mut roots: Vec<NodeId> = tree.nodes.values().filter(|v| v.parent.is_none()).map(|v| v.id).collect();
    let mut bad_root = Vec::new();
    if roots.len() != 1 || roots[0] != tree.root {
        bad_root.append(&mut roots);
        bad_root.push(tree.root);
    }
    if tree.node(tree.root).is_none_or(|r| r.depth != 0) {
        bad_root.push(tree.root);
    }

    // Walk parent links; anything that cannot reach the root within |V| steps is on or behind a cycle.
    let mut cyclic = Vec::new();
    for v in tree.nodes.values() {
        let mut cur = v.id;
        let mut seen = vec![cur];
        let mut steps = 0;
        loop {
            let Some(node) = tree.node(cur) else {
                cyclic.push(v.id);
                break;
            };
            match node.parent {
                None => break,
                Some(p) => {
                    steps += 1;
                    if steps > n {
                        cyclic.extend(seen.iter().copied());
                        break;
                    }
                    if let Some(pos) = seen.iter().position(|&s| s == p) {
                        cyclic.extend(seen[pos..].iter().copied());
                        break;
                    }
                    seen.push(p);
                    cur = p;
                }
            }
        }
    }

    let mut bad_depth = Vec::new();
    for v in tree.nodes.values() {
        match v.parent {
            None if v.depth != 0 => bad_depth.push(v.id),
            Some(p) => match tree.node(p) {
                Some(pn) if pn.depth + 1 == v.depth => {}
                _ => bad_depth.push(v.id),
            },
            None => {}
        }
    }

    let mut bad_order = Vec::new();
    for v in tree.nodes.values() {
        let mut seen = BTreeSet::new();
        let mut prev: Option<NodeId> = None;
        for &c in &v.children {
            let ok = seen.insert(c)
                && tree.node(c).is_some_and(|cn| cn.parent == Some(v.id))
                && prev.is_none_or(|p| p < c);
            if !ok {
                bad_order.push(v.id);
            }
            prev = Some(c);
        }
        if let Some(p) = v.parent {
            if !tree.node(p).is_some_and(|pn| pn.children.contains(&v.id)) {
                bad_order.push(v.id);
            }
        }
    }

    let mut bad_tokens = Vec::new();
    for v in tree.nodes.values() {
        let len = v.token_len();
        if len > tree.max_leaf_tokens || (v.is_leaf() && len == 0) {
            bad_tokens.push(v.id);
        }
    }

    ValidationReport {
        checks: vec![
            result(Check::SingleRoot, bad_root),
            result(Check::Acyclic, cyclic),
            result(Check::DepthConsistent, bad_depth),
            result(Check::OrderConsistent, bad_order),
            result(Check::TokenLimits, bad_tokens),
        ],
    }
}

/// Children-before-parent order; siblings keep document order and the root is last.
pub fn post_order(tree: &SemanticTree) -> Result<Vec<NodeId>> {
    let report = validate_tree(tree);
    for c in [Check::SingleRoot, Check::Acyclic, Check::OrderConsistent] {
        if !report.get(c).passed {
            return report.into_result().map(|_| Vec::new());
        }
    }
    let mut out = Vec::with_capacity(tree.len());
    let mut stack = vec![(tree.root, false)];
    while let Some((id, expanded)) = stack.pop() {
        if expanded {
            out.push(id);
            continue;
        }
        stack.push((id, true));
        for &c in tree.children(id).iter().rev() {
            stack.push((c, false));
        }
    }
    if out.len() != tree.len() {
        return Err(Error::InvalidTree(format!(
            "{} of {} nodes are unreachable from the root",
            tree.len() - out.len(),
            tree.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn node(id: u64, parent: Option<u64>, children: &[u64], depth: usize, text: &str) -> TreeNode {
        TreeNode {
            id: NodeId(id),
            title: None,
            text: text.into(),
            parent: parent.map(NodeId),
            children: children.iter().map(|&c| NodeId(c)).collect(),
            depth,
        }
    }

    /// Random tree where node `i` picks a parent among `0..i`.
    pub(crate) fn random_tree(parents: &[usize]) -> SemanticTree {
        let n = parents.len() + 1;
        let mut par = vec![None; n];
        let mut depth = vec![0usize; n];
        let mut children = vec![Vec::new(); n];
        for (i, &p) in parents.iter().enumerate() {
            let child = i + 1;
            let p = p % child;
            par[child] = Some(p as u64);
            depth[child] = depth[p] + 1;
            children[p].push(child as u64);
        }
        let nodes = (0..n)
            .map(|i| node(i as u64, par[i], &children[i], depth[i], &format!("node {i} text")))
            .collect();
        SemanticTree::from_nodes(nodes, NodeId(0), 512)
    }

    fn five() -> SemanticTree {
        SemanticTree::from_nodes(
            vec![
                node(0, None, &[1, 2], 0, "root"),
                node(1, Some(0), &[3], 1, "a"),
                node(2, Some(0), &[], 1, "b"),
                node(3, Some(1), &[4], 2, "c"),
                node(4, Some(3), &[], 3, "d"),
            ],
            NodeId(0),
            64,
        )
    }

    #[test]
    fn well_formed_tree_passes_every_check() {
        let r = validate_tree(&five());
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checks.len(), 5);
    }

    #[test]
    fn parent_pointing_to_descendant_is_a_cycle() {
        let mut t = five();
        // a's parent becomes its own descendant d
        t.node_mut(NodeId(1)).unwrap().parent = Some(NodeId(4));
        let r = validate_tree(&t);
        let acyc = r.get(Check::Acyclic);
        assert!(!acyc.passed);
        for id in [1, 3, 4] {
            assert!(acyc.offending.contains(&NodeId(id)), "{acyc:?}");
        }
    }

    #[test]
    fn depth_off_by_one_is_reported() {
        let mut t = five();
        t.node_mut(NodeId(3)).unwrap().depth = 3;
        let r = validate_tree(&t);
        let d = r.get(Check::DepthConsistent);
        assert!(!d.passed);
        assert!(d.offending.contains(&NodeId(3)));
    }

    #[test]
    fn duplicate_children_and_token_overflow() {
        let mut t = five();
        t.node_mut(NodeId(0)).unwrap().children = vec![NodeId(1), NodeId(2), NodeId(2)];
        t.node_mut(NodeId(2)).unwrap().text = "x".repeat(65);
        let r = validate_tree(&t);
        assert!(!r.get(Check::OrderConsistent).passed);
        assert_eq!(r.get(Check::TokenLimits).offending, vec![NodeId(2)]);
    }

    #[test]
    fn two_roots_fail() {
        let mut t = five();
        t.node_mut(NodeId(2)).unwrap().parent = None;
        assert!(!validate_tree(&t).get(Check::SingleRoot).passed);
    }

    #[test]
    fn post_order_chain_and_branches() {
        let chain = SemanticTree::from_nodes(
            vec![node(0, None, &[1], 0, "r"), node(1, Some(0), &[2], 1, "a"), node(2, Some(1), &[], 2, "b")],
            NodeId(0),
            64,
        );
        assert_eq!(post_order(&chain).unwrap(), vec![NodeId(2), NodeId(1), NodeId(0)]);

        // root(c1(g1), c2)
        let t = SemanticTree::from_nodes(
            vec![
                node(0, None, &[1, 3], 0, "r"),
                node(1, Some(0), &[2], 1, "c1"),
                node(2, Some(1), &[], 2, "g1"),
                node(3, Some(0), &[], 1, "c2"),
            ],
            NodeId(0),
            64,
        );
        assert_eq!(post_order(&t).unwrap(), vec![NodeId(2), NodeId(1), NodeId(3), NodeId(0)]);
    }

    #[test]
    fn post_order_rejects_cycles() {
        let mut t = five();
        t.node_mut(NodeId(1)).unwrap().parent = Some(NodeId(4));
        assert!(post_order(&t).is_err());
    }

    #[test]
    fn random_fifty_node_tree_children_precede_parents() {
        let parents: Vec<usize> = (0..49).map(|i| (i * 7 + 3) % (i + 1)).collect();
        let t = random_tree(&parents);
        let order = post_order(&t).unwrap();
        let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        for v in t.nodes() {
            for c in &v.children {
                assert!(pos[c] < pos[&v.id]);
            }
        }
    }

    proptest! {
        #[test]
        fn post_order_is_a_descendant_first_permutation(parents in proptest::collection::vec(0usize..1000, 0..120)) {
            let t = random_tree(&parents);
            let order = post_order(&t).unwrap();
            prop_assert_eq!(order.len(), t.len());
            let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            prop_assert_eq!(pos.len(), t.len());
            for v in t.nodes() {
                for c in &v.children {
                    prop_assert!(pos[c] < pos[&v.id]);
                }
            }
            prop_assert_eq!(*order.last().unwrap(), t.root());
        }

        #[test]
        fn json_round_trip_is_identity(parents in proptest::collection::vec(0usize..1000, 0..60)) {
            let mut t = random_tree(&parents);
            t.node_mut(NodeId(0)).unwrap().title = Some("Root \"quoted\"".into());
            let back = SemanticTree::from_json(&t.to_json(), t.max_leaf_tokens()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
