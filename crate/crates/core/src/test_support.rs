use crate::aggregation::Policy;
use crate::backbone::BackboneConfig;
use crate::model::{Model, ModelConfig};
use crate::tree::tests::node;
use crate::tree::{NodeId, SemanticTree, TreeNode};

pub(crate) fn tiny_model(policy: Policy) -> Model {
    Model::new(&ModelConfig {
        backbone: BackboneConfig {
            d: 16,
            layers: 1,
            heads: 2,
            mlp_hidden: 32,
            ctx: 64,
            seed: 1,
            ..Default::default()
        },
        policy,
        agg_d_h: 8,
        route_d_h: 8,
    })
    .unwrap()
}

/// Complete `branching`-ary tree of the given height, ids in BFS order.
pub(crate) fn uniform_tree(branching: usize, height: usize) -> SemanticTree {
    let mut nodes: Vec<TreeNode> = vec![node(0, None, &[], 0, "root")];
    let mut frontier = vec![0u64];
    let mut next = 1u64;
    for depth in 1..=height {
        let mut new_frontier = Vec::new();
        for &p in &frontier {
            for _ in 0..branching {
                let text = if depth == height {
                    format!("leaf {next} holds fact {}", next * 7 % 13)
                } else {
                    format!("section {next}")
                };
                nodes.push(node(next, Some(p), &[], depth, &text));
                nodes[p as usize].children.push(NodeId(next));
                new_frontier.push(next);
                next += 1;
            }
        }
        frontier = new_frontier;
    }
    SemanticTree::from_nodes(nodes, NodeId(0), 64)
}
