use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One node record. Internal nodes route `z` left iff `z[feature] < threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf: f64,
    },
}

/// Binary regression tree stored as a node array with the root at index 0.
/// Children always follow their parent in the array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    nodes: Vec<Node>,
}

impl TryFrom<TreeRepr> for RegressionTree {
    type Error = Error;

    fn try_from(repr: TreeRepr) -> Result<Self> {
        RegressionTree::from_nodes(repr.nodes)
    }
}

impl From<RegressionTree> for TreeRepr {
    fn from(tree: RegressionTree) -> Self {
        TreeRepr { nodes: tree.nodes }
    }
}

impl RegressionTree {
    pub fn leaf(score: f64) -> Self {
        RegressionTree {
            nodes: vec![Node::Leaf { leaf: score }],
        }
    }

    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Invalid("tree has no nodes".into()));
        }
        let mut parents = vec![0usize; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            match *node {
                Node::Split {
                    left,
                    right,
                    threshold,
                    ..
                } => {
                    if left <= i || right <= i || left >= nodes.len() || right >= nodes.len() || left == right {
                        return Err(Error::Invalid(format!("node {i} has invalid children")));
                    }
                    if threshold.is_nan() {
                        return Err(Error::Invalid(format!("node {i} has NaN threshold")));
                    }
                    parents[left] += 1;
                    parents[right] += 1;
                }
                Node::Leaf { leaf } => {
                    if !leaf.is_finite() {
                        return Err(Error::Invalid(format!("leaf {i} has non-finite score")));
                    }
                }
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(Error::Invalid("node graph is not a tree".into()));
        }
        Ok(RegressionTree { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Index of the leaf node reached by `z`.
    pub fn leaf_index(&self, z: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if z[feature] < threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(z)] {
            Node::Leaf { leaf } => leaf,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn leaf_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { leaf } => Some(*leaf),
            Node::Split { .. } => None,
        })
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_scores().count()
    }

    /// `Σ_v |θ_v|`.
    pub fn l1_norm(&self) -> f64 {
        self.leaf_scores().map(f64::abs).sum()
    }

    /// Largest number of internal nodes on a root-to-leaf path.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Node::Split { left, right, .. } = *node {
                depth[left] = depth[i] + 1;
                depth[right] = depth[i] + 1;
                max = max.max(depth[i] + 1);
            }
        }
        max
    }

    /// Largest feature index referenced by a split, if any.
    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    pub fn is_zero(&self) -> bool {
        self.leaf_scores().all(|s| s == 0.0)
    }
}

pub fn predict_tree(tree: &RegressionTree, z: &[f64]) -> f64 {
    tree.predict(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stump() -> RegressionTree {
        RegressionTree::from_nodes(vec![
            Node::Split {
                feature: 0,
                threshold: 0.5,
                left: 1,
                right: 2,
            },
            Node::Leaf { leaf: -1.0 },
            Node::Leaf { leaf: 2.0 },
        ])
        .unwrap()
    }

    #[test]
    fn single_leaf_predicts_constant() {
        let t = RegressionTree::leaf(0.7);
        assert_eq!(t.predict(&[1.0, -3.0]), 0.7);
        assert_eq!(t.depth(), 0);
    }

    #[test]
    fn depth_one_routing() {
        let t = stump();
        assert_eq!(predict_tree(&t, &[0.2, 9.0]), -1.0);
        assert_eq!(predict_tree(&t, &[0.7, 9.0]), 2.0);
        // Equality goes right.
        assert_eq!(predict_tree(&t, &[0.5, 9.0]), 2.0);
        assert_eq!(t.depth(), 1);
        assert_eq!(t.l1_norm(), 3.0);
    }

    #[test]
    fn json_schema() {
        let json = serde_json::to_string(&stump()).unwrap();
        assert_eq!(
            json,
            r#"{"nodes":[{"feature":0,"threshold":0.5,"left":1,"right":2},{"leaf":-1.0},{"leaf":2.0}]}"#
        );
        let back: RegressionTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back, stump());
    }

    #[test]
    fn malformed_trees_rejected() {
        let cyc = vec![
            Node::Split {
                feature: 0,
                threshold: 0.0,
                left: 0,
                right: 1,
            },
            Node::Leaf { leaf: 0.0 },
        ];
        assert!(RegressionTree::from_nodes(cyc).is_err());
        let shared = vec![
            Node::Split {
                feature: 0,
                threshold: 0.0,
                left: 1,
                right: 2,
            },
            Node::Split {
                feature: 0,
                threshold: 0.0,
                left: 2,
                right: 3,
            },
            Node::Leaf { leaf: 0.0 },
            Node::Leaf { leaf: 0.0 },
        ];
        assert!(RegressionTree::from_nodes(shared).is_err());
        assert!(serde_json::from_str::<RegressionTree>(r#"{"nodes":[]}"#).is_err());
    }
}
