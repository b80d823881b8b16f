//! Regression-tree learner for the quadratic stage loss: closed-form
//! soft-thresholded leaf scores, exact greedy split search and top-down
//! growth with per-node covariate subsampling.

mod grow;
mod leaf;
mod tree;

pub use grow::{
    best_split, grow_tree, FeatureMatrix, SplitCandidate, StageData, TreeConfig, TreeGrower,
};
pub use leaf::{leaf_loss, leaf_score, LeafStats};
pub use tree::{predict_tree, Node, RegressionTree};
