//! Regression trees, boosted ensembles and their hyperparameters.

use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use crate::data::ClassLabel;
use crate::error::{Error, Result};
use crate::nn::layers::sigmoid;

/// Boosting hyperparameters. `lambda` and `reg_lambda` add into one L2 term,
/// `alpha` and `reg_alpha` into one L1 term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtHyperParams {
    pub lambda: f64,
    pub alpha: f64,
    pub max_depth: usize,
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    pub reg_alpha: f64,
    pub reg_lambda: f64,
}

impl Default for GbdtHyperParams {
    fn default() -> Self {
        GbdtHyperParams {
            lambda: 1.0,
            alpha: 0.0,
            max_depth: 6,
            n_estimators: 100,
            learning_rate: 0.3,
            subsample: 1.0,
            colsample_bytree: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            reg_alpha: 0.0,
            reg_lambda: 0.0,
        }
    }
}

impl GbdtHyperParams {
    pub fn l2(&self) -> f64 {
        self.lambda + self.reg_lambda
    }

    pub fn l1(&self) -> f64 {
        self.alpha + self.reg_alpha
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("min_child_weight", self.min_child_weight),
            ("reg_alpha", self.reg_alpha),
            ("reg_lambda", self.reg_lambda),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.l2() <= 0.0 {
            return Err(Error::Config("lambda + reg_lambda must be positive".into()));
        }
        if self.max_depth == 0 || self.max_depth > 32 {
            return Err(Error::Config(format!(
                "max_depth {} outside 1..=32",
                self.max_depth
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, v) in [
            ("subsample", self.subsample),
            ("colsample_bytree", self.colsample_bytree),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

/// Nodes in preorder; the root is index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    /// Checks that `nodes` is a preorder binary tree.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        fn walk(nodes: &[Node], i: usize, next: &mut usize, depth: usize) -> Result<()> {
            if depth > 64 {
                return Err(Error::Malformed("tree deeper than 64".into()));
            }
            if let Node::Split {
                left,
                right,
                threshold,
                ..
            } = nodes[i]
            {
                if !threshold.is_finite() {
                    return Err(Error::Malformed("non-finite threshold".into()));
                }
                for child in [left, right] {
                    if child != *next || child >= nodes.len() {
                        return Err(Error::Malformed("tree nodes are not in preorder".into()));
                    }
                    *next += 1;
                    walk(nodes, child, next, depth + 1)?;
                }
            }
            Ok(())
        }
        if nodes.is_empty() {
            return Err(Error::Malformed("empty tree".into()));
        }
        let mut next = 1;
        walk(&nodes, 0, &mut next, 0)?;
        if next != nodes.len() {
            return Err(Error::Malformed("unreachable tree nodes".into()));
        }
        Ok(RegressionTree { nodes })
    }

    pub fn leaf(weight: f64) -> Self {
        RegressionTree {
            nodes: vec![Node::Leaf { weight }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn d(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + d(nodes, left).max(d(nodes, right)),
            }
        }
        d(&self.nodes, 0)
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    pub fn leaf_index(&self, row: &[f32]) -> usize {
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
                    i = if (row[feature] as f64) < threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn eval(&self, row: &[f32]) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf { weight } => weight,
            Node::Split { .. } => unreachable!(),
        }
    }
}

/// `p(Second) = sigmoid(base_score + learning_rate * sum_t tree_t(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoostedEnsemble {
    pub params: GbdtHyperParams,
    pub n_features: usize,
    pub base_score: f64,
    pub trees: Vec<RegressionTree>,
}

impl BoostedEnsemble {
    pub fn learning_rate(&self) -> f64 {
        self.params.learning_rate
    }

    /// Unshrunk sum of tree outputs, accumulated in tree order.
    pub fn raw_sum(&self, row: &[f32]) -> f64 {
        self.trees
            .iter()
            .map(|t| t.eval(row))
            .fold(0.0, |a, v| a + v)
    }

    pub fn margin_from_sum(&self, sum: f64) -> f64 {
        self.base_score + self.learning_rate() * sum
    }

    pub fn margin(&self, row: &[f32]) -> f64 {
        self.margin_from_sum(self.raw_sum(row))
    }

    pub fn check_dims(&self, fm: &FeatureMatrix) -> Result<()> {
        if fm.cols() != self.n_features {
            return Err(Error::Shape(format!(
                "ensemble expects {} features, matrix has {}",
                self.n_features,
                fm.cols()
            )));
        }
        Ok(())
    }
}

/// Probability of the second message for every row.
pub fn predict_proba(ens: &BoostedEnsemble, fm: &FeatureMatrix) -> Result<Vec<f64>> {
    ens.check_dims(fm)?;
    Ok((0..fm.rows())
        .map(|i| sigmoid(ens.margin(fm.row(i))))
        .collect())
}

pub fn predict_labels(ens: &BoostedEnsemble, fm: &FeatureMatrix) -> Result<Vec<ClassLabel>> {
    Ok(predict_proba(ens, fm)?
        .into_iter()
        .map(crate::nn::model::predict_label)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ensemble(trees: Vec<RegressionTree>, base: f64, lr: f64, d: usize) -> BoostedEnsemble {
        BoostedEnsemble {
            params: GbdtHyperParams {
                learning_rate: lr,
                ..GbdtHyperParams::default()
            },
            n_features: d,
            base_score: base,
            trees,
        }
    }

    fn fm(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
        let values = (0..rows * d).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        FeatureMatrix::new(rows, d, values, vec![ClassLabel::First; rows]).unwrap()
    }

    #[test]
    fn empty_ensemble_and_zero_tree_give_base_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = fm(5, 3, &mut rng);
        let e = ensemble(vec![], 0.7, 0.3, 3);
        assert!(predict_proba(&e, &x)
            .unwrap()
            .iter()
            .all(|&p| p == sigmoid(0.7)));
        let zero = RegressionTree::from_nodes(vec![
            Node::Split {
                feature: 1,
                threshold: 0.0,
                left: 1,
                right: 2,
            },
            Node::Leaf { weight: 0.0 },
            Node::Leaf { weight: 0.0 },
        ])
        .unwrap();
        let e = ensemble(vec![zero], -1.25, 0.3, 3);
        assert!(predict_proba(&e, &x)
            .unwrap()
            .iter()
            .all(|&p| p == sigmoid(-1.25)));
    }

    /// Grows a random preorder tree by recursion, independent of the
    /// evaluation loop under test.
    fn random_tree(rng: &mut ChaCha8Rng, d: usize, depth: usize) -> Vec<Node> {
        fn grow(rng: &mut ChaCha8Rng, d: usize, depth: usize, out: &mut Vec<Node>) {
            let me = out.len();
            if depth == 0 || rng.gen_bool(0.3) {
                out.push(Node::Leaf {
                    weight: rng.gen_range(-1.0..1.0),
                });
                return;
            }
            out.push(Node::Leaf { weight: 0.0 });
            let feature = rng.gen_range(0..d);
            let threshold = rng.gen_range(-2.0..2.0);
            let left = out.len();
            grow(rng, d, depth - 1, out);
            let right = out.len();
            grow(rng, d, depth - 1, out);
            out[me] = Node::Split {
                feature,
                threshold,
                left,
                right,
            };
        }
        let mut out = Vec::new();
        grow(rng, d, depth, &mut out);
        out
    }

    fn interpret(nodes: &[Node], i: usize, row: &[f32]) -> f64 {
        match nodes[i] {
            Node::Leaf { weight } => weight,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if (row[feature] as f64) < threshold {
                    interpret(nodes, left, row)
                } else {
                    interpret(nodes, right, row)
                }
            }
        }
    }

    #[test]
    fn agrees_with_node_interpreter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 4;
        let raw: Vec<Vec<Node>> = (0..7).map(|_| random_tree(&mut rng, d, 5)).collect();
        let trees = raw
            .iter()
            .map(|n| RegressionTree::from_nodes(n.clone()).unwrap())
            .collect();
        let e = ensemble(trees, 0.1, 0.4, d);
        let x = fm(300, d, &mut rng);
        let p = predict_proba(&e, &x).unwrap();
        for i in 0..x.rows() {
            let mut s = 0.0;
            for n in &raw {
                s += interpret(n, 0, x.row(i));
            }
            assert_eq!(p[i], sigmoid(0.1 + 0.4 * s));
            assert!(p[i] > 0.0 && p[i] < 1.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = ensemble(vec![], 0.0, 0.3, 4);
        assert!(matches!(
            predict_proba(&e, &fm(2, 3, &mut rng)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rejects_non_preorder_trees() {
        let bad = vec![
            Node::Split {
                feature: 0,
                threshold: 0.0,
                left: 2,
                right: 1,
            },
            Node::Leaf { weight: 0.0 },
            Node::Leaf { weight: 0.0 },
        ];
        assert!(RegressionTree::from_nodes(bad).is_err());
        let bad = vec![Node::Leaf { weight: 0.0 }, Node::Leaf { weight: 0.0 }];
        assert!(RegressionTree::from_nodes(bad).is_err());
    }

    #[test]
    fn default_params_validate() {
        GbdtHyperParams::default().validate().unwrap();
        let bad = GbdtHyperParams {
            subsample: 0.0,
            ..GbdtHyperParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = GbdtHyperParams {
            lambda: 0.0,
            ..GbdtHyperParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
