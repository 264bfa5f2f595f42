//! Regression forest trained on control units only. The forest is used as a
//! metric learner: what matters downstream is which terminal node each unit
//! reaches in each tree.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Minimum number of (bootstrap) samples in each child of a split.
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(p / 3)`.
    pub features_per_split: Option<usize>,
    /// Grow each tree on a bootstrap resample of size `n` (with replacement).
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 500,
            min_leaf: 5,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { id: u32 },
}

/// Binary tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
    leaves: u32,
}

impl Tree {
    /// Build a tree from an explicit node list. Every split must point to
    /// later nodes, and leaf ids must be unique.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Degenerate("tree without nodes".into()));
        }
        let mut ids = Vec::new();
        for (i, node) in nodes.iter().enumerate() {
            match *node {
                Node::Split { left, right, .. } => {
                    if left <= i || right <= i || left >= nodes.len() || right >= nodes.len() {
                        return Err(Error::Degenerate(format!("split {i} has invalid children")));
                    }
                }
                Node::Leaf { id } => ids.push(id),
            }
        }
        let count = ids.len();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != count {
            return Err(Error::Degenerate("duplicate leaf ids".into()));
        }
        Ok(Self {
            nodes,
            leaves: count as u32,
        })
    }

    pub fn leaf(&self, x: &[f64]) -> u32 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { id } => return id,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves as usize
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.len() - self.n_leaves()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest {
    trees: Vec<Tree>,
    p: usize,
    params: ForestParams,
}

impl RegressionForest {
    /// Forest from hand-built trees over `p` covariates.
    pub fn from_trees(trees: Vec<Tree>, p: usize) -> Self {
        let params = ForestParams {
            n_trees: trees.len(),
            ..ForestParams::default()
        };
        Self { trees, p, params }
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    /// Seed used to grow tree `l`.
    pub fn tree_seed(&self, l: usize) -> u64 {
        derive_seed(self.params.seed, l as u64)
    }

    /// Terminal node of every row in every tree.
    pub fn leaf_assignments(&self, x: &Matrix) -> Result<LeafAssignments> {
        if x.cols() != self.p {
            return Err(Error::DimensionMismatch {
                expected: self.p,
                found: x.cols(),
            });
        }
        let m = self.trees.len();
        let mut data = vec![0u32; x.rows() * m];
        data.par_chunks_mut(m.max(1))
            .zip(0..x.rows())
            .for_each(|(out, i)| {
                let row = x.row(i);
                for (slot, tree) in out.iter_mut().zip(&self.trees) {
                    *slot = tree.leaf(row);
                }
            });
        Ok(LeafAssignments {
            rows: x.rows(),
            trees: m,
            data,
        })
    }
}

/// `rows x trees` matrix of leaf ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafAssignments {
    rows: usize,
    trees: usize,
    data: Vec<u32>,
}

impl LeafAssignments {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn trees(&self) -> usize {
        self.trees
    }

    pub fn get(&self, i: usize, l: usize) -> u32 {
        self.data[i * self.trees + l]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.trees..(i + 1) * self.trees]
    }
}

/// Grow a CART regression forest on `(x, y)`.
pub fn fit_forest(x: &Matrix, y: &[f64], params: &ForestParams) -> Result<RegressionForest> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            found: y.len(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::Degenerate(format!(
            "a forest needs at least 2 training units, got {}",
            x.rows()
        )));
    }
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(Error::InvalidConfig(
            "forest needs n_trees >= 1 and min_leaf >= 1".into(),
        ));
    }
    let p = x.cols();
    let mtry = params
        .features_per_split
        .unwrap_or_else(|| p.div_ceil(3))
        .clamp(1, p.max(1));
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|l| {
            let mut rng = rng_from_seed(derive_seed(params.seed, l as u64));
            grow_tree(x, y, params, mtry, &mut rng)
        })
        .collect();
    Ok(RegressionForest {
        trees,
        p,
        params: params.clone(),
    })
}

struct Candidate {
    feature: usize,
    threshold: f64,
    score: f64,
}

fn grow_tree(x: &Matrix, y: &[f64], params: &ForestParams, mtry: usize, rng: &mut Rng) -> Tree {
    let n = x.rows();
    let samples: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };

    let mut nodes = vec![Node::Leaf { id: 0 }];
    let mut leaves = 0u32;
    let mut stack = vec![(0usize, samples)];
    let mut features: Vec<usize> = (0..x.cols()).collect();
    let mut scratch = Vec::new();

    while let Some((slot, samples)) = stack.pop() {
        let split = if samples.len() >= 2 * params.min_leaf {
            features.shuffle(rng);
            best_split(x, y, &samples, &features, mtry, params.min_leaf, &mut scratch)
        } else {
            None
        };
        match split {
            Some(c) => {
                let (left, right): (Vec<usize>, Vec<usize>) = samples
                    .iter()
                    .partition(|&&i| x.get(i, c.feature) <= c.threshold);
                let l = nodes.len();
                nodes.push(Node::Leaf { id: 0 });
                nodes.push(Node::Leaf { id: 0 });
                nodes[slot] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left: l,
                    right: l + 1,
                };
                // Right pushed first so the left subtree is numbered first.
                stack.push((l + 1, right));
                stack.push((l, left));
            }
            None => {
                nodes[slot] = Node::Leaf { id: leaves };
                leaves += 1;
            }
        }
    }
    Tree { nodes, leaves }
}

/// Best squared-error split among the first `mtry` features of `order`; if
/// none of them admits a valid split the remaining features are tried in
/// turn.
fn best_split(
    x: &Matrix,
    y: &[f64],
    samples: &[usize],
    order: &[usize],
    mtry: usize,
    min_leaf: usize,
    scratch: &mut Vec<(f64, f64)>,
) -> Option<Candidate> {
    let n = samples.len();
    let total: f64 = samples.iter().map(|&i| y[i]).sum();
    let mean = total / n as f64;
    let sst: f64 = samples.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    if sst <= 0.0 {
        return None;
    }
    let base = total * total / n as f64;
    let min_gain = 1e-12 * sst;

    let mut best: Option<Candidate> = None;
    for (tried, &feature) in order.iter().enumerate() {
        if tried >= mtry && best.is_some() {
            break;
        }
        scratch.clear();
        scratch.extend(samples.iter().map(|&i| (x.get(i, feature), y[i])));
        scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_sum = 0.0;
        for k in 1..n {
            left_sum += scratch[k - 1].1;
            if k < min_leaf || n - k < min_leaf || scratch[k - 1].0 == scratch[k].0 {
                continue;
            }
            let right_sum = total - left_sum;
            let score = left_sum * left_sum / k as f64 + right_sum * right_sum / (n - k) as f64;
            if score - base > min_gain && best.as_ref().is_none_or(|b| score > b.score) {
                let (lo, hi) = (scratch[k - 1].0, scratch[k].0);
                let mid = lo + (hi - lo) / 2.0;
                let threshold = if mid < hi { mid } else { lo };
                best = Some(Candidate {
                    feature,
                    threshold,
                    score,
                });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_data(n: usize, p: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let data: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Matrix::new(n, p, data).unwrap();
        let y = x
            .iter_rows()
            .map(|r| r[0] * 2.0 + r[1].abs() + rng.random_range(-0.1..0.1))
            .collect();
        (x, y)
    }

    #[test]
    fn two_units_are_separated() {
        let x = Matrix::from_rows(&[vec![-0.5], vec![0.7]]).unwrap();
        let y = [1.0, 3.0];
        let params = ForestParams {
            n_trees: 1,
            min_leaf: 1,
            bootstrap: false,
            ..ForestParams::default()
        };
        let f = fit_forest(&x, &y, &params).unwrap();
        let tree = &f.trees()[0];
        assert!(tree.n_splits() >= 1);
        assert_ne!(tree.leaf(x.row(0)), tree.leaf(x.row(1)));
        // The only candidate split sits between the two values.
        match tree.nodes()[0] {
            Node::Split {
                feature, threshold, ..
            } => {
                assert_eq!(feature, 0);
                assert!(threshold >= -0.5 && threshold < 0.7);
            }
            Node::Leaf { .. } => unreachable!(),
        }
    }

    #[test]
    fn constant_response_gives_stumps() {
        let (x, _) = random_data(40, 3, 1);
        let y = vec![2.5; 40];
        let f = fit_forest(&x, &y, &ForestParams { n_trees: 20, ..Default::default() }).unwrap();
        assert!(f.trees().iter().all(|t| t.n_leaves() == 1 && t.n_splits() == 0));
        let leaves = f.leaf_assignments(&x).unwrap();
        assert!((0..40).all(|i| leaves.row(i).iter().all(|&l| l == 0)));
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = random_data(60, 4, 2);
        let params = ForestParams {
            n_trees: 30,
            seed: 17,
            ..Default::default()
        };
        let a = fit_forest(&x, &y, &params).unwrap();
        let b = fit_forest(&x, &y, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.leaf_assignments(&x).unwrap(), b.leaf_assignments(&x).unwrap());
        let c = fit_forest(&x, &y, &ForestParams { seed: 18, ..params }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn serial_pool_matches_parallel() {
        let (x, y) = random_data(50, 3, 3);
        let params = ForestParams {
            n_trees: 16,
            seed: 5,
            ..Default::default()
        };
        let parallel = fit_forest(&x, &y, &params).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| fit_forest(&x, &y, &params)).unwrap();
        assert_eq!(parallel, serial);
    }

    #[test]
    fn leaves_respect_min_size_and_are_unique() {
        let (x, y) = random_data(80, 3, 4);
        let params = ForestParams {
            n_trees: 10,
            min_leaf: 5,
            bootstrap: false,
            seed: 1,
            ..Default::default()
        };
        let f = fit_forest(&x, &y, &params).unwrap();
        let leaves = f.leaf_assignments(&x).unwrap();
        for l in 0..f.n_trees() {
            let mut counts = vec![0; f.trees()[l].n_leaves()];
            for i in 0..x.rows() {
                counts[leaves.get(i, l) as usize] += 1;
            }
            assert!(counts.iter().all(|&c| c >= 5), "{counts:?}");
            assert!(f.trees()[l].n_leaves() > 1);
        }
    }

    #[test]
    fn hand_built_routing() {
        let tree = Tree::from_nodes(vec![
            Node::Split {
                feature: 0,
                threshold: 0.0,
                left: 1,
                right: 2,
            },
            Node::Leaf { id: 0 },
            Node::Leaf { id: 1 },
        ])
        .unwrap();
        assert_eq!(tree.leaf(&[-1.0]), 0);
        assert_eq!(tree.leaf(&[1.0]), 1);
        // Ties go left; out-of-range values still route.
        assert_eq!(tree.leaf(&[0.0]), 0);
        assert_eq!(tree.leaf(&[f64::INFINITY]), 1);
        assert_eq!(tree.leaf(&[f64::NEG_INFINITY]), 0);

        let stump = Tree::from_nodes(vec![Node::Leaf { id: 0 }]).unwrap();
        let f = RegressionForest::from_trees(vec![tree, stump], 1);
        let x = Matrix::from_rows(&[vec![-3.0], vec![0.5], vec![2.0]]).unwrap();
        let leaves = f.leaf_assignments(&x).unwrap();
        assert_eq!(leaves.row(0), [0, 0]);
        assert_eq!(leaves.row(1), [1, 0]);
        assert_eq!(leaves.row(2), [1, 0]);
    }

    #[test]
    fn training_rows_route_consistently() {
        let (x, y) = random_data(30, 2, 6);
        let f = fit_forest(&x, &y, &ForestParams { n_trees: 8, ..Default::default() }).unwrap();
        let a = f.leaf_assignments(&x).unwrap();
        let dup = x.select_rows(&[3, 3, 7]);
        let b = f.leaf_assignments(&dup).unwrap();
        assert_eq!(b.row(0), a.row(3));
        assert_eq!(b.row(1), a.row(3));
        assert_eq!(b.row(2), a.row(7));
    }

    #[test]
    fn errors() {
        let (x, y) = random_data(10, 2, 7);
        let f = fit_forest(&x, &y, &ForestParams { n_trees: 2, ..Default::default() }).unwrap();
        assert!(matches!(
            f.leaf_assignments(&Matrix::zeros(2, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(fit_forest(&Matrix::zeros(1, 2), &[0.0], &ForestParams::default()).is_err());
        assert!(fit_forest(&x, &y[..5], &ForestParams::default()).is_err());
        assert!(Tree::from_nodes(vec![]).is_err());
        assert!(Tree::from_nodes(vec![
            Node::Split { feature: 0, threshold: 0.0, left: 1, right: 2 },
            Node::Leaf { id: 1 },
            Node::Leaf { id: 1 },
        ])
        .is_err());
    }
}
