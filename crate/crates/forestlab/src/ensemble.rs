//! Bagged tree ensembles.
//!
//! One configuration covers all three estimators studied here: vanilla
//! bagging (`mtry = 1.0`, unbounded leaves), SFS random forests
//! (`mtry < 1.0`), and TRIM (`mtry = 1.0` with a leaf budget). Trees are fit
//! on bootstrap bags under per-tree child RNG streams, so fitting in
//! parallel cannot perturb results.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{bootstrap_sample, Dataset, RngStream};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tree::{fit_tree, Task, Tree, TreeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub tree: TreeConfig,
    pub master_seed: u64,
}

impl ForestConfig {
    pub fn new(n_trees: usize, tree: TreeConfig, master_seed: u64) -> Self {
        ForestConfig {
            n_trees,
            tree,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::invalid("n_trees must be at least 1"));
        }
        self.tree.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest<T> {
    trees: Vec<Tree<T>>,
    config: ForestConfig,
    n_features: usize,
}

/// Fit a forest using the stream derived from `config.master_seed`.
pub fn fit_forest<T: Scalar>(data: &Dataset<T>, config: &ForestConfig) -> Result<Forest<T>> {
    fit_forest_with_stream(data, config, &RngStream::new(config.master_seed))
}

/// Fit a forest with an explicit stream (the harness derives one per trial).
///
/// Tree `k` draws its bag from `stream.child(k).child(0)` and its split
/// subsets from `stream.child(k).child(1)`, so the result is independent of
/// how trees are scheduled across workers.
pub fn fit_forest_with_stream<T: Scalar>(
    data: &Dataset<T>,
    config: &ForestConfig,
    stream: &RngStream,
) -> Result<Forest<T>> {
    config.validate()?;
    let trees: Vec<Tree<T>> = (0..config.n_trees)
        .into_par_iter()
        .map(|k| {
            let tree_stream = stream.child(k as u64);
            let bag = bootstrap_sample(data, &tree_stream.child(0))?;
            fit_tree(data, &bag, &config.tree, &tree_stream.child(1))
        })
        .collect::<Result<_>>()?;
    Ok(Forest {
        trees,
        config: config.clone(),
        n_features: data.n_features(),
    })
}

impl<T: Scalar> Forest<T> {
    pub fn trees(&self) -> &[Tree<T>] {
        &self.trees
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn task(&self) -> Task {
        self.config.tree.task
    }

    /// Mean of tree predictions (regression) or plurality vote over hard
    /// per-tree votes (classification; ties go to the lowest label).
    pub fn predict_row(&self, x: &[T]) -> Result<T> {
        match self.task() {
            Task::Regression => {
                let sum: f64 = self
                    .trees
                    .iter()
                    .map(|t| t.predict_row(x).map(|v| v.to_real()))
                    .sum::<Result<f64>>()?;
                Ok(T::from_real(sum / self.trees.len() as f64))
            }
            Task::Classification => Ok(T::from_real(self.predict_class(x)? as f64)),
        }
    }

    pub fn predict_class(&self, x: &[T]) -> Result<usize> {
        let mut votes: Vec<usize> = Vec::new();
        for tree in &self.trees {
            let label = tree.predict_class(x)?;
            if label >= votes.len() {
                votes.resize(label + 1, 0);
            }
            votes[label] += 1;
        }
        let mut best = 0usize;
        for (label, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = label;
            }
        }
        Ok(best)
    }

    /// Predictions for every row of `data`.
    pub fn predict(&self, data: &Dataset<T>) -> Result<Vec<T>> {
        (0..data.n_rows())
            .map(|i| self.predict_row(&data.row(i)))
            .collect()
    }

    /// Mean first-use depth of `feature` over the trees that use it, plus
    /// the fraction of trees using it. The mean is `None` when no tree uses
    /// the feature.
    pub fn average_first_depth(&self, feature: usize) -> Result<(Option<f64>, f64)> {
        let mut sum = 0.0f64;
        let mut used = 0usize;
        for tree in &self.trees {
            if let Some(d) = tree.first_use_depth(feature)? {
                sum += d as f64;
                used += 1;
            }
        }
        let usage = used as f64 / self.trees.len() as f64;
        let mean = (used > 0).then(|| sum / used as f64);
        Ok((mean, usage))
    }

    /// Mean over tree pairs of the sample correlation between their
    /// prediction vectors on the rows of `data`. Pairs involving a
    /// zero-variance prediction vector contribute 0.
    pub fn pairwise_tree_correlation(&self, data: &Dataset<T>) -> Result<f64> {
        if self.task() != Task::Regression {
            return Err(Error::invalid(
                "pairwise tree correlation is defined for regression forests",
            ));
        }
        if self.trees.len() < 2 {
            return Err(Error::invalid(
                "pairwise tree correlation needs at least 2 trees",
            ));
        }
        if data.n_rows() < 2 {
            return Err(Error::invalid(
                "pairwise tree correlation needs at least 2 evaluation points",
            ));
        }
        let n = data.n_rows();
        // Center and normalize each tree's prediction vector once.
        let mut unit: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.trees.len());
        for tree in &self.trees {
            let mut v: Vec<f64> = (0..n)
                .map(|i| tree.predict_row(&data.row(i)).map(|p| p.to_real()))
                .collect::<Result<_>>()?;
            let mean = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|x| *x -= mean);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-300 {
                unit.push(None);
            } else {
                v.iter_mut().for_each(|x| *x /= norm);
                unit.push(Some(v));
            }
        }
        let mut total = 0.0f64;
        let mut pairs = 0usize;
        for a in 0..unit.len() {
            for b in a + 1..unit.len() {
                pairs += 1;
                if let (Some(u), Some(w)) = (&unit[a], &unit[b]) {
                    total += u.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        Ok(total / pairs as f64)
    }

    /// Text form: a header line with the configuration, then the
    /// concatenated tree serializations.
    pub fn to_text(&self) -> String {
        let max_leaf = self
            .config
            .tree
            .max_leaf_nodes
            .map_or("none".to_string(), |m| m.to_string());
        let mut out = format!(
            "forest task={} features={} n_trees={} mtry={} max_leaf_nodes={} min_samples_leaf={} seed={}\n",
            self.task().as_str(),
            self.n_features,
            self.trees.len(),
            self.config.tree.mtry,
            max_leaf,
            self.config.tree.min_samples_leaf,
            self.config.master_seed,
        );
        for tree in &self.trees {
            out.push_str(&tree.to_text());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("empty forest text"))?;
        if !header.starts_with("forest ") {
            return Err(Error::format("missing forest header"));
        }
        let mut task = None;
        let mut n_features = None;
        let mut n_trees = None;
        let mut mtry = None;
        let mut max_leaf_nodes: Option<Option<usize>> = None;
        let mut min_samples_leaf = None;
        let mut seed = None;
        for field in header.split_whitespace().skip(1) {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad forest header field `{field}`")))?;
            match key {
                "task" => task = Some(Task::parse(value)?),
                "features" => n_features = Some(parse::<usize>(value)?),
                "n_trees" => n_trees = Some(parse::<usize>(value)?),
                "mtry" => mtry = Some(parse::<f64>(value)?),
                "max_leaf_nodes" => {
                    max_leaf_nodes = Some(if value == "none" {
                        None
                    } else {
                        Some(parse::<usize>(value)?)
                    })
                }
                "min_samples_leaf" => min_samples_leaf = Some(parse::<usize>(value)?),
                "seed" => seed = Some(parse::<u64>(value)?),
                other => {
                    return Err(Error::format(format!(
                        "unknown forest header key `{other}`"
                    )))
                }
            }
        }
        let missing = |what: &str| Error::format(format!("forest header missing `{what}`"));
        let config = ForestConfig {
            n_trees: n_trees.ok_or_else(|| missing("n_trees"))?,
            tree: TreeConfig {
                mtry: mtry.ok_or_else(|| missing("mtry"))?,
                max_leaf_nodes: max_leaf_nodes.ok_or_else(|| missing("max_leaf_nodes"))?,
                min_samples_leaf: min_samples_leaf.ok_or_else(|| missing("min_samples_leaf"))?,
                task: task.ok_or_else(|| missing("task"))?,
            },
            master_seed: seed.ok_or_else(|| missing("seed"))?,
        };
        let n_features = n_features.ok_or_else(|| missing("features"))?;

        // Split the remainder into per-tree blocks on `tree ` header lines.
        let mut trees = Vec::with_capacity(config.n_trees);
        let mut block = String::new();
        for line in lines {
            if line.starts_with("tree ") && !block.is_empty() {
                trees.push(Tree::from_text(&block)?);
                block.clear();
            }
            block.push_str(line);
            block.push('\n');
        }
        if !block.is_empty() {
            trees.push(Tree::from_text(&block)?);
        }
        if trees.len() != config.n_trees {
            return Err(Error::format(format!(
                "forest header declares {} trees, found {}",
                config.n_trees,
                trees.len()
            )));
        }
        Ok(Forest {
            trees,
            config,
            n_features,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut text = String::new();
        for line in file.lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_text(&text)
    }

    /// Per-feature (name, mean first depth, usage fraction) rows for CSV
    /// export.
    pub fn first_depth_table(&self, feature_names: &[String]) -> Result<Vec<(String, Option<f64>, f64)>> {
        if feature_names.len() != self.n_features {
            return Err(Error::invalid(format!(
                "{} names for {} features",
                feature_names.len(),
                self.n_features
            )));
        }
        (0..self.n_features)
            .map(|j| {
                let (mean, usage) = self.average_first_depth(j)?;
                Ok((feature_names[j].clone(), mean, usage))
            })
            .collect()
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>()
        .map_err(|e| Error::format(format!("bad value `{s}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::LeafValue;
    use crate::tree::Node;
    use rand::Rng;

    fn random_data(seed: u64, n: usize, p: usize) -> Dataset<f64> {
        let mut rng = RngStream::new(seed).rng();
        let cols: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..n).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let names = (0..p).map(|j| format!("x{}", j + 1)).collect();
        Dataset::new(cols, y, None, names).unwrap()
    }

    fn reg_forest_config(n_trees: usize, seed: u64) -> ForestConfig {
        ForestConfig::new(n_trees, TreeConfig::new(Task::Regression), seed)
    }

    #[test]
    fn single_tree_forest_matches_cart_on_bag() {
        let data = random_data(1, 40, 2);
        let config = reg_forest_config(1, 7);
        let forest = fit_forest(&data, &config).unwrap();
        let stream = RngStream::new(7).child(0);
        let bag = bootstrap_sample(&data, &stream.child(0)).unwrap();
        let tree = fit_tree(&data, &bag, &config.tree, &stream.child(1)).unwrap();
        for i in 0..data.n_rows() {
            assert_eq!(
                forest.predict_row(&data.row(i)).unwrap(),
                tree.predict_row(&data.row(i)).unwrap()
            );
        }
    }

    #[test]
    fn constant_response_forest_predicts_constant() {
        let data = Dataset::new(
            vec![vec![0.1, 0.4, 0.9]],
            vec![2.5, 2.5, 2.5],
            None,
            vec!["x1".into()],
        )
        .unwrap();
        let forest = fit_forest(&data, &reg_forest_config(10, 1)).unwrap();
        assert!(forest.trees().iter().all(|t| t.n_nodes() == 1));
        assert_eq!(forest.predict_row(&[0.3]).unwrap(), 2.5);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = random_data(2, 60, 3);
        let mut config = reg_forest_config(8, 11);
        config.tree.mtry = 0.5;
        let a = fit_forest(&data, &config).unwrap();
        let b = fit_forest(&data, &config).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn regression_prediction_is_mean() {
        let leaf = |v: f64| Tree::from_text(&format!("tree features=1 nodes=1 path=\n0 leaf value {v}\n")).unwrap();
        let forest = Forest {
            trees: vec![leaf(1.0), leaf(3.0)],
            config: reg_forest_config(2, 0),
            n_features: 1,
        };
        assert_eq!(forest.predict_row(&[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn classification_majority_vote() {
        let leaf = |label: usize| {
            let mut counts = vec![0usize; 2];
            counts[label] = 3;
            Tree::from_text(&format!(
                "tree features=1 nodes=1 path=\n0 leaf counts {},{}\n",
                counts[0], counts[1]
            ))
            .unwrap()
        };
        let forest = Forest {
            trees: vec![leaf(1), leaf(1), leaf(0)],
            config: ForestConfig::new(3, TreeConfig::new(Task::Classification), 0),
            n_features: 1,
        };
        assert_eq!(forest.predict_class(&[0.0]).unwrap(), 1);
        // 2-2 tie goes to the lowest label.
        let tied = Forest {
            trees: vec![leaf(1), leaf(1), leaf(0), leaf(0)],
            config: ForestConfig::new(4, TreeConfig::new(Task::Classification), 0),
            n_features: 1,
        };
        assert_eq!(tied.predict_class(&[0.0]).unwrap(), 0);
    }

    #[test]
    fn average_first_depth_cases() {
        let data = random_data(3, 50, 1);
        let forest = fit_forest(&data, &reg_forest_config(5, 2)).unwrap();
        let (mean, usage) = forest.average_first_depth(0).unwrap();
        assert_eq!(mean, Some(0.0));
        assert_eq!(usage, 1.0);

        let leaf = Tree::<f64>::from_text("tree features=2 nodes=1 path=\n0 leaf value 1\n").unwrap();
        let stumps = Forest {
            trees: vec![leaf.clone(), leaf],
            config: reg_forest_config(2, 0),
            n_features: 2,
        };
        let (mean, usage) = stumps.average_first_depth(1).unwrap();
        assert_eq!(mean, None);
        assert_eq!(usage, 0.0);
    }

    #[test]
    fn average_first_depth_mean_of_two() {
        // Hand-built: depths 1 and 3 for feature 1 -> mean 2.0, usage 1.0.
        let t1 = {
            // root on 0, depth-1 split on 1
            Tree::<f64>::from_text(
                "tree features=2 nodes=5 path=\n0 split 0 0.5 1 2\n1 split 1 0.5 3 4\n2 leaf value 0\n3 leaf value 0\n4 leaf value 1\n",
            )
            .unwrap()
        };
        let t2 = {
            // chain of splits on 0 down to depth 2, then feature 1 at depth 3
            Tree::<f64>::from_text(
                "tree features=2 nodes=9 path=\n0 split 0 0.5 1 2\n1 split 0 0.25 3 4\n2 leaf value 0\n3 split 0 0.1 5 6\n4 leaf value 0\n5 split 1 0.5 7 8\n6 leaf value 0\n7 leaf value 0\n8 leaf value 1\n",
            )
            .unwrap()
        };
        let forest = Forest {
            trees: vec![t1, t2],
            config: reg_forest_config(2, 0),
            n_features: 2,
        };
        let (mean, usage) = forest.average_first_depth(1).unwrap();
        assert_eq!(mean, Some(2.0));
        assert_eq!(usage, 1.0);
    }

    #[test]
    fn identical_trees_have_unit_correlation() {
        let data = random_data(4, 30, 1);
        let tree = fit_tree(
            &data,
            &(0..30).collect::<Vec<_>>(),
            &TreeConfig::new(Task::Regression),
            &RngStream::new(0),
        )
        .unwrap();
        let forest = Forest {
            trees: vec![tree.clone(), tree],
            config: reg_forest_config(2, 0),
            n_features: 1,
        };
        let gamma = forest.pairwise_tree_correlation(&data).unwrap();
        assert!((gamma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn antisymmetric_trees_have_negative_unit_correlation() {
        // Two stumps with mirrored predictions on a 4-point set:
        // tree A predicts {0,0,1,1}, tree B predicts {1,1,0,0};
        // centered vectors are exact negatives, so the correlation is -1.
        let a = Tree::<f64>::from_text(
            "tree features=1 nodes=3 path=\n0 split 0 0.5 1 2\n1 leaf value 0\n2 leaf value 1\n",
        )
        .unwrap();
        let b = Tree::<f64>::from_text(
            "tree features=1 nodes=3 path=\n0 split 0 0.5 1 2\n1 leaf value 1\n2 leaf value 0\n",
        )
        .unwrap();
        let data = Dataset::new(
            vec![vec![0.1, 0.2, 0.8, 0.9]],
            vec![0.0, 0.0, 1.0, 1.0],
            None,
            vec!["x1".into()],
        )
        .unwrap();
        let forest = Forest {
            trees: vec![a, b],
            config: reg_forest_config(2, 0),
            n_features: 1,
        };
        let gamma = forest.pairwise_tree_correlation(&data).unwrap();
        assert!((gamma + 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_requires_two_trees() {
        let data = random_data(5, 10, 1);
        let forest = fit_forest(&data, &reg_forest_config(1, 0)).unwrap();
        assert!(forest.pairwise_tree_correlation(&data).is_err());
    }

    #[test]
    fn text_round_trip() {
        let data = random_data(6, 40, 2);
        let mut config = reg_forest_config(4, 9);
        config.tree.mtry = 0.5;
        config.tree.max_leaf_nodes = Some(6);
        let forest = fit_forest(&data, &config).unwrap();
        let text = forest.to_text();
        let back = Forest::<f64>::from_text(&text).unwrap();
        assert_eq!(back, forest);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn degenerate_leaf_node_check() {
        // sanity for hand-built leaves used above
        let leaf = Tree::<f64>::from_text("tree features=1 nodes=1 path=\n0 leaf value 3.25\n").unwrap();
        assert!(matches!(
            leaf.nodes()[0],
            Node::Leaf(LeafValue::Value(v)) if v == 3.25
        ));
    }
}
