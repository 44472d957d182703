//! CART decision trees with per-split feature subsetting and a leaf-count
//! bound.
//!
//! Regression trees minimize the sum of squared errors, classification trees
//! the Gini impurity. Growth is best-first: the frontier leaf whose best
//! split yields the largest impurity decrease is expanded next, so a leaf
//! budget (`max_leaf_nodes`) is well-defined and independent of expansion
//! order. Thresholds sit at midpoints of consecutive distinct feature
//! values; rows with `x[feature] <= threshold` go left.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, RngStream};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative tolerance below which a node counts as pure.
const PURITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    /// Fraction of features considered per split, in (0, 1]. The per-split
    /// candidate count is `ceil(mtry * p)`.
    pub mtry: f64,
    /// Leaf budget; `None` grows to full depth.
    pub max_leaf_nodes: Option<usize>,
    pub min_samples_leaf: usize,
    pub task: Task,
}

impl TreeConfig {
    pub fn new(task: Task) -> Self {
        TreeConfig {
            mtry: 1.0,
            max_leaf_nodes: None,
            min_samples_leaf: 1,
            task,
        }
    }

    pub fn with_mtry(mut self, mtry: f64) -> Self {
        self.mtry = mtry;
        self
    }

    pub fn with_max_leaf_nodes(mut self, max_leaf_nodes: Option<usize>) -> Self {
        self.max_leaf_nodes = max_leaf_nodes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mtry > 0.0 && self.mtry <= 1.0) {
            return Err(Error::invalid(format!(
                "mtry must lie in (0,1], got {}",
                self.mtry
            )));
        }
        if let Some(m) = self.max_leaf_nodes {
            if m < 2 {
                return Err(Error::invalid("max_leaf_nodes must be at least 2"));
            }
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::invalid("min_samples_leaf must be positive"));
        }
        Ok(())
    }

    /// Number of candidate features per split: `ceil(mtry * p)`, clamped to
    /// `[1, p]`.
    pub fn features_per_split(&self, p: usize) -> usize {
        ((self.mtry * p as f64).ceil() as usize).clamp(1, p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LeafValue<T> {
    /// Mean response of the training rows in the leaf (regression).
    Value(T),
    /// Per-class training counts (classification).
    Counts(Vec<usize>),
}

impl<T: Scalar> LeafValue<T> {
    fn prediction(&self) -> T {
        match self {
            LeafValue::Value(v) => *v,
            LeafValue::Counts(c) => T::from_real(majority_class(c) as f64),
        }
    }
}

/// Majority class with ties broken toward the lowest label.
fn majority_class(counts: &[usize]) -> usize {
    let mut best = 0usize;
    for (label, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = label;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T> {
    Split {
        feature: usize,
        threshold: T,
        left: usize,
        right: usize,
    },
    Leaf(LeafValue<T>),
}

/// Result of a split search.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub feature: usize,
    pub threshold: T,
    pub impurity_decrease: f64,
}

/// Fitted binary CART tree. Nodes live in a flat array; the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree<T> {
    nodes: Vec<Node<T>>,
    n_features: usize,
    provenance: Vec<u64>,
}

/// `n - sum(c^2)/n`, i.e. n times the Gini impurity.
fn weighted_gini(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    let sq: f64 = counts.iter().map(|&c| (c as f64) * (c as f64)).sum();
    (n - sq / n).max(0.0)
}

fn class_label<T: Scalar>(data: &Dataset<T>, row: usize) -> usize {
    let y = data.response()[row].to_real();
    y.round() as usize
}

/// Best split over the candidate features, minimizing the summed child
/// impurity over all midpoints between consecutive distinct sorted values.
///
/// Ties are broken by lowest feature index, then lowest threshold. Returns
/// `None` when the node is pure or no split leaves `min_samples_leaf` rows
/// on each side with a positive impurity decrease.
pub fn best_split<T: Scalar>(
    data: &Dataset<T>,
    rows: &[usize],
    candidate_features: &[usize],
    task: Task,
    min_samples_leaf: usize,
) -> Result<Option<Split<T>>> {
    if rows.len() < 2 {
        return Err(Error::invalid("split search needs at least 2 rows"));
    }
    if candidate_features.is_empty() {
        return Err(Error::invalid("split search needs candidate features"));
    }
    let mut candidates: Vec<usize> = candidate_features.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    if let Some(&bad) = candidates.iter().find(|&&j| j >= data.n_features()) {
        return Err(Error::invalid(format!(
            "candidate feature {bad} out of range (p={})",
            data.n_features()
        )));
    }

    match task {
        Task::Regression => Ok(best_split_regression(
            data,
            rows,
            &candidates,
            min_samples_leaf,
        )),
        Task::Classification => Ok(best_split_classification(
            data,
            rows,
            &candidates,
            min_samples_leaf,
        )),
    }
}

fn best_split_regression<T: Scalar>(
    data: &Dataset<T>,
    rows: &[usize],
    candidates: &[usize],
    min_samples_leaf: usize,
) -> Option<Split<T>> {
    let n = rows.len();
    let (mut total_sum, mut total_sumsq) = (0.0f64, 0.0f64);
    for &r in rows {
        let y = data.response()[r].to_real();
        total_sum += y;
        total_sumsq += y * y;
    }
    let sse_total = (total_sumsq - total_sum * total_sum / n as f64).max(0.0);
    if sse_total <= PURITY_EPS * total_sumsq.abs().max(1.0) {
        return None;
    }

    let mut best: Option<Split<T>> = None;
    let mut pairs: Vec<(T, f64)> = Vec::with_capacity(n);
    for &j in candidates {
        let col = data.feature(j);
        pairs.clear();
        pairs.extend(rows.iter().map(|&r| (col[r], data.response()[r].to_real())));
        // Stable sort: rows with equal feature values keep their incoming
        // order, so prefix sums are reproducible.
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        let (mut sum_l, mut sumsq_l) = (0.0f64, 0.0f64);
        for i in 0..n - 1 {
            let (x, y) = pairs[i];
            sum_l += y;
            sumsq_l += y * y;
            if pairs[i + 1].0 <= x {
                continue;
            }
            let n_l = i + 1;
            let n_r = n - n_l;
            if n_l < min_samples_leaf || n_r < min_samples_leaf {
                continue;
            }
            let sse_l = (sumsq_l - sum_l * sum_l / n_l as f64).max(0.0);
            let sum_r = total_sum - sum_l;
            let sse_r = ((total_sumsq - sumsq_l) - sum_r * sum_r / n_r as f64).max(0.0);
            let decrease = sse_total - sse_l - sse_r;
            if decrease > 0.0 && best.as_ref().map_or(true, |b| decrease > b.impurity_decrease) {
                let two = T::from_real(2.0);
                best = Some(Split {
                    feature: j,
                    threshold: (x + pairs[i + 1].0) / two,
                    impurity_decrease: decrease,
                });
            }
        }
    }
    best
}

fn best_split_classification<T: Scalar>(
    data: &Dataset<T>,
    rows: &[usize],
    candidates: &[usize],
    min_samples_leaf: usize,
) -> Option<Split<T>> {
    let n = rows.len();
    let labels: Vec<usize> = rows.iter().map(|&r| class_label(data, r)).collect();
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut total_counts = vec![0usize; n_classes];
    for &l in &labels {
        total_counts[l] += 1;
    }
    let imp_total = weighted_gini(&total_counts, n);
    if imp_total <= PURITY_EPS * n as f64 {
        return None;
    }

    let mut best: Option<Split<T>> = None;
    let mut pairs: Vec<(T, usize)> = Vec::with_capacity(n);
    let mut counts_l = vec![0usize; n_classes];
    for &j in candidates {
        let col = data.feature(j);
        pairs.clear();
        pairs.extend(rows.iter().zip(labels.iter()).map(|(&r, &l)| (col[r], l)));
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        counts_l.iter_mut().for_each(|c| *c = 0);
        for i in 0..n - 1 {
            let (x, l) = pairs[i];
            counts_l[l] += 1;
            if pairs[i + 1].0 <= x {
                continue;
            }
            let n_l = i + 1;
            let n_r = n - n_l;
            if n_l < min_samples_leaf || n_r < min_samples_leaf {
                continue;
            }
            let imp_l = weighted_gini(&counts_l, n_l);
            let counts_r: Vec<usize> = total_counts
                .iter()
                .zip(counts_l.iter())
                .map(|(&t, &l)| t - l)
                .collect();
            let imp_r = weighted_gini(&counts_r, n_r);
            let decrease = imp_total - imp_l - imp_r;
            if decrease > 0.0 && best.as_ref().map_or(true, |b| decrease > b.impurity_decrease) {
                let two = T::from_real(2.0);
                best = Some(Split {
                    feature: j,
                    threshold: (x + pairs[i + 1].0) / two,
                    impurity_decrease: decrease,
                });
            }
        }
    }
    best
}

struct FrontierItem<T> {
    split: Split<T>,
    insertion: usize,
    node: usize,
    rows: Vec<usize>,
}

impl<T> PartialEq for FrontierItem<T> {
    fn eq(&self, other: &Self) -> bool {
        self.insertion == other.insertion
    }
}
impl<T> Eq for FrontierItem<T> {}
impl<T> PartialOrd for FrontierItem<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for FrontierItem<T> {
    // Max-heap on impurity decrease; ties go to the earliest insertion.
    fn cmp(&self, other: &Self) -> Ordering {
        self.split
            .impurity_decrease
            .total_cmp(&other.split.impurity_decrease)
            .then_with(|| other.insertion.cmp(&self.insertion))
    }
}

/// Grow a tree on the given row multiset.
///
/// Every split draws a fresh random subset of `ceil(mtry * p)` features
/// without replacement from `stream`; with `mtry = 1.0` no randomness is
/// consumed, so the fit is invariant to the stream.
pub fn fit_tree<T: Scalar>(
    data: &Dataset<T>,
    rows: &[usize],
    config: &TreeConfig,
    stream: &RngStream,
) -> Result<Tree<T>> {
    config.validate()?;
    if rows.is_empty() {
        return Err(Error::invalid("cannot fit a tree on an empty row set"));
    }
    let p = data.n_features();
    let k = config.features_per_split(p);
    let budget = config.max_leaf_nodes.unwrap_or(usize::MAX);
    let mut rng = stream.rng();

    let n_classes = match config.task {
        Task::Classification => {
            for &r in rows {
                let y = data.response()[r].to_real();
                if y < 0.0 || y.fract() != 0.0 {
                    return Err(Error::invalid(format!(
                        "classification labels must be non-negative integers, got {y}"
                    )));
                }
            }
            rows.iter().map(|&r| class_label(data, r)).max().unwrap() + 1
        }
        Task::Regression => 0,
    };

    let make_leaf = |rows: &[usize]| -> LeafValue<T> {
        match config.task {
            Task::Regression => {
                let mean =
                    rows.iter().map(|&r| data.response()[r].to_real()).sum::<f64>()
                        / rows.len() as f64;
                LeafValue::Value(T::from_real(mean))
            }
            Task::Classification => {
                let mut counts = vec![0usize; n_classes];
                for &r in rows {
                    counts[class_label(data, r)] += 1;
                }
                LeafValue::Counts(counts)
            }
        }
    };

    let mut nodes: Vec<Node<T>> = vec![Node::Leaf(make_leaf(rows))];
    let mut heap: BinaryHeap<FrontierItem<T>> = BinaryHeap::new();
    let mut insertion = 0usize;
    let all_features: Vec<usize> = (0..p).collect();

    let try_enqueue = |heap: &mut BinaryHeap<FrontierItem<T>>,
                           rng: &mut rand_chacha::ChaCha8Rng,
                           insertion: &mut usize,
                           node: usize,
                           rows: Vec<usize>|
     -> Result<()> {
        if rows.len() < 2 {
            return Ok(());
        }
        let subset: Vec<usize>;
        let candidates: &[usize] = if k == p {
            &all_features
        } else {
            subset = sample(rng, p, k).into_vec();
            &subset
        };
        if let Some(split) =
            best_split(data, &rows, candidates, config.task, config.min_samples_leaf)?
        {
            heap.push(FrontierItem {
                split,
                insertion: *insertion,
                node,
                rows,
            });
            *insertion += 1;
        }
        Ok(())
    };

    let mut leaves = 1usize;
    if budget >= 2 {
        try_enqueue(&mut heap, &mut rng, &mut insertion, 0, rows.to_vec())?;
    }
    while leaves < budget {
        let Some(item) = heap.pop() else { break };
        let col = data.feature(item.split.feature);
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = item
            .rows
            .iter()
            .partition(|&&r| col[r] <= item.split.threshold);
        debug_assert!(!left_rows.is_empty() && !right_rows.is_empty());

        let left = nodes.len();
        nodes.push(Node::Leaf(make_leaf(&left_rows)));
        let right = nodes.len();
        nodes.push(Node::Leaf(make_leaf(&right_rows)));
        nodes[item.node] = Node::Split {
            feature: item.split.feature,
            threshold: item.split.threshold,
            left,
            right,
        };
        leaves += 1;

        try_enqueue(&mut heap, &mut rng, &mut insertion, left, left_rows)?;
        try_enqueue(&mut heap, &mut rng, &mut insertion, right, right_rows)?;
    }

    Ok(Tree {
        nodes,
        n_features: p,
        provenance: stream.path().to_vec(),
    })
}

impl<T: Scalar> Tree<T> {
    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf(_)))
            .count()
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn provenance(&self) -> &[u64] {
        &self.provenance
    }

    fn leaf_for(&self, x: &[T]) -> Result<&LeafValue<T>> {
        if x.len() != self.n_features {
            return Err(Error::invalid(format!(
                "input has {} features, tree expects {}",
                x.len(),
                self.n_features
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input contains a non-finite value"));
        }
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if x[*feature] <= *threshold { *left } else { *right };
                }
                Node::Leaf(leaf) => return Ok(leaf),
            }
        }
    }

    /// Leaf mean (regression) or majority class label, as a scalar
    /// (classification; ties go to the lowest label).
    pub fn predict_row(&self, x: &[T]) -> Result<T> {
        Ok(self.leaf_for(x)?.prediction())
    }

    /// Majority class label at the routed leaf.
    pub fn predict_class(&self, x: &[T]) -> Result<usize> {
        match self.leaf_for(x)? {
            LeafValue::Counts(c) => Ok(majority_class(c)),
            LeafValue::Value(v) => Ok(v.to_real().round() as usize),
        }
    }

    /// Depth of the shallowest split on `feature` (root = 0), or `None` if
    /// the feature is unused.
    pub fn first_use_depth(&self, feature: usize) -> Result<Option<usize>> {
        if feature >= self.n_features {
            return Err(Error::invalid(format!(
                "feature {feature} out of range (p={})",
                self.n_features
            )));
        }
        let mut best: Option<usize> = None;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((idx, depth)) = stack.pop() {
            if let Node::Split {
                feature: f,
                left,
                right,
                ..
            } = &self.nodes[idx]
            {
                if *f == feature && best.map_or(true, |b| depth < b) {
                    best = Some(depth);
                }
                stack.push((*left, depth + 1));
                stack.push((*right, depth + 1));
            }
        }
        Ok(best)
    }

    /// Line-oriented text form: one header line, then one line per node.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "tree features={} nodes={} path={}\n",
            self.n_features,
            self.nodes.len(),
            self.provenance
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(".")
        ));
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => out.push_str(&format!("{i} split {feature} {threshold} {left} {right}\n")),
                Node::Leaf(LeafValue::Value(v)) => out.push_str(&format!("{i} leaf value {v}\n")),
                Node::Leaf(LeafValue::Counts(c)) => out.push_str(&format!(
                    "{i} leaf counts {}\n",
                    c.iter()
                        .map(|x| x.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                )),
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("empty tree text"))?;
        let mut n_features = None;
        let mut n_nodes = None;
        let mut provenance = Vec::new();
        for field in header.split_whitespace().skip(1) {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad tree header field `{field}`")))?;
            match key {
                "features" => n_features = Some(parse_usize(value)?),
                "nodes" => n_nodes = Some(parse_usize(value)?),
                "path" => {
                    if !value.is_empty() {
                        for e in value.split('.') {
                            provenance.push(
                                e.parse::<u64>()
                                    .map_err(|e| Error::format(format!("bad path: {e}")))?,
                            );
                        }
                    }
                }
                other => return Err(Error::format(format!("unknown tree header key `{other}`"))),
            }
        }
        let n_features =
            n_features.ok_or_else(|| Error::format("tree header missing `features`"))?;
        let n_nodes = n_nodes.ok_or_else(|| Error::format("tree header missing `nodes`"))?;

        let mut nodes = Vec::with_capacity(n_nodes);
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() < 3 {
                return Err(Error::format(format!("bad tree node line `{line}`")));
            }
            let idx = parse_usize(parts[0])?;
            if idx != nodes.len() {
                return Err(Error::format(format!(
                    "node lines out of order: got {idx}, expected {}",
                    nodes.len()
                )));
            }
            match parts[1] {
                "split" => {
                    if parts.len() != 6 {
                        return Err(Error::format(format!("bad split line `{line}`")));
                    }
                    nodes.push(Node::Split {
                        feature: parse_usize(parts[2])?,
                        threshold: parts[3]
                            .parse::<T>()
                            .map_err(|e| Error::format(format!("bad threshold: {e}")))?,
                        left: parse_usize(parts[4])?,
                        right: parse_usize(parts[5])?,
                    });
                }
                "leaf" => match parts[2] {
                    "value" => nodes.push(Node::Leaf(LeafValue::Value(
                        parts[3]
                            .parse::<T>()
                            .map_err(|e| Error::format(format!("bad leaf value: {e}")))?,
                    ))),
                    "counts" => {
                        let counts = parts[3]
                            .split(',')
                            .map(|c| {
                                c.parse::<usize>()
                                    .map_err(|e| Error::format(format!("bad leaf counts: {e}")))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        nodes.push(Node::Leaf(LeafValue::Counts(counts)));
                    }
                    other => {
                        return Err(Error::format(format!("unknown leaf kind `{other}`")));
                    }
                },
                other => return Err(Error::format(format!("unknown node kind `{other}`"))),
            }
        }
        if nodes.len() != n_nodes {
            return Err(Error::format(format!(
                "tree header declares {n_nodes} nodes, found {}",
                nodes.len()
            )));
        }
        Ok(Tree {
            nodes,
            n_features,
            provenance,
        })
    }
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|e| Error::format(format!("bad integer `{s}`: {e}")))
}
