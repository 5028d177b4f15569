//! Decision trees and random forests with Gini and entropy split criteria.
//!
//! Trees grow greedily: each node draws a fresh random feature subset, scans
//! every candidate threshold (midpoints between consecutive distinct sorted
//! values), and keeps the split with maximal information gain. A `value <=
//! threshold` comparison routes samples to the left child. The forest trains
//! each tree on a bootstrap resample (optional) with an independent
//! seed-derived random stream and predicts by majority vote.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;

// ---------------------------------------------------------------------------
// Criteria and configuration
// ---------------------------------------------------------------------------

/// Node impurity measure. `log_loss` is a semantic alias of `entropy`, kept
/// distinct so hyperparameter grids can spell both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitCriterion {
    Gini,
    Entropy,
    LogLoss,
}

impl SplitCriterion {
    fn impurity(&self, counts: &[u64], total: f64) -> f64 {
        match self {
            SplitCriterion::Gini => {
                let mut acc = 0.0;
                for &c in counts {
                    let p = c as f64 / total;
                    acc += p * p;
                }
                1.0 - acc
            }
            SplitCriterion::Entropy | SplitCriterion::LogLoss => {
                let mut acc = 0.0;
                for &c in counts {
                    if c > 0 {
                        let p = c as f64 / total;
                        acc -= p * p.log2();
                    }
                }
                acc
            }
        }
    }
}

impl fmt::Display for SplitCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitCriterion::Gini => "gini",
            SplitCriterion::Entropy => "entropy",
            SplitCriterion::LogLoss => "log_loss",
        })
    }
}

impl FromStr for SplitCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gini" => Ok(SplitCriterion::Gini),
            "entropy" => Ok(SplitCriterion::Entropy),
            "log_loss" => Ok(SplitCriterion::LogLoss),
            other => Err(Error::Argument(format!(
                "unknown criterion {other:?} (expected gini, entropy, or log_loss)"
            ))),
        }
    }
}

/// Per-node feature subset size rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    Log2,
    All,
}

impl MaxFeatures {
    /// Number of candidate features drawn at each node, at least 1.
    pub fn subset_size(&self, n_features: usize) -> usize {
        let k = match self {
            MaxFeatures::Sqrt => (n_features as f64).sqrt().ceil() as usize,
            MaxFeatures::Log2 => (n_features as f64).log2().ceil() as usize,
            MaxFeatures::All => n_features,
        };
        k.clamp(1, n_features)
    }
}

impl fmt::Display for MaxFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaxFeatures::Sqrt => "sqrt",
            MaxFeatures::Log2 => "log2",
            MaxFeatures::All => "all",
        })
    }
}

impl FromStr for MaxFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(MaxFeatures::Sqrt),
            "log2" => Ok(MaxFeatures::Log2),
            "all" => Ok(MaxFeatures::All),
            other => Err(Error::Argument(format!(
                "unknown max_features {other:?} (expected sqrt, log2, or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_estimators: usize,
    pub criterion: SplitCriterion,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl ForestConfig {
    /// Unrestricted tree growth, bootstrap on.
    pub fn new(
        n_estimators: usize,
        criterion: SplitCriterion,
        max_features: MaxFeatures,
        seed: u64,
    ) -> Self {
        Self {
            n_estimators,
            criterion,
            max_features,
            bootstrap: true,
            max_depth: None,
            min_samples_split: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 {
            return Err(Error::Config("n_estimators must be at least 1".into()));
        }
        if self.min_samples_split == 0 {
            return Err(Error::Config("min_samples_split must be at least 1".into()));
        }
        if self.max_depth == Some(0) {
            return Err(Error::Config("max_depth must be at least 1 when set".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Impurity functions
// ---------------------------------------------------------------------------

fn validate_probabilities(probabilities: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for &p in probabilities {
        if p < 0.0 || !p.is_finite() {
            return Err(Error::Argument(format!("negative probability {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "probabilities sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Shannon entropy in bits: `sum_i -p_i log2 p_i`, with `0 log 0 = 0`.
pub fn entropy(probabilities: &[f64]) -> Result<f64> {
    validate_probabilities(probabilities)?;
    let mut acc = 0.0;
    for &p in probabilities {
        if p > 0.0 {
            acc -= p * p.log2();
        }
    }
    Ok(acc)
}

/// Gini impurity: `1 - sum_i p_i^2`.
pub fn gini(probabilities: &[f64]) -> Result<f64> {
    validate_probabilities(probabilities)?;
    Ok(1.0 - probabilities.iter().map(|p| p * p).sum::<f64>())
}

fn count_labels(labels: &[usize], n_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Impurity drop of a split: `impurity(parent) - weighted mean of child
/// impurities`. Shared by [`information_gain`], [`best_split`], and tree
/// growth so equal partitions produce bit-identical gains.
fn weighted_gain(
    criterion: SplitCriterion,
    parent: &[u64],
    left: &[u64],
    right: &[u64],
) -> f64 {
    let n = parent.iter().sum::<u64>() as f64;
    let nl = left.iter().sum::<u64>() as f64;
    let nr = right.iter().sum::<u64>() as f64;
    criterion.impurity(parent, n)
        - (nl / n) * criterion.impurity(left, nl)
        - (nr / n) * criterion.impurity(right, nr)
}

/// Information gain of splitting `parent_labels` into the two child multisets.
/// The children must partition the parent exactly.
pub fn information_gain(
    parent_labels: &[usize],
    left_labels: &[usize],
    right_labels: &[usize],
    criterion: SplitCriterion,
) -> Result<f64> {
    if parent_labels.is_empty() {
        return Err(Error::Argument("empty parent in information gain".into()));
    }
    let n_classes = parent_labels.iter().copied().max().unwrap_or(0) + 1;
    if left_labels.iter().chain(right_labels).any(|&l| l >= n_classes) {
        return Err(Error::Argument(
            "child labels are not a partition of the parent".into(),
        ));
    }
    let parent = count_labels(parent_labels, n_classes);
    let left = count_labels(left_labels, n_classes);
    let right = count_labels(right_labels, n_classes);
    for c in 0..n_classes {
        if left[c] + right[c] != parent[c] {
            return Err(Error::Argument(
                "child labels are not a partition of the parent".into(),
            ));
        }
    }
    Ok(weighted_gain(criterion, &parent, &left, &right))
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature_index: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Exhaustively evaluate, for each candidate feature, every threshold at the
/// midpoint between consecutive distinct sorted values, and return the split
/// with maximal gain. Ties break toward the lowest feature index, then the
/// lowest threshold. Returns `None` when the node is pure, has fewer than two
/// samples, or no split has positive gain.
pub fn best_split(
    samples: &[Vec<f64>],
    labels: &[usize],
    candidate_features: &[usize],
    criterion: SplitCriterion,
) -> Result<Option<Split>> {
    if samples.len() != labels.len() {
        return Err(Error::Argument(format!(
            "feature rows ({}) and labels ({}) differ in length",
            samples.len(),
            labels.len()
        )));
    }
    let width = samples.first().map_or(0, |r| r.len());
    if samples.iter().any(|r| r.len() != width) {
        return Err(Error::Argument("ragged feature matrix".into()));
    }
    if let Some(&f) = candidate_features.iter().find(|&&f| f >= width) {
        return Err(Error::Argument(format!(
            "candidate feature {f} out of range (width {width})"
        )));
    }
    if samples.len() < 2 {
        return Ok(None);
    }
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let indices: Vec<usize> = (0..samples.len()).collect();
    Ok(best_split_indexed(
        samples,
        labels,
        &indices,
        candidate_features,
        criterion,
        n_classes,
    ))
}

fn best_split_indexed(
    samples: &[Vec<f64>],
    labels: &[usize],
    indices: &[usize],
    candidate_features: &[usize],
    criterion: SplitCriterion,
    n_classes: usize,
) -> Option<Split> {
    let mut parent = vec![0u64; n_classes];
    for &i in indices {
        parent[labels[i]] += 1;
    }
    if parent.iter().filter(|&&c| c > 0).count() <= 1 {
        return None;
    }

    let mut best: Option<Split> = None;
    let mut column: Vec<(f64, usize)> = Vec::with_capacity(indices.len());
    for &f in candidate_features {
        column.clear();
        column.extend(indices.iter().map(|&i| (samples[i][f], labels[i])));
        column.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

        let mut left = vec![0u64; n_classes];
        let mut right = parent.clone();
        for cut in 0..column.len() - 1 {
            let label = column[cut].1;
            left[label] += 1;
            right[label] -= 1;
            let lo = column[cut].0;
            let hi = column[cut + 1].0;
            if lo == hi {
                continue;
            }
            // Keep the threshold strictly below `hi` even if the midpoint
            // rounds up, so `value <= threshold` realizes this partition.
            let mid = (lo + hi) / 2.0;
            let threshold = if mid < hi { mid } else { lo };
            let gain = weighted_gain(criterion, &parent, &left, &right);
            let better = match &best {
                None => true,
                Some(b) => {
                    gain > b.gain
                        || (gain == b.gain
                            && (f < b.feature_index
                                || (f == b.feature_index && threshold < b.threshold)))
                }
            };
            if better {
                best = Some(Split {
                    feature_index: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best.filter(|s| s.gain > 0.0)
}

// ---------------------------------------------------------------------------
// Trees
// ---------------------------------------------------------------------------

/// A fitted decision tree node. Internal nodes route `value <= threshold` to
/// the left child; leaves carry the training class counts and the majority
/// label (lowest index on ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Internal {
        feature_index: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        class_label: usize,
        class_counts: Vec<u64>,
    },
}

impl TreeNode {
    fn leaf(counts: Vec<u64>) -> Self {
        let mut label = 0;
        for (c, &count) in counts.iter().enumerate() {
            if count > counts[label] {
                label = c;
            }
        }
        TreeNode::Leaf {
            class_label: label,
            class_counts: counts,
        }
    }

    fn decide(&self, sample: &[f64]) -> usize {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { class_label, .. } => return *class_label,
                TreeNode::Internal {
                    feature_index,
                    threshold,
                    left,
                    right,
                } => {
                    node = if sample[*feature_index] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }
}

fn grow<R: Rng>(
    samples: &[Vec<f64>],
    labels: &[usize],
    indices: Vec<usize>,
    depth: usize,
    config: &ForestConfig,
    n_classes: usize,
    n_features: usize,
    rng: &mut R,
) -> TreeNode {
    let mut counts = vec![0u64; n_classes];
    for &i in &indices {
        counts[labels[i]] += 1;
    }
    let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
    let depth_capped = config.max_depth.is_some_and(|d| depth >= d);
    if pure || depth_capped || indices.len() < config.min_samples_split {
        return TreeNode::leaf(counts);
    }

    let k = config.max_features.subset_size(n_features);
    let candidates = sample_feature_subset(rng, n_features, k);
    match best_split_indexed(samples, labels, &indices, &candidates, config.criterion, n_classes) {
        None => TreeNode::leaf(counts),
        Some(split) => {
            let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
                .into_iter()
                .partition(|&i| samples[i][split.feature_index] <= split.threshold);
            let left = grow(samples, labels, left_idx, depth + 1, config, n_classes, n_features, rng);
            let right = grow(samples, labels, right_idx, depth + 1, config, n_classes, n_features, rng);
            TreeNode::Internal {
                feature_index: split.feature_index,
                threshold: split.threshold,
                left: Box::new(left),
                right: Box::new(right),
            }
        }
    }
}

/// Draw `k` distinct feature indices by partial Fisher-Yates. Returns all
/// features (without consuming randomness) when `k` covers them.
fn sample_feature_subset<R: Rng>(rng: &mut R, n_features: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n_features).collect();
    if k >= n_features {
        return pool;
    }
    for i in 0..k {
        let j = rng.random_range(i..n_features);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Train a single decision tree on the full sample set, drawing per-node
/// feature subsets from `rng`.
pub fn train_tree<R: Rng>(
    samples: &[Vec<f64>],
    labels: &[usize],
    config: &ForestConfig,
    rng: &mut R,
) -> Result<TreeNode> {
    config.validate()?;
    let width = validate_dataset(samples, labels)?;
    if samples.is_empty() {
        return Err(Error::Training("no samples to train a tree on".into()));
    }
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let indices: Vec<usize> = (0..samples.len()).collect();
    Ok(grow(samples, labels, indices, 0, config, n_classes, width, rng))
}

fn validate_dataset(samples: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if samples.len() != labels.len() {
        return Err(Error::Argument(format!(
            "feature rows ({}) and labels ({}) differ in length",
            samples.len(),
            labels.len()
        )));
    }
    let width = samples.first().map_or(0, |r| r.len());
    if samples.iter().any(|r| r.len() != width) {
        return Err(Error::Argument("ragged feature matrix".into()));
    }
    Ok(width)
}

// ---------------------------------------------------------------------------
// Forest
// ---------------------------------------------------------------------------

/// A trained random forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub(crate) trees: Vec<TreeNode>,
    pub(crate) config: ForestConfig,
    pub(crate) n_classes: usize,
    pub(crate) n_features: usize,
}

impl ForestModel {
    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[TreeNode] {
        &self.trees
    }

    /// Majority vote over the trees. Returns the winning class (lowest index
    /// on ties) and the per-class vote counts, which sum to `n_estimators`.
    pub fn predict(&self, sample: &[f64]) -> Result<(usize, Vec<u32>)> {
        if sample.len() != self.n_features {
            return Err(Error::Argument(format!(
                "sample length {} != n_features {}",
                sample.len(),
                self.n_features
            )));
        }
        let mut votes = vec![0u32; self.n_classes];
        for tree in &self.trees {
            votes[tree.decide(sample)] += 1;
        }
        let mut label = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[label] {
                label = c;
            }
        }
        Ok((label, votes))
    }

    /// Check structural invariants after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.trees.len() != self.config.n_estimators {
            return Err(Error::Config(format!(
                "forest holds {} trees but n_estimators is {}",
                self.trees.len(),
                self.config.n_estimators
            )));
        }
        for tree in &self.trees {
            let mut stack = vec![tree];
            while let Some(node) = stack.pop() {
                match node {
                    TreeNode::Internal {
                        feature_index,
                        left,
                        right,
                        ..
                    } => {
                        if *feature_index >= self.n_features {
                            return Err(Error::Config(format!(
                                "tree references feature {feature_index} >= n_features {}",
                                self.n_features
                            )));
                        }
                        stack.push(left);
                        stack.push(right);
                    }
                    TreeNode::Leaf {
                        class_label,
                        class_counts,
                    } => {
                        if *class_label >= self.n_classes || class_counts.len() != self.n_classes {
                            return Err(Error::Config(
                                "leaf labels inconsistent with n_classes".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: ForestModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }
}

/// Train a forest of `config.n_estimators` trees. Each tree consumes an
/// independent random stream derived from `config.seed` and its tree index,
/// so training is deterministic and parallelizable.
pub fn train_forest(
    samples: &[Vec<f64>],
    labels: &[usize],
    config: &ForestConfig,
) -> Result<ForestModel> {
    config.validate()?;
    let width = validate_dataset(samples, labels)?;
    if samples.len() < 2 {
        return Err(Error::Training(format!(
            "need at least 2 samples to train a forest, got {}",
            samples.len()
        )));
    }
    if width == 0 {
        return Err(Error::Training("samples have no features".into()));
    }
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::Training(
            "all samples share one class; a classifier needs at least 2".into(),
        ));
    }

    let n = samples.len();
    let trees: Vec<TreeNode> = (0..config.n_estimators)
        .into_par_iter()
        .map(|tree_index| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, tree_index as u64));
            let indices: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow(samples, labels, indices, 0, config, n_classes, width, &mut rng)
        })
        .collect();

    Ok(ForestModel {
        trees,
        config: config.clone(),
        n_classes,
        n_features: width,
    })
}

// ===========================================================================
// Tests
// ===========================================================================
