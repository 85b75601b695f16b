//! Random forests: bagged decision trees with per-node feature subsampling.
//!
//! Classification trees split on Gini impurity and vote by majority;
//! regression trees split on variance reduction and average their leaf
//! means. Candidate thresholds are midpoints between consecutive distinct
//! feature values; impurity ties resolve to the lowest feature index, then
//! the lowest threshold, so a (seed, data, params) triple fixes the forest
//! exactly. Trees train in parallel on per-tree derived seeds, which keeps
//! the result independent of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::QuantizedPog;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestTask {
    /// Targets are class indices `0..n_classes` (quantized occupancy levels
    /// in the prediction pipelines).
    Classification { n_classes: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split; `None` means ceil(sqrt(d)).
    pub mtry: Option<usize>,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub bootstrap: bool,
    pub rng_seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            mtry: None,
            max_depth: None,
            min_samples_leaf: 1,
            bootstrap: true,
            rng_seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig("a forest needs at least one tree".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::InvalidConfig("min_samples_leaf must be at least 1".into()));
        }
        if let Some(m) = self.mtry {
            if m == 0 || m > n_features {
                return Err(Error::InvalidConfig(format!(
                    "mtry {m} outside 1..={n_features}"
                )));
            }
        }
        Ok(())
    }

    fn effective_mtry(&self, n_features: usize) -> usize {
        self.mtry.unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize).max(1)
    }
}

/// Nodes are stored pre-order in a flat vec; children point forward.
#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    /// Training-sample counts per class at this leaf.
    ClassLeaf { histogram: Vec<u32> },
    ValueLeaf { value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn leaf_for(&self, x: &[f64]) -> &TreeNode {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
                leaf => return leaf,
            }
        }
    }

    /// Class vote of this tree: leaf histogram argmax, ties to the lower
    /// class.
    fn vote(&self, x: &[f64]) -> usize {
        match self.leaf_for(x) {
            TreeNode::ClassLeaf { histogram } => argmax_low(histogram),
            _ => unreachable!("classification tree with a value leaf"),
        }
    }

    fn value(&self, x: &[f64]) -> f64 {
        match self.leaf_for(x) {
            TreeNode::ValueLeaf { value } => *value,
            _ => unreachable!("regression tree with a class leaf"),
        }
    }
}

/// First index of the maximum; for class votes this is the tie rule
/// (lower occupancy level wins).
fn argmax_low(counts: &[u32]) -> usize {
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<Tree>,
    pub task: ForestTask,
    pub n_features: usize,
    pub params: ForestParams,
}

impl RandomForest {
    pub fn validate(&self) -> Result<()> {
        if self.trees.len() != self.params.n_trees {
            return Err(Error::InvalidConfig(format!(
                "forest claims {} trees but holds {}",
                self.params.n_trees,
                self.trees.len()
            )));
        }
        self.params.validate(self.n_features)?;
        for tree in &self.trees {
            if tree.nodes.is_empty() {
                return Err(Error::InvalidConfig("empty tree".into()));
            }
            for (at, node) in tree.nodes.iter().enumerate() {
                match node {
                    TreeNode::Split { feature, threshold, left, right } => {
                        if *feature >= self.n_features {
                            return Err(Error::InvalidConfig(format!(
                                "split feature {feature} out of range"
                            )));
                        }
                        if !threshold.is_finite() {
                            return Err(Error::NonFinite("split threshold"));
                        }
                        // Forward-only children rule out cycles.
                        if *left <= at || *right <= at || *left >= tree.nodes.len() || *right >= tree.nodes.len() {
                            return Err(Error::InvalidConfig(format!(
                                "bad child links at node {at}"
                            )));
                        }
                    }
                    TreeNode::ClassLeaf { histogram } => match self.task {
                        ForestTask::Classification { n_classes } => {
                            if histogram.len() != n_classes {
                                return Err(Error::DimensionMismatch {
                                    context: "leaf histogram",
                                    expected: n_classes,
                                    got: histogram.len(),
                                });
                            }
                            if histogram.iter().all(|&c| c == 0) {
                                return Err(Error::InvalidConfig("empty leaf".into()));
                            }
                        }
                        ForestTask::Regression => {
                            return Err(Error::InvalidConfig(
                                "class leaf in a regression forest".into(),
                            ))
                        }
                    },
                    TreeNode::ValueLeaf { value } => {
                        if matches!(self.task, ForestTask::Classification { .. }) {
                            return Err(Error::InvalidConfig(
                                "value leaf in a classification forest".into(),
                            ));
                        }
                        if !value.is_finite() {
                            return Err(Error::NonFinite("leaf value"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                context: "forest input",
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Majority vote over trees; ties go to the lower class.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        let ForestTask::Classification { n_classes } = self.task else {
            return Err(Error::InvalidArgument("class prediction on a regression forest".into()));
        };
        self.check_input(x)?;
        let mut votes = vec![0u32; n_classes];
        for tree in &self.trees {
            votes[tree.vote(x)] += 1;
        }
        Ok(argmax_low(&votes))
    }

    /// Mean of the trees' leaf values.
    pub fn predict_regression(&self, x: &[f64]) -> Result<f64> {
        if self.task != ForestTask::Regression {
            return Err(Error::InvalidArgument("value prediction on a classification forest".into()));
        }
        self.check_input(x)?;
        let sum: f64 = self.trees.iter().map(|t| t.value(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }
}

/// Out-of-bag quality of a freshly trained forest. Samples that every tree
/// saw in its bootstrap carry no score; with bootstrap off nothing does.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OobReport {
    /// Samples with at least one out-of-bag vote.
    pub n_scored: usize,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
}

enum Targets<'a> {
    Classes { y: &'a [u8], n_classes: usize },
    Values(&'a [f64]),
}

impl Targets<'_> {
    fn all_equal(&self, idx: &[u32]) -> bool {
        match self {
            Targets::Classes { y, .. } => idx.iter().all(|&i| y[i as usize] == y[idx[0] as usize]),
            Targets::Values(y) => idx.iter().all(|&i| y[i as usize] == y[idx[0] as usize]),
        }
    }

    fn leaf(&self, idx: &[u32]) -> TreeNode {
        match self {
            Targets::Classes { y, n_classes } => {
                let mut histogram = vec![0u32; *n_classes];
                for &i in idx {
                    histogram[y[i as usize] as usize] += 1;
                }
                TreeNode::ClassLeaf { histogram }
            }
            Targets::Values(y) => {
                let sum: f64 = idx.iter().map(|&i| y[i as usize]).sum();
                TreeNode::ValueLeaf { value: sum / idx.len() as f64 }
            }
        }
    }
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    score: f64,
}

/// Best split on one feature under the sweep score (higher is better):
/// Σ c²/n per side for Gini, (Σy)²/n per side for variance reduction.
/// Maximizing either is minimizing the weighted child impurity.
fn best_split_on_feature(
    x: &[Vec<f64>],
    targets: &Targets<'_>,
    idx: &[u32],
    feature: usize,
    min_leaf: usize,
    sorted: &mut Vec<u32>,
) -> Option<(f64, f64)> {
    sorted.clear();
    sorted.extend_from_slice(idx);
    sorted.sort_unstable_by(|&a, &b| {
        x[a as usize][feature].partial_cmp(&x[b as usize][feature]).unwrap()
    });
    let m = sorted.len();
    let mut best: Option<(f64, f64)> = None;

    match targets {
        Targets::Classes { y, n_classes } => {
            let mut total = vec![0u32; *n_classes];
            for &i in sorted.iter() {
                total[y[i as usize] as usize] += 1;
            }
            let mut left = vec![0u32; *n_classes];
            let mut sq_left = 0.0f64;
            let mut sq_total = 0.0f64;
            for &c in &total {
                sq_total += (c as f64) * (c as f64);
            }
            let mut sq_right = sq_total;
            for k in 0..m - 1 {
                let cls = y[sorted[k] as usize] as usize;
                // Incremental squared-count update when class cls gains one
                // on the left and loses one on the right.
                sq_left += 2.0 * left[cls] as f64 + 1.0;
                let r = total[cls] - left[cls];
                sq_right -= 2.0 * r as f64 - 1.0;
                left[cls] += 1;
                let (a, b) = (x[sorted[k] as usize][feature], x[sorted[k + 1] as usize][feature]);
                if a == b {
                    continue;
                }
                let n_left = k + 1;
                let n_right = m - n_left;
                if n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                let t = 0.5 * (a + b);
                // Guard against the midpoint rounding onto b, which would
                // send b's side the wrong way under the ≤ test.
                if t >= b {
                    continue;
                }
                let score = sq_left / n_left as f64 + sq_right / n_right as f64;
                if best.map_or(true, |(s, _)| score > s) {
                    best = Some((score, t));
                }
            }
        }
        Targets::Values(y) => {
            let total: f64 = sorted.iter().map(|&i| y[i as usize]).sum();
            let mut sum_left = 0.0;
            for k in 0..m - 1 {
                sum_left += y[sorted[k] as usize];
                let (a, b) = (x[sorted[k] as usize][feature], x[sorted[k + 1] as usize][feature]);
                if a == b {
                    continue;
                }
                let n_left = k + 1;
                let n_right = m - n_left;
                if n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                let t = 0.5 * (a + b);
                if t >= b {
                    continue;
                }
                let sum_right = total - sum_left;
                let score =
                    sum_left * sum_left / n_left as f64 + sum_right * sum_right / n_right as f64;
                if best.map_or(true, |(s, _)| score > s) {
                    best = Some((score, t));
                }
            }
        }
    }
    best.map(|(score, t)| (t, score))
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    targets: &'a Targets<'a>,
    mtry: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
    nodes: Vec<TreeNode>,
    /// Permutation of 0..d reused for per-node feature draws.
    feature_bag: Vec<usize>,
    sort_buf: Vec<u32>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, idx: Vec<u32>, depth: usize, rng: &mut ChaCha12Rng) -> usize {
        let at = self.nodes.len();
        self.nodes.push(self.targets.leaf(&idx));

        let depth_ok = self.max_depth.map_or(true, |d| depth < d);
        if !depth_ok || idx.len() < 2 * self.min_leaf || self.targets.all_equal(&idx) {
            return at;
        }

        // mtry features without replacement; evaluation order is sorted so
        // impurity ties resolve to the lowest feature, lowest threshold.
        let d = self.feature_bag.len();
        for k in 0..self.mtry {
            let j = rng.random_range(k..d);
            self.feature_bag.swap(k, j);
        }
        self.feature_bag[..self.mtry].sort_unstable();

        let mut choice: Option<SplitChoice> = None;
        for fk in 0..self.mtry {
            let feature = self.feature_bag[fk];
            let mut sorted = std::mem::take(&mut self.sort_buf);
            let found = best_split_on_feature(
                self.x,
                self.targets,
                &idx,
                feature,
                self.min_leaf,
                &mut sorted,
            );
            self.sort_buf = sorted;
            if let Some((threshold, score)) = found {
                if choice.as_ref().map_or(true, |c| score > c.score) {
                    choice = Some(SplitChoice { feature, threshold, score });
                }
            }
        }
        let Some(choice) = choice else {
            return at;
        };

        let (mut left_idx, mut right_idx) = (Vec::new(), Vec::new());
        for &i in &idx {
            if self.x[i as usize][choice.feature] <= choice.threshold {
                left_idx.push(i);
            } else {
                right_idx.push(i);
            }
        }
        let left = self.build(left_idx, depth + 1, rng);
        let right = self.build(right_idx, depth + 1, rng);
        self.nodes[at] = TreeNode::Split {
            feature: choice.feature,
            threshold: choice.threshold,
            left,
            right,
        };
        at
    }
}

fn grow_tree(
    x: &[Vec<f64>],
    targets: &Targets<'_>,
    params: &ForestParams,
    tree_seed: u64,
) -> (Tree, Vec<bool>) {
    let n = x.len();
    let mut rng = ChaCha12Rng::seed_from_u64(tree_seed);
    let idx: Vec<u32> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n) as u32).collect()
    } else {
        (0..n as u32).collect()
    };
    let mut in_bag = vec![false; n];
    for &i in &idx {
        in_bag[i as usize] = true;
    }
    let mut builder = TreeBuilder {
        x,
        targets,
        mtry: params.effective_mtry(x[0].len()),
        min_leaf: params.min_samples_leaf,
        max_depth: params.max_depth,
        nodes: Vec::new(),
        feature_bag: (0..x[0].len()).collect(),
        sort_buf: Vec::new(),
    };
    builder.build(idx, 0, &mut rng);
    (Tree { nodes: builder.nodes }, in_bag)
}

fn check_training_input(x: &[Vec<f64>], n_targets: usize, params: &ForestParams) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if x.len() != n_targets {
        return Err(Error::DimensionMismatch {
            context: "forest targets",
            expected: x.len(),
            got: n_targets,
        });
    }
    let d = x[0].len();
    if d == 0 {
        return Err(Error::InvalidArgument("training vectors have no features".into()));
    }
    for row in x {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                context: "forest training row",
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forest training features"));
        }
    }
    params.validate(d)?;
    Ok(d)
}

fn train_trees(
    x: &[Vec<f64>],
    targets: &Targets<'_>,
    params: &ForestParams,
) -> Vec<(Tree, Vec<bool>)> {
    (0..params.n_trees)
        .into_par_iter()
        .map(|t| grow_tree(x, targets, params, seed::derive(params.rng_seed, t as u64)))
        .collect()
}

pub fn train_classifier(x: &[Vec<f64>], y: &[u8], params: &ForestParams) -> Result<RandomForest> {
    Ok(train_classifier_with_oob(x, y, params)?.0)
}

/// Train a classification forest and score it on the out-of-bag samples.
pub fn train_classifier_with_oob(
    x: &[Vec<f64>],
    y: &[u8],
    params: &ForestParams,
) -> Result<(RandomForest, OobReport)> {
    let n_features = check_training_input(x, y.len(), params)?;
    let n_classes = y.iter().copied().max().unwrap() as usize + 1;
    let targets = Targets::Classes { y, n_classes };
    let grown = train_trees(x, &targets, params);

    let mut votes = vec![0u32; x.len() * n_classes];
    for (tree, in_bag) in &grown {
        for (i, bagged) in in_bag.iter().enumerate() {
            if !bagged {
                votes[i * n_classes + tree.vote(&x[i])] += 1;
            }
        }
    }
    let mut scored = 0usize;
    let mut correct = 0usize;
    for (i, chunk) in votes.chunks(n_classes).enumerate() {
        if chunk.iter().any(|&c| c > 0) {
            scored += 1;
            if argmax_low(chunk) == y[i] as usize {
                correct += 1;
            }
        }
    }
    let report = OobReport {
        n_scored: scored,
        accuracy: (scored > 0).then(|| correct as f64 / scored as f64),
        mse: None,
    };
    let forest = RandomForest {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        task: ForestTask::Classification { n_classes },
        n_features,
        params: params.clone(),
    };
    Ok((forest, report))
}

pub fn train_regressor(x: &[Vec<f64>], y: &[f64], params: &ForestParams) -> Result<RandomForest> {
    Ok(train_regressor_with_oob(x, y, params)?.0)
}

pub fn train_regressor_with_oob(
    x: &[Vec<f64>],
    y: &[f64],
    params: &ForestParams,
) -> Result<(RandomForest, OobReport)> {
    let n_features = check_training_input(x, y.len(), params)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression targets"));
    }
    let targets = Targets::Values(y);
    let grown = train_trees(x, &targets, params);

    let mut sums = vec![0.0f64; x.len()];
    let mut counts = vec![0u32; x.len()];
    for (tree, in_bag) in &grown {
        for (i, bagged) in in_bag.iter().enumerate() {
            if !bagged {
                sums[i] += tree.value(&x[i]);
                counts[i] += 1;
            }
        }
    }
    let mut scored = 0usize;
    let mut sq = 0.0f64;
    for i in 0..x.len() {
        if counts[i] > 0 {
            scored += 1;
            let err = sums[i] / counts[i] as f64 - y[i];
            sq += err * err;
        }
    }
    let report = OobReport {
        n_scored: scored,
        accuracy: None,
        mse: (scored > 0).then(|| sq / scored as f64),
    };
    let forest = RandomForest {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        task: ForestTask::Regression,
        n_features,
        params: params.clone(),
    };
    Ok((forest, report))
}

/// One classification forest per grid cell, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ForestGrid {
    pub rows: usize,
    pub cols: usize,
    pub forests: Vec<RandomForest>,
}

impl ForestGrid {
    pub fn forest(&self, i: usize, j: usize) -> &RandomForest {
        &self.forests[i * self.cols + j]
    }

    pub fn validate(&self) -> Result<()> {
        if self.forests.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch {
                context: "forest grid",
                expected: self.rows * self.cols,
                got: self.forests.len(),
            });
        }
        for f in &self.forests {
            f.validate()?;
        }
        Ok(())
    }

    /// Class prediction of every cell for one input, row-major.
    pub fn predict_classes(&self, x: &[f64]) -> Result<Vec<u8>> {
        self.forests.iter().map(|f| f.predict_class(x).map(|c| c as u8)).collect()
    }
}

/// Train one classification forest per cell: forest (i, j) maps a latent
/// code to that cell's quantized level. Cells train in parallel on seeds
/// derived from (seed, i, j).
pub fn train_percell_forests(
    latents: &[Vec<f64>],
    pogs: &[QuantizedPog],
    params: &ForestParams,
) -> Result<ForestGrid> {
    if latents.is_empty() || latents.len() != pogs.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching nonempty training sets, got {} latents and {} grids",
            latents.len(),
            pogs.len()
        )));
    }
    let cfg = pogs[0].config();
    for p in pogs {
        cfg.check_shape(p.config())?;
    }
    let (rows, cols) = (cfg.rows, cfg.cols);
    let forests: Vec<RandomForest> = (0..rows * cols)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / cols, cell % cols);
            let y: Vec<u8> = pogs.iter().map(|p| p.classes()[cell]).collect();
            let cell_params = ForestParams {
                rng_seed: seed::derive(seed::derive(params.rng_seed, i as u64), j as u64),
                ..params.clone()
            };
            train_classifier(latents, &y, &cell_params)
        })
        .collect::<Result<_>>()?;
    Ok(ForestGrid { rows, cols, forests })
}

/// One regression forest per output dimension: forest j maps an input code
/// to output code component j. Seeds derive from (seed, j).
pub fn train_perlatent_forests(
    latents_in: &[Vec<f64>],
    latents_out: &[Vec<f64>],
    params: &ForestParams,
) -> Result<Vec<RandomForest>> {
    if latents_in.is_empty() || latents_in.len() != latents_out.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching nonempty training sets, got {} inputs and {} outputs",
            latents_in.len(),
            latents_out.len()
        )));
    }
    let q_out = latents_out[0].len();
    for row in latents_out {
        if row.len() != q_out {
            return Err(Error::DimensionMismatch {
                context: "output latent row",
                expected: q_out,
                got: row.len(),
            });
        }
    }
    (0..q_out)
        .into_par_iter()
        .map(|j| {
            let y: Vec<f64> = latents_out.iter().map(|row| row[j]).collect();
            let dim_params =
                ForestParams { rng_seed: seed::derive(params.rng_seed, j as u64), ..params.clone() };
            train_regressor(latents_in, &y, &dim_params)
        })
        .collect()
}

pub const FOREST_MAGIC: &[u8; 4] = b"FRST";
pub const FOREST_GRID_MAGIC: &[u8; 4] = b"FGRD";
pub const FOREST_LIST_MAGIC: &[u8; 4] = b"FLST";
pub const FOREST_VERSION: u16 = 1;

const UNLIMITED: u32 = u32::MAX;

fn write_forest_body(w: &mut Writer, f: &RandomForest) {
    let (task_tag, n_classes) = match f.task {
        ForestTask::Classification { n_classes } => (0u8, n_classes as u32),
        ForestTask::Regression => (1u8, 0),
    };
    w.u8(task_tag);
    w.u32(n_classes);
    w.u32(f.n_features as u32);
    w.u32(f.params.n_trees as u32);
    w.u32(f.params.mtry.map(|m| m as u32).unwrap_or(0));
    w.u32(f.params.max_depth.map(|d| d as u32).unwrap_or(UNLIMITED));
    w.u32(f.params.min_samples_leaf as u32);
    w.u8(f.params.bootstrap as u8);
    w.u64(f.params.rng_seed);
    for tree in &f.trees {
        w.u32(tree.nodes.len() as u32);
        for node in &tree.nodes {
            match node {
                TreeNode::Split { feature, threshold, left, right } => {
                    w.u8(0);
                    w.u32(*feature as u32);
                    w.f64(*threshold);
                    w.u32(*left as u32);
                    w.u32(*right as u32);
                }
                TreeNode::ClassLeaf { histogram } => {
                    w.u8(1);
                    for &c in histogram {
                        w.u32(c);
                    }
                }
                TreeNode::ValueLeaf { value } => {
                    w.u8(2);
                    w.f64(*value);
                }
            }
        }
    }
}

fn read_forest_body(r: &mut Reader<'_>) -> Result<RandomForest> {
    let task_tag = r.u8()?;
    let n_classes = r.count(1 << 16, "class count")?;
    let task = match task_tag {
        0 => {
            if n_classes == 0 {
                return Err(r.error("classification forest with zero classes"));
            }
            ForestTask::Classification { n_classes }
        }
        1 => ForestTask::Regression,
        t => return Err(r.error(format!("unknown task tag {t}"))),
    };
    let n_features = r.count(1 << 24, "feature count")?;
    let n_trees = r.count(1 << 20, "tree count")?;
    let mtry = match r.u32()? {
        0 => None,
        m => Some(m as usize),
    };
    let max_depth = match r.u32()? {
        UNLIMITED => None,
        d => Some(d as usize),
    };
    let min_samples_leaf = r.count(1 << 31, "min_samples_leaf")?;
    let bootstrap = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(r.error(format!("bad bootstrap flag {b}"))),
    };
    let rng_seed = r.u64()?;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let n_nodes = r.count(1 << 28, "node count")?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            nodes.push(match r.u8()? {
                0 => TreeNode::Split {
                    feature: r.u32()? as usize,
                    threshold: r.f64()?,
                    left: r.u32()? as usize,
                    right: r.u32()? as usize,
                },
                1 => {
                    let mut histogram = Vec::with_capacity(n_classes);
                    for _ in 0..n_classes {
                        histogram.push(r.u32()?);
                    }
                    TreeNode::ClassLeaf { histogram }
                }
                2 => TreeNode::ValueLeaf { value: r.f64()? },
                t => return Err(r.error(format!("unknown node tag {t}"))),
            });
        }
        trees.push(Tree { nodes });
    }
    let forest = RandomForest {
        trees,
        task,
        n_features,
        params: ForestParams { n_trees, mtry, max_depth, min_samples_leaf, bootstrap, rng_seed },
    };
    forest.validate()?;
    Ok(forest)
}

pub fn forest_to_bytes(f: &RandomForest) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(FOREST_MAGIC);
    w.u16(FOREST_VERSION);
    write_forest_body(&mut w, f);
    w.into_bytes()
}

pub fn read_forest_bytes(data: &[u8]) -> Result<RandomForest> {
    let mut r = Reader::new(data, "forest file");
    r.magic(FOREST_MAGIC)?;
    let version = r.u16()?;
    if version != FOREST_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let forest = read_forest_body(&mut r)?;
    r.finish()?;
    Ok(forest)
}

pub fn forest_grid_to_bytes(grid: &ForestGrid) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(FOREST_GRID_MAGIC);
    w.u16(FOREST_VERSION);
    w.u32(grid.rows as u32);
    w.u32(grid.cols as u32);
    for f in &grid.forests {
        write_forest_body(&mut w, f);
    }
    w.into_bytes()
}

pub fn read_forest_grid_bytes(data: &[u8]) -> Result<ForestGrid> {
    let mut r = Reader::new(data, "forest grid file");
    r.magic(FOREST_GRID_MAGIC)?;
    let version = r.u16()?;
    if version != FOREST_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let rows = r.count(1 << 16, "rows")?;
    let cols = r.count(1 << 16, "cols")?;
    let mut forests = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        forests.push(read_forest_body(&mut r)?);
    }
    r.finish()?;
    let grid = ForestGrid { rows, cols, forests };
    grid.validate()?;
    Ok(grid)
}

pub fn forest_list_to_bytes(forests: &[RandomForest]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(FOREST_LIST_MAGIC);
    w.u16(FOREST_VERSION);
    w.u32(forests.len() as u32);
    for f in forests {
        write_forest_body(&mut w, f);
    }
    w.into_bytes()
}

pub fn read_forest_list_bytes(data: &[u8]) -> Result<Vec<RandomForest>> {
    let mut r = Reader::new(data, "forest list file");
    r.magic(FOREST_LIST_MAGIC)?;
    let version = r.u16()?;
    if version != FOREST_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let count = r.count(1 << 20, "forest count")?;
    let mut forests = Vec::with_capacity(count);
    for _ in 0..count {
        let f = read_forest_body(&mut r)?;
        f.validate()?;
        forests.push(f);
    }
    r.finish()?;
    Ok(forests)
}

pub fn save_forest_grid(path: &Path, grid: &ForestGrid) -> Result<()> {
    std::fs::write(path, forest_grid_to_bytes(grid))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_forest_grid(path: &Path) -> Result<ForestGrid> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_forest_grid_bytes(&data)
}

pub fn save_forest_list(path: &Path, forests: &[RandomForest]) -> Result<()> {
    std::fs::write(path, forest_list_to_bytes(forests))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_forest_list(path: &Path) -> Result<Vec<RandomForest>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_forest_list_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridConfig;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_points(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
    }

    fn memorizer(seed: u64) -> ForestParams {
        ForestParams {
            n_trees: 1,
            mtry: Some(usize::MAX),
            max_depth: None,
            min_samples_leaf: 1,
            bootstrap: false,
            rng_seed: seed,
        }
    }

    // mtry == d for whatever d the data has.
    fn memorizer_for(d: usize, seed: u64) -> ForestParams {
        ForestParams { mtry: Some(d), ..memorizer(seed) }
    }

    #[test]
    fn single_unbagged_tree_memorizes_distinct_points() {
        let mut r = rng(1);
        let x = random_points(&mut r, 120, 3);
        let y: Vec<u8> = (0..120).map(|_| r.random_range(0..4u8) as u8).collect();
        let forest = train_classifier(&x, &y, &memorizer_for(3, 0)).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(forest.predict_class(xi).unwrap(), yi as usize);
        }
    }

    #[test]
    fn regression_memorizes_too() {
        let mut r = rng(2);
        let x = random_points(&mut r, 80, 2);
        let y: Vec<f64> = (0..80).map(|_| r.random_range(-1.0..1.0)).collect();
        let forest = train_regressor(&x, &y, &memorizer_for(2, 0)).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert!((forest.predict_regression(xi).unwrap() - yi).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_target_means_constant_prediction() {
        let mut r = rng(3);
        let x = random_points(&mut r, 40, 3);
        let yc = vec![4u8; 40];
        let cf = train_classifier(&x, &yc, &ForestParams { n_trees: 7, ..Default::default() }).unwrap();
        let yv = vec![0.625f64; 40];
        let rf = train_regressor(&x, &yv, &ForestParams { n_trees: 7, ..Default::default() }).unwrap();
        for probe in random_points(&mut r, 10, 3) {
            assert_eq!(cf.predict_class(&probe).unwrap(), 4);
            assert_eq!(rf.predict_regression(&probe).unwrap(), 0.625);
        }
        // Constant targets collapse every tree to its root leaf.
        assert!(cf.trees.iter().all(|t| t.nodes.len() == 1));
    }

    #[test]
    fn xor_is_learned_with_out_of_bag_headroom() {
        let mut r = rng(4);
        let x = random_points(&mut r, 200, 2);
        let y: Vec<u8> =
            x.iter().map(|p| u8::from((p[0] > 0.5) != (p[1] > 0.5))).collect();
        let params = ForestParams { n_trees: 50, rng_seed: 9, ..Default::default() };
        let (forest, oob) = train_classifier_with_oob(&x, &y, &params).unwrap();
        assert!(oob.n_scored > 150, "almost every sample should be OOB somewhere");
        let acc = oob.accuracy.unwrap();
        assert!(acc > 0.95, "out-of-bag accuracy {acc}");
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(xi, &yi)| forest.predict_class(xi).unwrap() == yi as usize)
            .count();
        assert!(correct as f64 / 200.0 > 0.98);
    }

    #[test]
    fn class_votes_match_a_manual_tree_walk() {
        let mut r = rng(5);
        let x = random_points(&mut r, 150, 4);
        let y: Vec<u8> = x.iter().map(|p| ((p[0] + p[1] * 2.0) * 2.5) as u8).collect();
        let params = ForestParams { n_trees: 17, rng_seed: 5, ..Default::default() };
        let forest = train_classifier(&x, &y, &params).unwrap();
        let ForestTask::Classification { n_classes } = forest.task else { unreachable!() };

        for probe in random_points(&mut r, 30, 4) {
            // Independent vote count: walk each tree by hand.
            let mut votes = vec![0u32; n_classes];
            for tree in &forest.trees {
                let mut at = 0usize;
                let leaf = loop {
                    match &tree.nodes[at] {
                        TreeNode::Split { feature, threshold, left, right } => {
                            at = if probe[*feature] <= *threshold { *left } else { *right };
                        }
                        TreeNode::ClassLeaf { histogram } => break histogram,
                        TreeNode::ValueLeaf { .. } => unreachable!(),
                    }
                };
                let mut best = 0;
                for k in 1..leaf.len() {
                    if leaf[k] > leaf[best] {
                        best = k;
                    }
                }
                votes[best] += 1;
            }
            let mut want = 0;
            for k in 1..votes.len() {
                if votes[k] > votes[want] {
                    want = k;
                }
            }
            assert_eq!(forest.predict_class(&probe).unwrap(), want);
        }
    }

    #[test]
    fn regression_matches_a_summation_oracle() {
        let mut r = rng(6);
        let x = random_points(&mut r, 100, 3);
        let y: Vec<f64> = x.iter().map(|p| p[0] - 2.0 * p[2]).collect();
        let params = ForestParams { n_trees: 11, rng_seed: 3, ..Default::default() };
        let forest = train_regressor(&x, &y, &params).unwrap();
        for probe in random_points(&mut r, 20, 3) {
            let mut sum = 0.0;
            for tree in &forest.trees {
                let mut at = 0usize;
                sum += loop {
                    match &tree.nodes[at] {
                        TreeNode::Split { feature, threshold, left, right } => {
                            at = if probe[*feature] <= *threshold { *left } else { *right };
                        }
                        TreeNode::ValueLeaf { value } => break *value,
                        TreeNode::ClassLeaf { .. } => unreachable!(),
                    }
                };
            }
            let want = sum / forest.trees.len() as f64;
            assert!((forest.predict_regression(&probe).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_stays_inside_the_training_range() {
        let mut r = rng(7);
        for trial in 0..5 {
            let x = random_points(&mut r, 60, 2);
            let y: Vec<f64> = (0..60).map(|_| r.random_range(-3.0..7.0)).collect();
            let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
            let params = ForestParams { n_trees: 9, rng_seed: trial, ..Default::default() };
            let forest = train_regressor(&x, &y, &params).unwrap();
            for probe in random_points(&mut r, 25, 2) {
                let p = forest.predict_regression(&probe).unwrap();
                assert!(p >= lo - 1e-12 && p <= hi + 1e-12, "{p} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn vote_ties_prefer_the_lower_level() {
        // Two single-leaf trees voting classes 2 (0.4) and 3 (0.6).
        let leaf = |class: usize| {
            let mut histogram = vec![0u32; 6];
            histogram[class] = 1;
            Tree { nodes: vec![TreeNode::ClassLeaf { histogram }] }
        };
        let forest = RandomForest {
            trees: vec![leaf(3), leaf(2)],
            task: ForestTask::Classification { n_classes: 6 },
            n_features: 1,
            params: ForestParams { n_trees: 2, bootstrap: false, ..Default::default() },
        };
        forest.validate().unwrap();
        assert_eq!(forest.predict_class(&[0.0]).unwrap(), 2);

        // Same rule inside a leaf histogram.
        let tied = RandomForest {
            trees: vec![Tree {
                nodes: vec![TreeNode::ClassLeaf { histogram: vec![0, 5, 5, 0, 0, 0] }],
            }],
            task: ForestTask::Classification { n_classes: 6 },
            n_features: 1,
            params: ForestParams { n_trees: 1, bootstrap: false, ..Default::default() },
        };
        assert_eq!(tied.predict_class(&[0.0]).unwrap(), 1);
    }

    #[test]
    fn split_ties_prefer_lowest_feature_then_lowest_threshold() {
        // Feature 1 duplicates feature 0, so every split scores identically
        // on both; the tree must choose feature 0.
        let x: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
        let y = vec![0u8, 0, 1, 1];
        let forest = train_classifier(&x, &y, &memorizer_for(2, 0)).unwrap();
        match &forest.trees[0].nodes[0] {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 1.5);
            }
            other => panic!("expected a split at the root, got {other:?}"),
        }

        // Symmetric labels: thresholds 0.5 and 1.5 score the same, so the
        // lower one wins.
        let x1: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![2.0]];
        let y1 = vec![0u8, 1, 0];
        let forest = train_classifier(&x1, &y1, &memorizer_for(1, 0)).unwrap();
        match &forest.trees[0].nodes[0] {
            TreeNode::Split { threshold, .. } => assert_eq!(*threshold, 0.5),
            other => panic!("expected a split at the root, got {other:?}"),
        }
    }

    #[test]
    fn min_samples_leaf_is_respected() {
        let mut r = rng(8);
        let x = random_points(&mut r, 90, 3);
        let y: Vec<u8> = (0..90).map(|_| r.random_range(0..3u8)).collect();
        let params = ForestParams {
            n_trees: 5,
            min_samples_leaf: 7,
            rng_seed: 2,
            ..Default::default()
        };
        let forest = train_classifier(&x, &y, &params).unwrap();
        for tree in &forest.trees {
            for node in &tree.nodes {
                if let TreeNode::ClassLeaf { histogram } = node {
                    let total: u32 = histogram.iter().sum();
                    assert!(total >= 7, "leaf with only {total} samples");
                }
            }
        }
    }

    #[test]
    fn max_depth_zero_is_a_single_leaf() {
        let mut r = rng(9);
        let x = random_points(&mut r, 30, 2);
        let y: Vec<u8> = (0..30).map(|k| (k % 2) as u8).collect();
        let params = ForestParams {
            n_trees: 3,
            max_depth: Some(0),
            ..Default::default()
        };
        let forest = train_classifier(&x, &y, &params).unwrap();
        assert!(forest.trees.iter().all(|t| t.nodes.len() == 1));
    }

    #[test]
    fn percell_grid_learns_a_constant_cell() {
        let cfg = GridConfig::ego_centered(2, 2, 1.0, 1);
        let mut r = rng(10);
        let latents = random_points(&mut r, 25, 4);
        let pogs: Vec<QuantizedPog> = (0..25)
            .map(|k| {
                // Cell (0,0) always level 5 (probability 1); others vary.
                let classes = vec![5u8, (k % 6) as u8, ((k + 2) % 6) as u8, 0];
                QuantizedPog::from_classes(cfg.clone(), 1.0, classes).unwrap()
            })
            .collect();
        let params = ForestParams { n_trees: 4, rng_seed: 11, ..Default::default() };
        let grid = train_percell_forests(&latents, &pogs, &params).unwrap();
        assert_eq!(grid.rows, 2);
        assert_eq!(grid.cols, 2);
        assert_eq!(grid.forests.len(), 4);
        for probe in random_points(&mut r, 8, 4) {
            let classes = grid.predict_classes(&probe).unwrap();
            assert_eq!(classes[0], 5);
        }
    }

    #[test]
    fn percell_cells_get_distinct_seeds() {
        let cfg = GridConfig::ego_centered(2, 2, 1.0, 1);
        let mut r = rng(11);
        let latents = random_points(&mut r, 20, 3);
        let pogs: Vec<QuantizedPog> = (0..20)
            .map(|k| {
                let c = (k % 6) as u8;
                QuantizedPog::from_classes(cfg.clone(), 1.0, vec![c; 4]).unwrap()
            })
            .collect();
        let params = ForestParams { n_trees: 2, rng_seed: 0, ..Default::default() };
        let grid = train_percell_forests(&latents, &pogs, &params).unwrap();
        // All four cells share identical targets; distinct streams must
        // still bootstrap them differently.
        let seeds: Vec<u64> = grid.forests.iter().map(|f| f.params.rng_seed).collect();
        let unique: std::collections::HashSet<_> = seeds.iter().collect();
        assert_eq!(unique.len(), 4);
    }

    #[test]
    fn perlatent_forests_beat_the_constant_baseline() {
        let mut r = rng(12);
        let x = random_points(&mut r, 100, 4);
        // Noisy linear map into 3 output dimensions.
        let outs: Vec<Vec<f64>> = x
            .iter()
            .map(|p| {
                vec![
                    2.0 * p[0] - p[1] + 0.01 * r.random_range(-1.0..1.0),
                    p[2] + p[3] + 0.01 * r.random_range(-1.0..1.0),
                    0.75,
                ]
            })
            .collect();
        let params = ForestParams { n_trees: 20, rng_seed: 13, ..Default::default() };
        let forests = train_perlatent_forests(&x, &outs, &params).unwrap();
        assert_eq!(forests.len(), 3);

        for j in 0..2 {
            let mean = outs.iter().map(|o| o[j]).sum::<f64>() / outs.len() as f64;
            let var = outs.iter().map(|o| (o[j] - mean).powi(2)).sum::<f64>() / outs.len() as f64;
            let mse = x
                .iter()
                .zip(&outs)
                .map(|(xi, o)| (forests[j].predict_regression(xi).unwrap() - o[j]).powi(2))
                .sum::<f64>()
                / x.len() as f64;
            assert!(mse < var, "dimension {j}: mse {mse} not below variance {var}");
        }
        // The constant output dimension is reproduced exactly.
        assert_eq!(forests[2].predict_regression(&x[0]).unwrap(), 0.75);
    }

    #[test]
    fn training_bytes_are_thread_count_invariant() {
        let mut r = rng(13);
        let x = random_points(&mut r, 60, 3);
        let y: Vec<u8> = x.iter().map(|p| u8::from(p[0] + p[1] > 1.0)).collect();
        let params = ForestParams { n_trees: 12, rng_seed: 4, ..Default::default() };
        let mut byte_runs = Vec::new();
        for threads in [1usize, 2, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let forest = pool.install(|| train_classifier(&x, &y, &params)).unwrap();
            byte_runs.push(forest_to_bytes(&forest));
        }
        assert_eq!(byte_runs[0], byte_runs[1]);
        assert_eq!(byte_runs[0], byte_runs[2]);
    }

    #[test]
    fn prediction_is_pure() {
        let mut r = rng(14);
        let x = random_points(&mut r, 40, 2);
        let y: Vec<f64> = x.iter().map(|p| p[0]).collect();
        let forest = train_regressor(&x, &y, &ForestParams { n_trees: 6, ..Default::default() }).unwrap();
        let probe = vec![0.37, 0.91];
        let first = forest.predict_regression(&probe).unwrap();
        for _ in 0..5 {
            assert_eq!(forest.predict_regression(&probe).unwrap(), first);
        }
    }

    #[test]
    fn files_round_trip_bit_exactly() {
        let mut r = rng(15);
        let x = random_points(&mut r, 50, 3);
        let yc: Vec<u8> = (0..50).map(|_| r.random_range(0..6u8)).collect();
        let yv: Vec<f64> = (0..50).map(|_| r.random_range(0.0..1.0)).collect();
        let params = ForestParams { n_trees: 5, rng_seed: 8, ..Default::default() };

        let classifier = train_classifier(&x, &yc, &params).unwrap();
        let bytes = forest_to_bytes(&classifier);
        let back = read_forest_bytes(&bytes).unwrap();
        assert_eq!(classifier, back);
        assert_eq!(forest_to_bytes(&back), bytes);

        let regressor = train_regressor(&x, &yv, &params).unwrap();
        let rbytes = forest_to_bytes(&regressor);
        assert_eq!(read_forest_bytes(&rbytes).unwrap(), regressor);

        let list = vec![regressor.clone(), regressor.clone()];
        let lbytes = forest_list_to_bytes(&list);
        assert_eq!(read_forest_list_bytes(&lbytes).unwrap(), list);

        let grid = ForestGrid { rows: 1, cols: 2, forests: vec![classifier.clone(), classifier] };
        let gbytes = forest_grid_to_bytes(&grid);
        assert_eq!(read_forest_grid_bytes(&gbytes).unwrap(), grid);

        // Truncation and junk are rejected with a position.
        assert!(read_forest_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = gbytes;
        long.push(7);
        assert!(read_forest_grid_bytes(&long).is_err());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let x = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let y = vec![0u8, 1];
        assert!(train_classifier(&x, &y, &ForestParams { n_trees: 0, ..Default::default() }).is_err());
        assert!(
            train_classifier(&x, &y, &ForestParams { mtry: Some(3), ..Default::default() }).is_err()
        );
        assert!(train_classifier(&x, &y[..1], &ForestParams::default()).is_err());
        assert!(train_regressor(&x, &[f64::NAN, 0.0], &ForestParams::default()).is_err());
        let forest = train_classifier(&x, &y, &ForestParams { n_trees: 1, ..Default::default() }).unwrap();
        assert!(forest.predict_class(&[0.0]).is_err());
        assert!(forest.predict_regression(&[0.0, 0.0]).is_err());
    }
}
