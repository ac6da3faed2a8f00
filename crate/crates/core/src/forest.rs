//! Random forest over Gini-split decision trees.
//!
//! Randomness schedule (relied on by the tests' reference implementation): tree `t` draws from
//! `ChaCha8Rng::seed_from_u64(tree_seed(seed, t))`. With bootstrapping enabled it first draws
//! `n` row indices with `random_range(0..n)` over the rows in canonical order (sorted by key).
//! Nodes are grown depth first, left child before right. A node that is not terminal shuffles
//! the feature indices `0..d` with `SliceRandom::shuffle` and scans them in that order until
//! `mtry` non-constant features have been evaluated.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::splitmix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per node; `None` means `ceil(sqrt(d))`.
    pub mtry: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
    /// Weight classes inversely to their frequency.
    pub balanced: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            mtry: None,
            min_samples_leaf: 1,
            max_depth: None,
            bootstrap: true,
            balanced: false,
        }
    }
}

impl ForestParams {
    pub fn resolved_mtry(&self, d: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1))
    }
}

/// Labeled rows. Each row carries a key that fixes its canonical position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub keys: Vec<u64>,
    pub n_classes: usize,
}

impl TrainingSet {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        keys: Vec<u64>,
        n_classes: usize,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("training set has no rows".into()));
        }
        if labels.len() != features.len() || keys.len() != features.len() {
            return Err(Error::SizeMismatch(format!(
                "{} rows, {} labels, {} keys",
                features.len(),
                labels.len(),
                keys.len()
            )));
        }
        let d = features[0].len();
        if d == 0 {
            return Err(Error::InvalidArgument("rows have no features".into()));
        }
        if features.iter().any(|r| r.len() != d) {
            return Err(Error::SizeMismatch("rows differ in feature count".into()));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training feature".into()));
        }
        if let Some(l) = labels.iter().find(|l| **l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        Ok(TrainingSet {
            features,
            labels,
            keys,
            n_classes,
        })
    }

    /// Rows keyed by their position.
    pub fn unkeyed(features: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let keys = (0..features.len() as u64).collect();
        TrainingSet::new(features, labels, keys, n_classes)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features[0].len()
    }

    fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row order sorted by key, ties broken by feature bits then label.
    fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.keys[a]
                .cmp(&self.keys[b])
                .then_with(|| {
                    let fa = self.features[a].iter().map(|v| v.to_bits());
                    let fb = self.features[b].iter().map(|v| v.to_bits());
                    fa.cmp(fb)
                })
                .then(self.labels[a].cmp(&self.labels[b]))
        });
        order
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Gini impurity of the samples reaching this node.
        impurity: f64,
        /// Weighted Gini impurity of the two children.
        split_impurity: f64,
    },
    Leaf {
        /// Weighted class counts of the training samples reaching this leaf.
        counts: Vec<f64>,
        impurity: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub depth: usize,
}

impl DecisionTree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    fn leaf_for(&self, row: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                Node::Leaf { counts, .. } => return counts,
            }
        }
    }
}

/// Gini impurity `1 - sum(p_i^2)` of weighted class counts.
pub fn gini(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - counts
        .iter()
        .map(|c| (c / total) * (c / total))
        .sum::<f64>()
}

pub fn tree_seed(seed: u64, tree: usize) -> u64 {
    splitmix64(seed ^ splitmix64(tree as u64))
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    weights: &'a [f64],
    n_classes: usize,
    mtry: usize,
    params: &'a ForestParams,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    depth: usize,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

impl Grower<'_> {
    fn counts(&self, samples: &[usize]) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_classes];
        for &s in samples {
            counts[self.y[s]] += self.weights[self.y[s]];
        }
        counts
    }

    fn grow(&mut self, samples: Vec<usize>, depth: usize) -> usize {
        self.depth = self.depth.max(depth);
        let counts = self.counts(&samples);
        let impurity = gini(&counts);
        let at_max_depth = self.params.max_depth.is_some_and(|m| depth >= m);
        let pure = counts.iter().filter(|c| **c > 0.0).count() <= 1;
        let too_small = samples.len() < 2 * self.params.min_samples_leaf.max(1);
        let split = if pure || at_max_depth || too_small {
            None
        } else {
            self.best_split(&samples)
        };
        let id = self.nodes.len();
        match split {
            None => {
                self.nodes.push(Node::Leaf { counts, impurity });
                id
            }
            Some(best) => {
                self.nodes.push(Node::Leaf {
                    counts: Vec::new(),
                    impurity,
                });
                let (l, r): (Vec<usize>, Vec<usize>) = samples
                    .into_iter()
                    .partition(|&s| self.x[s][best.feature] <= best.threshold);
                let left = self.grow(l, depth + 1);
                let right = self.grow(r, depth + 1);
                self.nodes[id] = Node::Split {
                    feature: best.feature,
                    threshold: best.threshold,
                    left,
                    right,
                    impurity,
                    split_impurity: best.impurity,
                };
                id
            }
        }
    }

    fn best_split(&mut self, samples: &[usize]) -> Option<BestSplit> {
        let d = self.x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        features.shuffle(&mut self.rng);
        let min_leaf = self.params.min_samples_leaf.max(1);
        let total = self.counts(samples);
        let total_w: f64 = total.iter().sum();

        let mut best: Option<BestSplit> = None;
        let mut evaluated = 0;
        let mut order: Vec<usize> = samples.to_vec();
        for f in features {
            if evaluated >= self.mtry {
                break;
            }
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let first = self.x[order[0]][f];
            let last = self.x[order[order.len() - 1]][f];
            if first == last {
                continue;
            }
            evaluated += 1;
            let mut left = vec![0.0; self.n_classes];
            for i in 0..order.len() - 1 {
                let s = order[i];
                left[self.y[s]] += self.weights[self.y[s]];
                let (v, next) = (self.x[s][f], self.x[order[i + 1]][f]);
                if v == next || i + 1 < min_leaf || order.len() - i - 1 < min_leaf {
                    continue;
                }
                let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let wl: f64 = left.iter().sum();
                let wr: f64 = right.iter().sum();
                let impurity = (wl * gini(&left) + wr * gini(&right)) / total_w;
                if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                    let mut threshold = (v + next) / 2.0;
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        impurity,
                    });
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForestModel {
    pub trees: Vec<DecisionTree>,
    pub n_classes: usize,
    pub n_features: usize,
    pub seed: u64,
    pub params: ForestParams,
}

/// Fits a forest. Identical `(rows, params, seed)` always yields an identical model,
/// independent of the order rows are supplied in.
pub fn rf_train(data: &TrainingSet, params: &ForestParams, seed: u64) -> Result<RandomForestModel> {
    if data.len() < 2 {
        return Err(Error::Empty("need at least 2 training rows".into()));
    }
    if params.n_trees == 0 {
        return Err(Error::InvalidArgument("n_trees must be >= 1".into()));
    }
    let class_counts = data.class_counts();
    if class_counts.iter().filter(|c| **c > 0).count() < 2 {
        return Err(Error::SingleClass);
    }
    let order = data.canonical_order();
    let x: Vec<Vec<f64>> = order.iter().map(|&i| data.features[i].clone()).collect();
    let y: Vec<usize> = order.iter().map(|&i| data.labels[i]).collect();
    let weights: Vec<f64> = if params.balanced {
        let n = data.len() as f64;
        let present = class_counts.iter().filter(|c| **c > 0).count() as f64;
        class_counts
            .iter()
            .map(|&c| {
                if c == 0 {
                    0.0
                } else {
                    n / (present * c as f64)
                }
            })
            .collect()
    } else {
        vec![1.0; data.n_classes]
    };
    let mtry = params.resolved_mtry(data.n_features());
    let n = x.len();

    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(seed, t));
            let samples: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut grower = Grower {
                x: &x,
                y: &y,
                weights: &weights,
                n_classes: data.n_classes,
                mtry,
                params,
                rng,
                nodes: Vec::new(),
                depth: 0,
            };
            grower.grow(samples, 0);
            DecisionTree {
                nodes: grower.nodes,
                depth: grower.depth,
            }
        })
        .collect();

    Ok(RandomForestModel {
        trees,
        n_classes: data.n_classes,
        n_features: data.n_features(),
        seed,
        params: *params,
    })
}

impl RandomForestModel {
    /// Mean of the per-tree leaf class frequencies.
    pub fn predict_proba(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.n_features {
            return Err(Error::SizeMismatch(format!(
                "row has {} features, model expects {}",
                row.len(),
                self.n_features
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature row".into()));
        }
        let mut proba = vec![0.0; self.n_classes];
        for tree in &self.trees {
            let counts = tree.leaf_for(row);
            let total: f64 = counts.iter().sum();
            for (p, c) in proba.iter_mut().zip(counts) {
                *p += c / total;
            }
        }
        let n = self.trees.len() as f64;
        proba.iter_mut().for_each(|p| *p /= n);
        Ok(proba)
    }

    /// Predicted class (lowest index wins ties) and class probabilities.
    pub fn predict(&self, row: &[f64]) -> Result<(usize, Vec<f64>)> {
        let proba = self.predict_proba(row)?;
        Ok((argmax(&proba), proba))
    }

    /// `proba[positive_class]` for each row, in order.
    pub fn scores_for_roc(&self, rows: &[Vec<f64>], positive_class: usize) -> Result<Vec<f64>> {
        if positive_class >= self.n_classes {
            return Err(Error::InvalidArgument(format!(
                "class {positive_class} out of range for {} classes",
                self.n_classes
            )));
        }
        rows.iter()
            .map(|r| self.predict_proba(r).map(|p| p[positive_class]))
            .collect()
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn rf_predict(model: &RandomForestModel, row: &[f64]) -> Result<(usize, Vec<f64>)> {
    model.predict(row)
}

pub fn rf_scores_for_roc(
    model: &RandomForestModel,
    rows: &[Vec<f64>],
    positive_class: usize,
) -> Result<Vec<f64>> {
    model.scores_for_roc(rows, positive_class)
}

/// k-fold cross-validated accuracy; fold `i` holds canonical rows `j` with `j % k == i`.
pub fn cross_validate(
    data: &TrainingSet,
    params: &ForestParams,
    seed: u64,
    k: usize,
) -> Result<Vec<f64>> {
    if k < 2 || k > data.len() {
        return Err(Error::InvalidArgument(format!(
            "fold count {k} must be in [2, {}]",
            data.len()
        )));
    }
    let order = data.canonical_order();
    (0..k)
        .map(|fold| {
            let pick = |test: bool| {
                let mut f = Vec::new();
                let mut l = Vec::new();
                let mut keys = Vec::new();
                for (j, &i) in order.iter().enumerate() {
                    if (j % k == fold) == test {
                        f.push(data.features[i].clone());
                        l.push(data.labels[i]);
                        keys.push(data.keys[i]);
                    }
                }
                (f, l, keys)
            };
            let (tf, tl, tk) = pick(false);
            let train = TrainingSet::new(tf, tl, tk, data.n_classes)?;
            let model = rf_train(&train, params, seed)?;
            let (vf, vl, _) = pick(true);
            let correct = vf
                .iter()
                .zip(&vl)
                .map(|(r, l)| model.predict(r).map(|(c, _)| usize::from(c == *l)))
                .sum::<Result<usize>>()?;
            Ok(correct as f64 / vl.len() as f64)
        })
        .collect()
}

const FOREST_MAGIC: &[u8; 5] = b"CSRF1";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated blob".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

impl RandomForestModel {
    /// Little-endian `CSRF1` blob: hyperparameters, seed, then each tree's node array.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(FOREST_MAGIC.to_vec());
        let p = &self.params;
        w.u32(self.n_classes);
        w.u32(self.n_features);
        w.u64(self.seed);
        w.u32(p.n_trees);
        w.u32(p.mtry.unwrap_or(0));
        w.u32(p.min_samples_leaf);
        w.u32(p.max_depth.unwrap_or(0));
        w.u8(u8::from(p.max_depth.is_some()));
        w.u8(u8::from(p.bootstrap));
        w.u8(u8::from(p.balanced));
        w.u32(self.trees.len());
        for tree in &self.trees {
            w.u32(tree.depth);
            w.u32(tree.nodes.len());
            for node in &tree.nodes {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                        impurity,
                        split_impurity,
                    } => {
                        w.u8(1);
                        w.u32(*feature);
                        w.f64(*threshold);
                        w.u32(*left);
                        w.u32(*right);
                        w.f64(*impurity);
                        w.f64(*split_impurity);
                    }
                    Node::Leaf { counts, impurity } => {
                        w.u8(0);
                        w.f64(*impurity);
                        for c in counts {
                            w.f64(*c);
                        }
                    }
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (model, rest) = Self::read(bytes)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(model)
    }

    /// Parses a model from the front of `bytes`, returning the unread remainder.
    pub(crate) fn read(bytes: &[u8]) -> Result<(Self, &[u8])> {
        let mut r = Reader::new(bytes);
        if r.take(5)? != FOREST_MAGIC {
            return Err(Error::Format("missing CSRF1 header".into()));
        }
        let n_classes = r.u32()?;
        let n_features = r.u32()?;
        let seed = r.u64()?;
        let n_trees = r.u32()?;
        let mtry = r.u32()?;
        let min_samples_leaf = r.u32()?;
        let max_depth = r.u32()?;
        let has_max_depth = r.u8()? != 0;
        let bootstrap = r.u8()? != 0;
        let balanced = r.u8()? != 0;
        let params = ForestParams {
            n_trees,
            mtry: (mtry > 0).then_some(mtry),
            min_samples_leaf,
            max_depth: has_max_depth.then_some(max_depth),
            bootstrap,
            balanced,
        };
        if n_classes < 2 || n_features == 0 {
            return Err(Error::Format("invalid class or feature count".into()));
        }
        let count = r.u32()?;
        let mut trees = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let depth = r.u32()?;
            let n_nodes = r.u32()?;
            let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
            for _ in 0..n_nodes {
                let node = match r.u8()? {
                    1 => Node::Split {
                        feature: r.u32()?,
                        threshold: r.f64()?,
                        left: r.u32()?,
                        right: r.u32()?,
                        impurity: r.f64()?,
                        split_impurity: r.f64()?,
                    },
                    0 => {
                        let impurity = r.f64()?;
                        let counts = (0..n_classes).map(|_| r.f64()).collect::<Result<_>>()?;
                        Node::Leaf { counts, impurity }
                    }
                    tag => return Err(Error::Format(format!("unknown node tag {tag}"))),
                };
                nodes.push(node);
            }
            for node in &nodes {
                if let Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } = node
                {
                    if *feature >= n_features || *left >= n_nodes || *right >= n_nodes {
                        return Err(Error::Format("node index out of range".into()));
                    }
                }
            }
            if nodes.is_empty() {
                return Err(Error::Format("empty tree".into()));
            }
            trees.push(DecisionTree { nodes, depth });
        }
        if trees.is_empty() {
            return Err(Error::Format("forest has no trees".into()));
        }
        let rest = r.rest();
        Ok((
            RandomForestModel {
                trees,
                n_classes,
                n_features,
                seed,
                params,
            },
            rest,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
