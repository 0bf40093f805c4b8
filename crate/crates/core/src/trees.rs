//! Tree-ensemble learning: an XGBoost-style second-order gradient-boosted
//! regressor under squared loss, and a bagged random forest.
//!
//! Both share one model container so a single serialization path covers the
//! per-channel pipeline regressors and the haze-strength forest. Splits are
//! exact greedy over midpoints of consecutive distinct feature values, with
//! deterministic tie-breaking (lowest feature index, then lowest threshold),
//! so identical inputs always produce identical models.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        weight: f64,
    },
    Internal {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { weight } => return *weight,
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    fn count_nodes(&self) -> (usize, usize) {
        match self {
            Node::Leaf { .. } => (0, 1),
            Node::Internal { left, right, .. } => {
                let (li, ll) = left.count_nodes();
                let (ri, rl) = right.count_nodes();
                (li + ri + 1, ll + rl)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    Boosted,
    Bagged,
}

/// A fitted ensemble. Boosted models predict
/// `base_score + eta * sum(tree outputs)`; bagged models predict the mean of
/// the member trees.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsembleModel {
    pub mode: EnsembleMode,
    pub trees: Vec<Node>,
    pub base_score: f64,
    pub eta: f64,
    pub feature_dim: usize,
}

impl TreeEnsembleModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_dim {
            return Err(Error::shape("ensemble input", x.len(), self.feature_dim));
        }
        Ok(self.predict_unchecked(x))
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        match self.mode {
            EnsembleMode::Boosted => {
                let sum: f64 = self.trees.iter().map(|t| t.evaluate(x)).sum();
                self.base_score + self.eta * sum
            }
            EnsembleMode::Bagged => {
                if self.trees.is_empty() {
                    return self.base_score;
                }
                // mean anchored at the first tree so unanimous ensembles
                // reproduce the common value exactly
                let first = self.trees[0].evaluate(x);
                let acc: f64 = self.trees[1..].iter().map(|t| t.evaluate(x) - first).sum();
                first + acc / self.trees.len() as f64
            }
        }
    }

    /// Predictions for a row-major `rows x feature_dim` matrix.
    pub fn predict_batch(&self, features: &[f64], rows: usize) -> Result<Vec<f64>> {
        if features.len() != rows * self.feature_dim {
            return Err(Error::shape(
                "ensemble batch",
                features.len(),
                rows * self.feature_dim,
            ));
        }
        Ok((0..rows)
            .map(|i| self.predict_unchecked(&features[i * self.feature_dim..(i + 1) * self.feature_dim]))
            .collect())
    }
}

/// Hyperparameters of the boosted regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct GbtParams {
    pub rounds: usize,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub max_depth: usize,
    pub min_child_weight: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            rounds: 200,
            eta: 0.3,
            lambda: 1.0,
            gamma: 0.0,
            max_depth: 6,
            min_child_weight: 1.0,
        }
    }
}

struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Best split for one feature over a node's samples. `sorted_ids` and
/// `sorted_values` run in ascending feature order. Returns the candidate
/// with the highest gain; earlier (lower) thresholds win ties because
/// replacement requires a strict improvement.
fn best_split_for_feature(
    feature: usize,
    sorted_ids: &[u32],
    sorted_values: &[f64],
    grads: &[f64],
    total_g: f64,
    total_h: f64,
    params: &GbtParams,
) -> Option<SplitCandidate> {
    let parent_term = total_g * total_g / (total_h + params.lambda);
    let mut g_left = 0.0;
    let mut h_left = 0.0;
    let mut best: Option<SplitCandidate> = None;
    for k in 0..sorted_ids.len() - 1 {
        g_left += grads[sorted_ids[k] as usize];
        h_left += 1.0;
        let v0 = sorted_values[k];
        let v1 = sorted_values[k + 1];
        if v0 == v1 {
            continue;
        }
        let h_right = total_h - h_left;
        if h_left < params.min_child_weight || h_right < params.min_child_weight {
            continue;
        }
        let g_right = total_g - g_left;
        let gain = 0.5
            * (g_left * g_left / (h_left + params.lambda)
                + g_right * g_right / (h_right + params.lambda)
                - parent_term)
            - params.gamma;
        let improves = match &best {
            Some(b) => gain > b.gain,
            None => true,
        };
        if improves {
            best = Some(SplitCandidate {
                gain,
                feature,
                threshold: 0.5 * (v0 + v1),
            });
        }
    }
    best
}

struct GbtBuilder<'a> {
    features: &'a [f64],
    n_cols: usize,
    grads: &'a [f64],
    params: &'a GbtParams,
    /// leaf weight assigned to each training sample, filled during build
    sample_weight: Vec<f64>,
}

impl GbtBuilder<'_> {
    fn column(&self, sample: u32, feature: usize) -> f64 {
        self.features[sample as usize * self.n_cols + feature]
    }

    fn build(&mut self, sorted: Vec<Vec<u32>>, depth: usize) -> Node {
        let ids = &sorted[0];
        let total_h = ids.len() as f64;
        let total_g: f64 = ids.iter().map(|&i| self.grads[i as usize]).sum();

        let make_leaf = |builder: &mut Self| {
            let weight = -total_g / (total_h + builder.params.lambda);
            for &i in ids {
                builder.sample_weight[i as usize] = weight;
            }
            Node::Leaf { weight }
        };

        if depth >= self.params.max_depth || ids.len() < 2 {
            return make_leaf(self);
        }

        let candidates: Vec<Option<SplitCandidate>> = (0..self.n_cols)
            .into_par_iter()
            .map(|feature| {
                let column: Vec<f64> = sorted[feature]
                    .iter()
                    .map(|&i| self.column(i, feature))
                    .collect();
                best_split_for_feature(
                    feature,
                    &sorted[feature],
                    &column,
                    self.grads,
                    total_g,
                    total_h,
                    self.params,
                )
            })
            .collect();
        let mut best: Option<SplitCandidate> = None;
        for cand in candidates.into_iter().flatten() {
            let improves = match &best {
                Some(b) => cand.gain > b.gain,
                None => true,
            };
            if improves {
                best = Some(cand);
            }
        }

        let split = match best {
            Some(s) => s,
            None => return make_leaf(self),
        };
        // A zero-gain split is worth taking only if the node is impure:
        // symmetric patterns (XOR-like) need the depth to resolve them, while
        // pure nodes must terminate.
        let impurity = ids
            .iter()
            .map(|&i| {
                let d = self.grads[i as usize] - total_g / total_h;
                d * d
            })
            .sum::<f64>();
        if split.gain < 0.0 || (split.gain == 0.0 && impurity <= 0.0) {
            return make_leaf(self);
        }

        let mut goes_left = vec![false; self.sample_weight.len()];
        for &i in &sorted[split.feature] {
            goes_left[i as usize] = self.column(i, split.feature) <= split.threshold;
        }
        let mut left_sorted = Vec::with_capacity(self.n_cols);
        let mut right_sorted = Vec::with_capacity(self.n_cols);
        for feature_ids in &sorted {
            let mut l = Vec::new();
            let mut r = Vec::new();
            for &i in feature_ids {
                if goes_left[i as usize] {
                    l.push(i);
                } else {
                    r.push(i);
                }
            }
            left_sorted.push(l);
            right_sorted.push(r);
        }
        drop(sorted);
        let left = self.build(left_sorted, depth + 1);
        let right = self.build(right_sorted, depth + 1);
        Node::Internal {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

/// Fits a gradient-boosted regressor with squared-error loss, so gradients
/// are `prediction - target` and hessians are 1.
pub fn fit_gbt(
    features: &[f64],
    n_cols: usize,
    target: &[f64],
    params: &GbtParams,
) -> Result<TreeEnsembleModel> {
    let rows = target.len();
    if rows < 2 {
        return Err(Error::InsufficientData("fit_gbt needs at least 2 samples".into()));
    }
    if features.len() != rows * n_cols {
        return Err(Error::shape("fit_gbt matrix", features.len(), rows * n_cols));
    }
    if features.iter().any(|v| !v.is_finite()) || target.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("fit_gbt requires finite inputs"));
    }
    if params.rounds == 0 {
        return Err(Error::invalid("fit_gbt requires rounds >= 1"));
    }
    if !(params.eta > 0.0 && params.eta <= 1.0) {
        return Err(Error::invalid("fit_gbt eta must lie in (0, 1]"));
    }

    let base_score = target.iter().sum::<f64>() / rows as f64;
    let mut preds = vec![base_score; rows];
    let mut trees = Vec::with_capacity(params.rounds);

    // per-feature argsort of the full training set, reused every round
    let root_sorted: Vec<Vec<u32>> = (0..n_cols)
        .into_par_iter()
        .map(|feature| {
            let mut ids: Vec<u32> = (0..rows as u32).collect();
            ids.sort_by(|&a, &b| {
                features[a as usize * n_cols + feature]
                    .total_cmp(&features[b as usize * n_cols + feature])
                    .then(a.cmp(&b))
            });
            ids
        })
        .collect();

    let mut grads = vec![0.0; rows];
    for _ in 0..params.rounds {
        for i in 0..rows {
            grads[i] = preds[i] - target[i];
        }
        let mut builder = GbtBuilder {
            features,
            n_cols,
            grads: &grads,
            params,
            sample_weight: vec![0.0; rows],
        };
        let root = builder.build(root_sorted.clone(), 0);
        for i in 0..rows {
            preds[i] += params.eta * builder.sample_weight[i];
        }
        trees.push(root);
    }
    Ok(TreeEnsembleModel {
        mode: EnsembleMode::Boosted,
        trees,
        base_score,
        eta: params.eta,
        feature_dim: n_cols,
    })
}

pub fn predict_gbt(model: &TreeEnsembleModel, x: &[f64]) -> Result<f64> {
    if model.mode != EnsembleMode::Boosted {
        return Err(Error::invalid("predict_gbt on a bagged model"));
    }
    model.predict(x)
}

/// Hyperparameters of the bagged forest.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Fraction of features drawn as candidates at every split.
    pub feature_subsample: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 60,
            max_depth: 10,
            feature_subsample: 0.5,
            bootstrap: true,
            seed: 0,
        }
    }
}

struct ForestBuilder<'a> {
    features: &'a [f64],
    n_cols: usize,
    target: &'a [f64],
    max_depth: usize,
    n_candidates: usize,
}

impl ForestBuilder<'_> {
    fn build(&self, ids: &[u32], depth: usize, rng: &mut impl rand::Rng) -> Node {
        let n = ids.len() as f64;
        // anchored mean: exact when all resident targets agree
        let first = self.target[ids[0] as usize];
        let mean = first
            + ids.iter().map(|&i| self.target[i as usize] - first).sum::<f64>() / n;
        if depth >= self.max_depth || ids.len() < 2 {
            return Node::Leaf { weight: mean };
        }
        let sumsq: f64 = ids
            .iter()
            .map(|&i| {
                let d = self.target[i as usize] - mean;
                d * d
            })
            .sum();
        if sumsq <= 0.0 {
            return Node::Leaf { weight: mean };
        }

        // feature candidates drawn without replacement, evaluated in
        // ascending index order for deterministic tie-breaking
        let mut pool: Vec<usize> = (0..self.n_cols).collect();
        for k in 0..self.n_candidates {
            let j = rng.gen_range(k..pool.len());
            pool.swap(k, j);
        }
        let mut candidates = pool[..self.n_candidates].to_vec();
        candidates.sort_unstable();

        let total_sum: f64 = ids.iter().map(|&i| self.target[i as usize]).sum();
        let parent_score = total_sum * total_sum / n;
        let mut best: Option<(f64, usize, f64)> = None; // (score, feature, threshold)
        for &feature in &candidates {
            let mut order = ids.to_vec();
            order.sort_by(|&a, &b| {
                self.features[a as usize * self.n_cols + feature]
                    .total_cmp(&self.features[b as usize * self.n_cols + feature])
                    .then(a.cmp(&b))
            });
            let mut sum_left = 0.0;
            let mut n_left = 0.0;
            for w in order.windows(2) {
                sum_left += self.target[w[0] as usize];
                n_left += 1.0;
                let v0 = self.features[w[0] as usize * self.n_cols + feature];
                let v1 = self.features[w[1] as usize * self.n_cols + feature];
                if v0 == v1 {
                    continue;
                }
                let n_right = n - n_left;
                let sum_right = total_sum - sum_left;
                let score =
                    sum_left * sum_left / n_left + sum_right * sum_right / n_right - parent_score;
                let improves = match &best {
                    Some((s, _, _)) => score > *s,
                    None => true,
                };
                if improves {
                    best = Some((score, feature, 0.5 * (v0 + v1)));
                }
            }
        }
        let (score, feature, threshold) = match best {
            Some(b) => b,
            None => return Node::Leaf { weight: mean },
        };
        if score <= 0.0 {
            return Node::Leaf { weight: mean };
        }
        let (left_ids, right_ids): (Vec<u32>, Vec<u32>) = ids
            .iter()
            .partition(|&&i| self.features[i as usize * self.n_cols + feature] <= threshold);
        let left = self.build(&left_ids, depth + 1, rng);
        let right = self.build(&right_ids, depth + 1, rng);
        Node::Internal {
            feature,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

/// Fits a bagged random forest: bootstrap resampling per tree, per-split
/// feature subsampling, variance-reduction splits, mean-valued leaves. Fully
/// determined by the seed.
pub fn fit_random_forest(
    features: &[f64],
    n_cols: usize,
    target: &[f64],
    params: &ForestParams,
) -> Result<TreeEnsembleModel> {
    use rand::{Rng, SeedableRng};
    let rows = target.len();
    if rows == 0 {
        return Err(Error::InsufficientData("fit_random_forest on empty data".into()));
    }
    if features.len() != rows * n_cols {
        return Err(Error::shape("forest matrix", features.len(), rows * n_cols));
    }
    if params.n_trees == 0 {
        return Err(Error::invalid("forest needs n_trees >= 1"));
    }
    if !(params.feature_subsample > 0.0 && params.feature_subsample <= 1.0) {
        return Err(Error::invalid("feature_subsample must lie in (0, 1]"));
    }
    let n_candidates = ((params.feature_subsample * n_cols as f64).ceil() as usize).clamp(1, n_cols);

    let mut seeder = rand_chacha::ChaCha8Rng::seed_from_u64(params.seed);
    let tree_seeds: Vec<u64> = (0..params.n_trees).map(|_| seeder.gen()).collect();

    let builder = ForestBuilder {
        features,
        n_cols,
        target,
        max_depth: params.max_depth,
        n_candidates,
    };
    let trees: Vec<Node> = tree_seeds
        .into_par_iter()
        .map(|seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<u32> = if params.bootstrap {
                (0..rows).map(|_| rng.gen_range(0..rows as u32)).collect()
            } else {
                (0..rows as u32).collect()
            };
            builder.build(&ids, 0, &mut rng)
        })
        .collect();

    let base_score = target.iter().sum::<f64>() / rows as f64;
    Ok(TreeEnsembleModel {
        mode: EnsembleMode::Bagged,
        trees,
        base_score,
        eta: 1.0,
        feature_dim: n_cols,
    })
}

/// Parameter count under the declared convention: two per internal node
/// (feature index and threshold), one per leaf (weight).
pub fn count_parameters(model: &TreeEnsembleModel) -> usize {
    model
        .trees
        .iter()
        .map(|t| {
            let (internal, leaves) = t.count_nodes();
            2 * internal + leaves
        })
        .sum()
}
