//! Predictive model of `P(answer = Yes)` from the question and demographic
//! dummies, fit on the probability sample and used to score nonprobability
//! respondents.
//!
//! Gradient boosting on the binomial deviance: the score starts at the
//! log-odds of the label mean, every stage fits a depth-limited regression
//! tree to the residuals `y − p` by exact greedy search (all features are
//! binary), leaf values take one Newton step `Σ(y − p) / Σ p(1 − p)` and are
//! scaled by the shrinkage.
//!
//! Rows sharing a feature pattern always land in the same leaf, so fitting
//! runs on the distinct patterns with row counts and label sums. This is exact
//! and keeps the cost proportional to the number of patterns.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{map_indexed, replicate_rng, Execution};
use crate::propensity::logistic;
use crate::types::{ProbabilitySample, SurveySample};

pub const MODEL_FORMAT: &str = "survey-integrate-gbm";
pub const MODEL_VERSION: u32 = 1;

/// Feature names for a stacked layout: one dummy per question, then the
/// covariate dummies of the schema.
pub fn feature_names<S: SurveySample>(sample: &S) -> Vec<String> {
    sample
        .questions()
        .iter()
        .map(|q| format!("question:{q}"))
        .chain(
            sample
                .schema()
                .dummy_columns()
                .into_iter()
                .map(|(v, l)| format!("{v}:{l}")),
        )
        .collect()
}

fn row_features<S: SurveySample>(sample: &S, unit: usize, question: usize) -> Vec<u8> {
    let m = sample.questions().len();
    let x = sample.units()[unit].x.as_slice();
    let mut f = vec![0u8; m + x.len() - 1];
    f[question] = 1;
    for (dst, &v) in f[m..].iter_mut().zip(&x[1..]) {
        *dst = (v == 1.0) as u8;
    }
    f
}

/// Binary feature rows with a shared column layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRows {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<u8>>,
}

impl FeatureRows {
    /// One row per unit of `sample`, with the dummy for `question` set.
    pub fn for_question<S: SurveySample>(sample: &S, question: usize) -> Self {
        FeatureRows {
            feature_names: feature_names(sample),
            rows: (0..sample.len())
                .map(|u| row_features(sample, u, question))
                .collect(),
        }
    }
}

/// "Question × respondent" training rows: one per non-missing answer.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedTrainingSet {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
    /// `(unit index, question index)` each row came from.
    pub origin: Vec<(usize, usize)>,
}

impl StackedTrainingSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        StackedTrainingSet {
            feature_names: self.feature_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            origin: indices.iter().map(|&i| self.origin[i]).collect(),
        }
    }

    pub fn features(&self) -> FeatureRows {
        FeatureRows {
            feature_names: self.feature_names.clone(),
            rows: self.rows.clone(),
        }
    }
}

/// Stacks the answers of `sample` to `questions` (all questions if empty),
/// respondent-major, refusals dropped.
pub fn build_training_set(
    sample: &ProbabilitySample,
    questions: &[usize],
) -> Result<StackedTrainingSet> {
    let all: Vec<usize> = (0..sample.questions.len()).collect();
    let questions = if questions.is_empty() { &all } else { questions };
    if let Some(&q) = questions.iter().find(|&&q| q >= sample.questions.len()) {
        return Err(Error::DimensionMismatch {
            expected: sample.questions.len(),
            found: q + 1,
        });
    }
    let mut set = StackedTrainingSet {
        feature_names: feature_names(sample),
        rows: Vec::new(),
        labels: Vec::new(),
        origin: Vec::new(),
    };
    for (u, unit) in sample.units.iter().enumerate() {
        for &q in questions {
            if let Some(Some(answer)) = unit.responses.get(q) {
                set.rows.push(row_features(sample, u, q));
                set.labels.push(*answer as u8);
                set.origin.push((u, q));
            }
        }
    }
    if set.is_empty() {
        return Err(Error::EmptySample("no non-missing answers to train on"));
    }
    Ok(set)
}

/// Stratified-by-label split; returns `(train, test)`.
pub fn split_train_test(
    set: &StackedTrainingSet,
    train_fraction: f64,
    seed: u64,
) -> (StackedTrainingSet, StackedTrainingSet) {
    let mut rng = replicate_rng(seed, 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let cut = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (set.subset(&train), set.subset(&test))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbmConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_node_size: usize,
}

impl Default for GbmConfig {
    fn default() -> Self {
        GbmConfig {
            n_trees: 1000,
            max_depth: 3,
            shrinkage: 0.05,
            min_node_size: 10,
        }
    }
}

impl GbmConfig {
    fn validate(&self) -> Result<()> {
        if self.max_depth == 0
            || self.min_node_size == 0
            || !(self.shrinkage > 0.0 && self.shrinkage.is_finite())
        {
            return Err(Error::InvalidConfig(format!("invalid boosting config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// `absent` is taken when the feature is 0, `present` when it is 1.
    Split {
        feature: usize,
        absent: usize,
        present: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[u8]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    absent,
                    present,
                } => i = if row[feature] == 1 { present } else { absent },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split {
                    absent, present, ..
                } => 1 + walk(nodes, absent).max(walk(nodes, present)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub format: String,
    pub version: u32,
    pub config: GbmConfig,
    pub feature_names: Vec<String>,
    /// Log-odds of the training label mean.
    pub initial_score: f64,
    /// Leaf values already include the shrinkage.
    pub trees: Vec<Tree>,
    /// Training log-loss before the first tree and after each one.
    pub train_loss: Vec<f64>,
    /// Total split gain per feature.
    pub feature_gain: Vec<f64>,
}

impl BoostedModel {
    pub fn raw_score(&self, row: &[u8]) -> f64 {
        self.initial_score + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: BoostedModel = serde_json::from_str(&text)?;
        if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
            return Err(Error::parse(
                path,
                format!(
                    "unsupported model format {:?} version {}",
                    model.format, model.version
                ),
            ));
        }
        Ok(model)
    }
}

/// Distinct feature patterns with their row counts and positive labels.
struct Patterns {
    rows: Vec<Vec<u8>>,
    count: Vec<f64>,
    positives: Vec<f64>,
}

impl Patterns {
    fn from_set(set: &StackedTrainingSet) -> Self {
        let mut map: BTreeMap<&[u8], (f64, f64)> = BTreeMap::new();
        for (row, &label) in set.rows.iter().zip(&set.labels) {
            let e = map.entry(row.as_slice()).or_default();
            e.0 += 1.0;
            e.1 += label as f64;
        }
        let mut p = Patterns {
            rows: Vec::with_capacity(map.len()),
            count: Vec::with_capacity(map.len()),
            positives: Vec::with_capacity(map.len()),
        };
        for (row, (c, y)) in map {
            p.rows.push(row.to_vec());
            p.count.push(c);
            p.positives.push(y);
        }
        p
    }

    fn log_loss(&self, scores: &[f64]) -> f64 {
        let total: f64 = self.count.iter().sum();
        let loss: f64 = (0..scores.len())
            .map(|i| {
                let s = scores[i];
                // −[y log p + (1 − y) log(1 − p)] = log(1 + e^s) − y s
                let softplus = if s > 0.0 {
                    s + (-s).exp().ln_1p()
                } else {
                    s.exp().ln_1p()
                };
                self.count[i] * softplus - self.positives[i] * s
            })
            .sum();
        loss / total
    }
}

struct TreeBuilder<'a> {
    patterns: &'a Patterns,
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a GbmConfig,
    n_features: usize,
    nodes: Vec<Node>,
    gain: Vec<f64>,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, members: &[usize]) -> usize {
        let g: f64 = members.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = members.iter().map(|&i| self.hess[i]).sum();
        let value = if h > 1e-12 { self.config.shrinkage * g / h } else { 0.0 };
        self.nodes.push(Node::Leaf { value });
        self.nodes.len() - 1
    }

    fn build(&mut self, members: Vec<usize>, depth: usize) -> usize {
        if depth >= self.config.max_depth {
            return self.leaf(&members);
        }
        let n: f64 = members.iter().map(|&i| self.patterns.count[i]).sum();
        let g: f64 = members.iter().map(|&i| self.grad[i]).sum();
        let min = self.config.min_node_size as f64;
        let mut n_on = vec![0.0; self.n_features];
        let mut g_on = vec![0.0; self.n_features];
        for &i in &members {
            let (c, gi) = (self.patterns.count[i], self.grad[i]);
            let row = &self.patterns.rows[i][..self.n_features];
            for ((n, g), &bit) in n_on.iter_mut().zip(g_on.iter_mut()).zip(row) {
                let on = f64::from(bit);
                *n += c * on;
                *g += gi * on;
            }
        }
        let parent = g * g / n;
        let mut best: Option<(usize, f64)> = None;
        for f in 0..self.n_features {
            let (nr, gr) = (n_on[f], g_on[f]);
            let (nl, gl) = (n - nr, g - gr);
            if nl < min || nr < min {
                continue;
            }
            let gain = gl * gl / nl + gr * gr / nr - parent;
            if gain > 1e-12 && best.is_none_or(|(_, b)| gain > b) {
                best = Some((f, gain));
            }
        }
        let Some((feature, gain)) = best else {
            return self.leaf(&members);
        };
        self.gain[feature] += gain;
        let (present, absent): (Vec<usize>, Vec<usize>) = members
            .into_iter()
            .partition(|&i| self.patterns.rows[i][feature] == 1);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let absent = self.build(absent, depth + 1);
        let present = self.build(present, depth + 1);
        self.nodes[slot] = Node::Split {
            feature,
            absent,
            present,
        };
        slot
    }
}

pub fn fit_gbm(train: &StackedTrainingSet, config: &GbmConfig) -> Result<BoostedModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySample("training set"));
    }
    let positives = train.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::SingleClass);
    }
    let patterns = Patterns::from_set(train);
    let n_features = train.feature_names.len();
    let mean = positives as f64 / train.len() as f64;
    let initial_score = (mean / (1.0 - mean)).ln();

    let mut scores = vec![initial_score; patterns.rows.len()];
    let mut train_loss = Vec::with_capacity(config.n_trees + 1);
    train_loss.push(patterns.log_loss(&scores));
    let mut trees = Vec::with_capacity(config.n_trees);
    let mut feature_gain = vec![0.0; n_features];
    let mut grad = vec![0.0; scores.len()];
    let mut hess = vec![0.0; scores.len()];

    for _ in 0..config.n_trees {
        for i in 0..scores.len() {
            let p = logistic(scores[i]);
            grad[i] = patterns.positives[i] - patterns.count[i] * p;
            hess[i] = patterns.count[i] * p * (1.0 - p);
        }
        let mut builder = TreeBuilder {
            patterns: &patterns,
            grad: &grad,
            hess: &hess,
            config,
            n_features,
            nodes: Vec::new(),
            gain: vec![0.0; n_features],
        };
        builder.build((0..scores.len()).collect(), 0);
        for (total, g) in feature_gain.iter_mut().zip(&builder.gain) {
            *total += g;
        }
        let tree = Tree {
            nodes: builder.nodes,
        };
        for (s, row) in scores.iter_mut().zip(&patterns.rows) {
            *s += tree.predict(row);
        }
        train_loss.push(patterns.log_loss(&scores));
        trees.push(tree);
    }

    Ok(BoostedModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        config: *config,
        feature_names: train.feature_names.clone(),
        initial_score,
        trees,
        train_loss,
        feature_gain,
    })
}

/// Probabilities for each row; rejects rows whose layout differs from the
/// training layout.
pub fn predict_probability(model: &BoostedModel, rows: &FeatureRows) -> Result<Vec<f64>> {
    if rows.feature_names != model.feature_names {
        let detail = match rows
            .feature_names
            .iter()
            .zip(&model.feature_names)
            .position(|(a, b)| a != b)
        {
            Some(i) => format!(
                "column {i} is {:?}, model expects {:?}",
                rows.feature_names[i], model.feature_names[i]
            ),
            None => format!(
                "{} columns, model expects {}",
                rows.feature_names.len(),
                model.feature_names.len()
            ),
        };
        return Err(Error::SchemaMismatch(detail));
    }
    let width = model.feature_names.len();
    rows.rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != width {
                return Err(Error::SchemaMismatch(format!(
                    "row {i} has {} features, model expects {width}",
                    row.len()
                )));
            }
            Ok(logistic(model.raw_score(row)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifierReport {
    pub accuracy: f64,
    pub auc: f64,
    pub log_loss: f64,
    pub roc: Vec<RocPoint>,
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with mid-ranks
/// for ties (a tied positive/negative pair counts one half).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let pos_f = pos as f64;
    Ok((rank_sum_pos - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

/// ROC points from the highest threshold down, starting at (0, 0).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Mean binary log-loss with probabilities clamped away from 0 and 1.
pub fn log_loss(probabilities: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probabilities.len() as f64
}

pub fn evaluate_classifier(model: &BoostedModel, test: &StackedTrainingSet) -> Result<ClassifierReport> {
    if test.is_empty() {
        return Err(Error::EmptySample("test set"));
    }
    let probs = predict_probability(model, &test.features())?;
    let correct = probs
        .iter()
        .zip(&test.labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
        .count();
    Ok(ClassifierReport {
        accuracy: correct as f64 / test.len() as f64,
        auc: auc(&probs, &test.labels)?,
        log_loss: log_loss(&probs, &test.labels),
        roc: roc_curve(&probs, &test.labels)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvResult {
    pub best_index: usize,
    pub best: GbmConfig,
    /// Mean validation log-loss per grid point, in grid order.
    pub mean_log_loss: Vec<f64>,
}

/// K-fold cross-validation over `grid`; the lowest mean validation log-loss
/// wins, ties going to the earliest grid point.
pub fn cross_validate(
    train: &StackedTrainingSet,
    folds: usize,
    grid: &[GbmConfig],
    seed: u64,
    execution: Execution,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty tuning grid".into()));
    }
    if folds < 2 || folds > train.len() {
        return Err(Error::InvalidConfig(format!(
            "need 2 ≤ folds ≤ {}, got {folds}",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut replicate_rng(seed, 0));
    let mut fold_of = vec![0; train.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }

    let losses = map_indexed(grid.len() * folds, execution, |task| {
        let (g, fold) = (task / folds, task % folds);
        let fit_idx: Vec<usize> = (0..train.len()).filter(|&i| fold_of[i] != fold).collect();
        let val_idx: Vec<usize> = (0..train.len()).filter(|&i| fold_of[i] == fold).collect();
        let model = fit_gbm(&train.subset(&fit_idx), &grid[g])?;
        let val = train.subset(&val_idx);
        let probs = predict_probability(&model, &val.features())?;
        Ok::<f64, Error>(log_loss(&probs, &val.labels))
    });

    let mut mean_log_loss = vec![0.0; grid.len()];
    for (task, loss) in losses.into_iter().enumerate() {
        mean_log_loss[task / folds] += loss? / folds as f64;
    }
    let mut best_index = 0;
    for (i, &l) in mean_log_loss.iter().enumerate() {
        if l < mean_log_loss[best_index] {
            best_index = i;
        }
    }
    Ok(CvResult {
        best_index,
        best: grid[best_index],
        mean_log_loss,
    })
}
