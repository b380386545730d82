//! Two-author attribution on embedding scores: k-means, ridge logistic
//! regression, k-nearest neighbours, a Gini random forest, leave-one-out
//! evaluation and the disputed-song prediction table.
//!
//! Label 1 is the first author of the pair (Lennon by default), label 0 the
//! second. Every randomized step draws from a ChaCha20 stream whose seed is
//! derived from the master seed and the index of the unit of work, so
//! sequential and parallel execution agree bit for bit.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::Author;
use crate::error::{Error, Result};
use crate::exec::{derive_seed, map_indexed, rng, Execution};
use crate::linalg::{log_sigmoid, row_vec, sigmoid, squared_distance};
use crate::lpca::Embeddings;

/// Scores with binary author labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub scores: DMatrix<f64>,
    pub labels: Vec<u8>,
    pub titles: Vec<String>,
    /// `classes[l]` is the author carrying label `l`.
    pub classes: [Author; 2],
}

impl LabeledScores {
    pub fn new(scores: DMatrix<f64>, labels: Vec<u8>, titles: Vec<String>, classes: [Author; 2]) -> Result<Self> {
        if labels.len() != scores.nrows() || titles.len() != scores.nrows() {
            return Err(Error::Shape(format!(
                "{} score rows, {} labels, {} titles",
                scores.nrows(),
                labels.len(),
                titles.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("label {bad} is not binary")));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(Self {
            scores,
            labels,
            titles,
            classes,
        })
    }

    /// Rows of `emb` written by `positive` (label 1) or `negative` (label 0).
    pub fn from_embeddings(emb: &Embeddings, positive: Author, negative: Author) -> Result<Self> {
        if positive == negative {
            return Err(Error::InvalidArgument("the two authors must differ".into()));
        }
        let rows = emb.indices_where(|m| m.author == positive || m.author == negative);
        let labels = rows.iter().map(|&i| u8::from(emb.rows[i].author == positive)).collect();
        let titles = rows.iter().map(|&i| emb.rows[i].title.clone()).collect();
        Self::new(emb.scores.select_rows(&rows), labels, titles, [negative, positive])
    }

    pub fn lennon_mccartney(emb: &Embeddings) -> Result<Self> {
        Self::from_embeddings(emb, Author::Lennon, Author::McCartney)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.scores.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        row_vec(&self.scores, i)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            scores: self.scores.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            titles: rows.iter().map(|&i| self.titles[i].clone()).collect(),
            classes: self.classes,
        }
    }

    /// All rows but `row`.
    pub fn without(&self, row: usize) -> Self {
        let keep: Vec<usize> = (0..self.n()).filter(|&i| i != row).collect();
        self.select_rows(&keep)
    }

    /// Swaps the two labels.
    pub fn relabeled(&self) -> Self {
        Self {
            labels: self.labels.iter().map(|l| 1 - l).collect(),
            classes: [self.classes[1], self.classes[0]],
            ..self.clone()
        }
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Errors with the present label when only one class occurs.
    pub fn require_both_classes(&self) -> Result<()> {
        match (self.count(0), self.count(1)) {
            (0, 0) => Err(Error::Empty("no labelled rows".into())),
            (0, _) => Err(Error::SingleClass(1)),
            (_, 0) => Err(Error::SingleClass(0)),
            _ => Ok(()),
        }
    }

    pub fn author(&self, label: u8) -> Author {
        self.classes[label as usize]
    }
}

/// A predicted label with the score for label 1 (probability or vote share).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub score: f64,
}

// ---------------------------------------------------------------- k-means

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_init: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 2,
            n_init: 10,
            max_iterations: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    pub centers: DMatrix<f64>,
    /// Sum of squared distances to the assigned cluster means.
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
    pub restart: usize,
}

impl ClusteringResult {
    /// Fraction of rows whose label equals the majority label of their cluster.
    pub fn majority_accuracy(&self, labels: &[u8]) -> f64 {
        let k = self.centers.nrows();
        let mut counts = vec![[0usize; 2]; k];
        for (&c, &l) in self.assignments.iter().zip(labels) {
            counts[c][l as usize] += 1;
        }
        let correct: usize = counts.iter().map(|c| c[0].max(c[1])).sum();
        correct as f64 / labels.len() as f64
    }
}

fn nearest_center(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = squared_distance(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn cluster_means(points: &[Vec<f64>], assign: &[usize], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (p, &c) in points.iter().zip(assign) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(&counts)
        .zip(old)
        .map(|((s, &n), o)| {
            if n == 0 {
                o.clone()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

fn inertia_of(points: &[Vec<f64>], assign: &[usize], centers: &[Vec<f64>]) -> f64 {
    points.iter().zip(assign).map(|(p, &c)| squared_distance(p, &centers[c])).sum()
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut crate::exec::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest_center(p, &centers).1).collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            Err(_) => rng.random_range(0..n),
        };
        centers.push(points[next].clone());
    }
    centers
}

struct LloydRun {
    assign: Vec<usize>,
    centers: Vec<Vec<f64>>,
    inertia: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iterations: usize) -> LloydRun {
    let k = centers.len();
    let mut assign: Vec<usize> = points.iter().map(|p| nearest_center(p, &centers).0).collect();
    let mut trace = vec![inertia_of(points, &assign, &centers)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        repair_empty_clusters(points, &mut assign, &centers, k);
        centers = cluster_means(points, &assign, &centers);
        let next: Vec<usize> = points.iter().map(|p| nearest_center(p, &centers).0).collect();
        trace.push(inertia_of(points, &next, &centers));
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
    }
    let centers = cluster_means(points, &assign, &centers);
    LloydRun {
        inertia: inertia_of(points, &assign, &centers),
        assign,
        centers,
        iterations,
        converged,
        trace,
    }
}

/// Moves the point farthest from its center into each empty cluster.
fn repair_empty_clusters(points: &[Vec<f64>], assign: &mut [usize], centers: &[Vec<f64>], k: usize) {
    for c in 0..k {
        let mut sizes = vec![0usize; k];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        if sizes[c] > 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| sizes[assign[i]] > 1)
            .map(|i| (i, squared_distance(&points[i], &centers[assign[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = far {
            assign[i] = c;
        }
    }
}

/// Best of `n_init` k-means++ initialised Lloyd runs by final inertia.
pub fn kmeans(scores: &DMatrix<f64>, config: &KMeansConfig, exec: Execution) -> Result<ClusteringResult> {
    let n = scores.nrows();
    if config.k == 0 || n < config.k {
        return Err(Error::InvalidArgument(format!("k-means needs 1 ≤ k ≤ n, got k={} with n={n}", config.k)));
    }
    if config.n_init == 0 {
        return Err(Error::InvalidArgument("n_init must be at least 1".into()));
    }
    let points: Vec<Vec<f64>> = (0..n).map(|i| row_vec(scores, i)).collect();
    let runs = map_indexed(exec, config.n_init, |r| {
        let mut rng = rng(derive_seed(config.seed, r as u64));
        let init = kmeans_plus_plus(&points, config.k, &mut rng);
        lloyd(&points, init, config.max_iterations)
    });
    let (restart, best) = runs
        .into_iter()
        .enumerate()
        .reduce(|a, b| if b.1.inertia < a.1.inertia { b } else { a })
        .expect("n_init is positive");
    let centers = DMatrix::from_fn(config.k, scores.ncols(), |c, j| best.centers[c][j]);
    Ok(ClusteringResult {
        assignments: best.assign,
        centers,
        inertia: best.inertia,
        iterations: best.iterations,
        converged: best.converged,
        inertia_trace: best.trace,
        restart,
    })
}

// ---------------------------------------------------- logistic regression

pub const DEFAULT_RIDGE: f64 = 1e-8;
pub const LOGREG_MAX_ITERATIONS: usize = 100;
pub const LOGREG_GRADIENT_TOL: f64 = 1e-6;
/// A fitted probability within this distance of 0 or 1 counts as separated.
pub const SEPARATION_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Intercept followed by one coefficient per score column.
    pub coefficients: Vec<f64>,
    pub ridge: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_max_norm: f64,
    /// Some training probability is numerically 0 or 1: the data are
    /// (quasi-)separated and the coefficients are not a finite optimum.
    pub separated: bool,
}

impl LogisticModel {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.coefficients[0] + self.coefficients[1..].iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        sigmoid(self.linear_predictor(row))
    }

    pub fn predict(&self, row: &[f64]) -> Prediction {
        let score = self.predict_proba(row);
        Prediction {
            label: u8::from(score > 0.5),
            score,
        }
    }
}

fn design_row(data: &LabeledScores, i: usize) -> impl Iterator<Item = f64> + '_ {
    std::iter::once(1.0).chain(data.scores.row(i).iter().copied().collect::<Vec<_>>())
}

fn eta(data: &LabeledScores, i: usize, beta: &[f64]) -> f64 {
    design_row(data, i).zip(beta).map(|(x, b)| x * b).sum()
}

/// `Σ [y η − log(1 + e^η)] − (ridge/2)·‖β₁..‖²`; the intercept is unpenalized.
pub fn penalized_log_likelihood(data: &LabeledScores, beta: &[f64], ridge: f64) -> f64 {
    let ll: f64 = (0..data.n())
        .map(|i| {
            let t = eta(data, i, beta);
            if data.labels[i] == 1 {
                log_sigmoid(t)
            } else {
                log_sigmoid(-t)
            }
        })
        .sum();
    ll - 0.5 * ridge * beta[1..].iter().map(|b| b * b).sum::<f64>()
}

/// Gradient of [`penalized_log_likelihood`] with respect to `beta`.
pub fn log_likelihood_gradient(data: &LabeledScores, beta: &[f64], ridge: f64) -> Vec<f64> {
    let mut g = vec![0.0; beta.len()];
    for i in 0..data.n() {
        let t = eta(data, i, beta);
        let r = if data.labels[i] == 1 { sigmoid(-t) } else { -sigmoid(t) };
        for (gj, x) in g.iter_mut().zip(design_row(data, i)) {
            *gj += r * x;
        }
    }
    for j in 1..beta.len() {
        g[j] -= ridge * beta[j];
    }
    g
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn solve_spd(h: DMatrix<f64>, g: DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = h.clone().cholesky() {
        return Some(chol.solve(&g));
    }
    h.svd(true, true).solve(&g, 1e-12).ok()
}

/// Ridge-penalized logistic regression by Newton–Raphson (IRLS) with step
/// halving. Stops when the gradient max-norm reaches 1e−6 or after 100
/// iterations; separable data without penalty ends non-converged.
pub fn logreg_fit(train: &LabeledScores, ridge: f64) -> Result<LogisticModel> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge {ridge} must be non-negative")));
    }
    train.require_both_classes()?;
    let p = train.k() + 1;
    let x = DMatrix::from_fn(train.n(), p, |i, j| if j == 0 { 1.0 } else { train.scores[(i, j - 1)] });
    let mut beta = vec![0.0; p];
    let mut objective = penalized_log_likelihood(train, &beta, ridge);
    let mut grad = log_likelihood_gradient(train, &beta, ridge);
    let mut iterations = 0;
    while max_abs(&grad) > LOGREG_GRADIENT_TOL && iterations < LOGREG_MAX_ITERATIONS {
        iterations += 1;
        let eta_v = &x * DVector::from_column_slice(&beta);
        let w = DVector::from_iterator(train.n(), eta_v.iter().map(|&t| sigmoid(t) * sigmoid(-t)));
        let mut h = x.tr_mul(&DMatrix::from_fn(train.n(), p, |i, j| w[i] * x[(i, j)]));
        for j in 1..p {
            h[(j, j)] += ridge;
        }
        let Some(step) = solve_spd(h, DVector::from_column_slice(&grad)) else {
            break;
        };
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let value = penalized_log_likelihood(train, &cand, ridge);
            if value >= objective {
                beta = cand;
                objective = value;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
        grad = log_likelihood_gradient(train, &beta, ridge);
    }
    let gradient_max_norm = max_abs(&grad);
    let separated = (0..train.n()).any(|i| {
        let p = sigmoid(eta(train, i, &beta));
        p < SEPARATION_EPS || p > 1.0 - SEPARATION_EPS
    });
    Ok(LogisticModel {
        coefficients: beta,
        ridge,
        iterations,
        converged: gradient_max_norm <= LOGREG_GRADIENT_TOL && !separated,
        gradient_max_norm,
        separated,
    })
}

// ------------------------------------------------------ nearest neighbours

pub const DEFAULT_K_NEIGHBORS: usize = 5;

/// Euclidean k-nearest-neighbour vote. Distance ties go to the lower
/// training index; an even split of votes goes to the nearest neighbour.
pub fn knn_predict(train: &LabeledScores, queries: &DMatrix<f64>, k_neighbors: usize) -> Result<Vec<Prediction>> {
    if k_neighbors == 0 || k_neighbors > train.n() {
        return Err(Error::InvalidArgument(format!(
            "k_neighbors must lie in 1..={}, got {k_neighbors}",
            train.n()
        )));
    }
    if queries.ncols() != train.k() {
        return Err(Error::Shape(format!("queries have {} columns, training data {}", queries.ncols(), train.k())));
    }
    let rows: Vec<Vec<f64>> = (0..train.n()).map(|i| train.row(i)).collect();
    Ok((0..queries.nrows())
        .map(|q| {
            let query = row_vec(queries, q);
            let mut order: Vec<(f64, usize)> = rows.iter().enumerate().map(|(i, r)| (squared_distance(&query, r), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let ones = order[..k_neighbors].iter().filter(|(_, i)| train.labels[*i] == 1).count();
            let label = match (2 * ones).cmp(&k_neighbors) {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => 0,
                std::cmp::Ordering::Equal => train.labels[order[0].1],
            };
            Prediction {
                label,
                score: ones as f64 / k_neighbors as f64,
            }
        })
        .collect())
}

// ----------------------------------------------------------- random forest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub mtry: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 1000,
            mtry: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf { label: u8 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Nodes in creation order; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> u8 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { label } => return label,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
    /// Out-of-bag accuracy over rows left out by at least one tree.
    pub oob_accuracy: Option<f64>,
}

impl Forest {
    pub fn votes(&self, row: &[f64]) -> usize {
        self.trees.iter().filter(|t| t.predict(row) == 1).count()
    }

    /// Majority vote; a tie goes to label 0.
    pub fn predict(&self, row: &[f64]) -> Prediction {
        let ones = self.votes(row);
        Prediction {
            label: u8::from(2 * ones > self.trees.len()),
            score: ones as f64 / self.trees.len() as f64,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn majority(labels: &[u8], idx: &[usize]) -> u8 {
    let ones = idx.iter().filter(|&&i| labels[i] == 1).count();
    u8::from(2 * ones > idx.len())
}

fn gini_weighted(ones: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let zeros = total - ones;
    total as f64 - ((ones * ones + zeros * zeros) as f64) / total as f64
}

/// Threshold between node values `lo < hi`: the midpoint of the central gap
/// among the distinct training values of the column lying in `[lo, hi]`.
/// Gaps are chosen by rank, so every training value lands on the same side
/// after any strictly increasing transform of the column.
fn split_threshold(unique: &[f64], lo: f64, hi: f64) -> f64 {
    let a = unique.partition_point(|&u| u < lo);
    let b = unique.partition_point(|&u| u < hi);
    let g = a + (b - a - 1) / 2;
    let (left, right) = (unique[g], unique[g + 1]);
    let mid = 0.5 * (left + right);
    if mid < right {
        mid
    } else {
        left
    }
}

/// Best split of the node rows `idx` among `features`: the smallest
/// size-weighted child Gini impurity over midpoints between distinct values.
fn best_split(data: &LabeledScores, unique: &[Vec<f64>], idx: &[usize], features: &[usize]) -> Option<(usize, f64)> {
    let total_ones = idx.iter().filter(|&&i| data.labels[i] == 1).count();
    let parent = gini_weighted(total_ones, idx.len());
    let mut best: Option<(f64, usize, f64)> = None;
    for &f in features {
        let mut sorted: Vec<(f64, u8)> = idx.iter().map(|&i| (data.scores[(i, f)], data.labels[i])).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left_ones = 0;
        for s in 0..sorted.len() - 1 {
            left_ones += sorted[s].1 as usize;
            if sorted[s].0 == sorted[s + 1].0 {
                continue;
            }
            let nl = s + 1;
            let impurity = gini_weighted(left_ones, nl) + gini_weighted(total_ones - left_ones, idx.len() - nl);
            if impurity < parent && best.is_none_or(|b| impurity < b.0) {
                best = Some((impurity, f, split_threshold(&unique[f], sorted[s].0, sorted[s + 1].0)));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

fn grow_tree(data: &LabeledScores, unique: &[Vec<f64>], sample: Vec<usize>, mtry: usize, rng: &mut crate::exec::Rng) -> Tree {
    let mut nodes = vec![Node::Leaf { label: 0 }];
    let mut stack = vec![(0usize, sample)];
    while let Some((id, idx)) = stack.pop() {
        let ones = idx.iter().filter(|&&i| data.labels[i] == 1).count();
        if ones == 0 || ones == idx.len() {
            nodes[id] = Node::Leaf { label: u8::from(ones > 0) };
            continue;
        }
        let features = rand::seq::index::sample(rng, data.k(), mtry).into_vec();
        match best_split(data, unique, &idx, &features) {
            None => nodes[id] = Node::Leaf { label: majority(&data.labels, &idx) },
            Some((feature, threshold)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| data.scores[(i, feature)] <= threshold);
                let left = nodes.len();
                nodes.push(Node::Leaf { label: 0 });
                nodes.push(Node::Leaf { label: 0 });
                nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right: left + 1,
                };
                stack.push((left + 1, r));
                stack.push((left, l));
            }
        }
    }
    Tree { nodes }
}

/// Random forest of Gini trees grown to purity on bootstrap samples, with
/// `mtry` candidate features per node. Tree `t` draws from seed
/// `derive_seed(seed, t)`. A single-class training set gives a constant forest.
pub fn rf_fit(train: &LabeledScores, config: &ForestConfig, exec: Execution) -> Result<Forest> {
    let n = train.n();
    if n == 0 {
        return Err(Error::Empty("no training rows".into()));
    }
    if config.n_trees == 0 {
        return Err(Error::InvalidArgument("n_trees must be at least 1".into()));
    }
    if config.mtry == 0 || config.mtry > train.k() {
        return Err(Error::InvalidArgument(format!(
            "mtry must lie in 1..={}, got {}",
            train.k(),
            config.mtry
        )));
    }
    let unique: Vec<Vec<f64>> = (0..train.k())
        .map(|f| {
            let mut col: Vec<f64> = train.scores.column(f).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            col.dedup();
            col
        })
        .collect();
    let grown = map_indexed(exec, config.n_trees, |t| {
        let mut rng = rng(derive_seed(config.seed, t as u64));
        let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut in_bag = vec![false; n];
        for &i in &sample {
            in_bag[i] = true;
        }
        (grow_tree(train, &unique, sample, config.mtry, &mut rng), in_bag)
    });
    let mut oob_votes = vec![[0usize; 2]; n];
    for (tree, in_bag) in &grown {
        for i in (0..n).filter(|&i| !in_bag[i]) {
            oob_votes[i][tree.predict(&train.row(i)) as usize] += 1;
        }
    }
    let scored: Vec<usize> = (0..n).filter(|&i| oob_votes[i][0] + oob_votes[i][1] > 0).collect();
    let oob_accuracy = (!scored.is_empty()).then(|| {
        let correct = scored
            .iter()
            .filter(|&&i| u8::from(oob_votes[i][1] > oob_votes[i][0]) == train.labels[i])
            .count();
        correct as f64 / scored.len() as f64
    });
    Ok(Forest {
        config: config.clone(),
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        oob_accuracy,
    })
}

// ------------------------------------------------------------- evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Logreg { ridge: f64 },
    Knn { k_neighbors: usize },
    Rf { n_trees: usize, mtry: usize, seed: u64 },
}

impl Method {
    pub fn logreg() -> Self {
        Method::Logreg { ridge: DEFAULT_RIDGE }
    }

    pub fn knn() -> Self {
        Method::Knn {
            k_neighbors: DEFAULT_K_NEIGHBORS,
        }
    }

    pub fn rf(seed: u64) -> Self {
        let d = ForestConfig::default();
        Method::Rf {
            n_trees: d.n_trees,
            mtry: d.mtry,
            seed,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Logreg { .. } => "logreg",
            Method::Knn { .. } => "knn",
            Method::Rf { .. } => "rf",
        }
    }

    /// Fits on `train` and predicts every row of `queries`.
    pub fn fit_predict(&self, train: &LabeledScores, queries: &DMatrix<f64>, exec: Execution) -> Result<Vec<Prediction>> {
        if queries.ncols() != train.k() {
            return Err(Error::Shape(format!("queries have {} columns, training data {}", queries.ncols(), train.k())));
        }
        let rows = || (0..queries.nrows()).map(|i| row_vec(queries, i));
        match *self {
            Method::Logreg { ridge } => {
                let model = logreg_fit(train, ridge)?;
                Ok(rows().map(|r| model.predict(&r)).collect())
            }
            Method::Knn { k_neighbors } => knn_predict(train, queries, k_neighbors),
            Method::Rf { n_trees, mtry, seed } => {
                let forest = rf_fit(train, &ForestConfig { n_trees, mtry, seed }, exec)?;
                Ok(rows().map(|r| forest.predict(&r)).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub title: String,
    pub truth: u8,
    pub predicted: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub method: Method,
    pub classes: [Author; 2],
    pub rows: Vec<LooRow>,
    pub accuracy: f64,
}

impl LooReport {
    pub fn predictions(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.predicted).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["title", "true_author", "predicted_author", "true_label", "predicted_label", "score"])?;
        for r in &self.rows {
            w.write_record([
                r.title.clone(),
                self.classes[r.truth as usize].to_string(),
                self.classes[r.predicted as usize].to_string(),
                r.truth.to_string(),
                r.predicted.to_string(),
                format!("{:?}", r.score),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Leave-one-out: row `i` is predicted by a model fitted on the other rows.
/// The embedding itself stays fixed.
pub fn loo_evaluate(method: &Method, data: &LabeledScores, exec: Execution) -> Result<LooReport> {
    if data.n() < 2 {
        return Err(Error::InvalidArgument(format!("leave-one-out needs at least 2 rows, got {}", data.n())));
    }
    data.require_both_classes()?;
    let inner = if matches!(method, Method::Rf { .. }) { exec } else { Execution::Sequential };
    let folds = map_indexed(exec, data.n(), |i| {
        let query = data.scores.select_rows(&[i]);
        method
            .fit_predict(&data.without(i), &query, inner)
            .map(|p| p[0])
            .map_err(|e| Error::Fold {
                fold: i,
                source: Box::new(e),
            })
    });
    let mut rows = Vec::with_capacity(data.n());
    for (i, fold) in folds.into_iter().enumerate() {
        let p = fold?;
        rows.push(LooRow {
            title: data.titles[i].clone(),
            truth: data.labels[i],
            predicted: p.label,
            score: p.score,
        });
    }
    let correct = rows.iter().filter(|r| r.truth == r.predicted).count();
    Ok(LooReport {
        method: method.clone(),
        classes: data.classes,
        accuracy: correct as f64 / rows.len() as f64,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodPrediction {
    pub method: String,
    pub author: Author,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisputedRow {
    pub title: String,
    pub predictions: Vec<MethodPrediction>,
    pub external: Option<Author>,
    /// All methods, and the external reference when present, agree.
    pub agreement: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisputedTable {
    pub methods: Vec<String>,
    pub has_external: bool,
    pub rows: Vec<DisputedRow>,
}

impl DisputedTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["title".to_string()];
        for m in &self.methods {
            header.push(m.clone());
            header.push(format!("{m}_score"));
        }
        if self.has_external {
            header.push("external".into());
        }
        header.push("agreement".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.title.clone()];
            for p in &r.predictions {
                rec.push(p.author.to_string());
                rec.push(format!("{:?}", p.score));
            }
            if self.has_external {
                rec.push(r.external.map(|a| a.to_string()).unwrap_or_default());
            }
            rec.push(r.agreement.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads an external reference column: CSV with `title` and `author` columns.
pub fn read_external_predictions<R: std::io::Read>(reader: R) -> Result<BTreeMap<String, Author>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format(format!("external predictions need a '{name}' column")))
    };
    let (title, author) = (col("title")?, col("author")?);
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let value = rec.get(author).unwrap_or("").trim();
        let parsed = Author::parse_lenient(value);
        if parsed == Author::Other {
            return Err(Error::Parse {
                row: i + 1,
                column: "author".into(),
                message: format!("'{value}' is not an attributable author"),
            });
        }
        out.insert(rec.get(title).unwrap_or("").trim().to_string(), parsed);
    }
    Ok(out)
}

/// Predicts each disputed row with every method fitted on all of `train`.
pub fn predict_disputed(
    methods: &[Method],
    train: &LabeledScores,
    disputed: &DMatrix<f64>,
    titles: &[String],
    external: Option<&BTreeMap<String, Author>>,
    exec: Execution,
) -> Result<DisputedTable> {
    if titles.len() != disputed.nrows() {
        return Err(Error::Shape(format!("{} disputed rows, {} titles", disputed.nrows(), titles.len())));
    }
    train.require_both_classes()?;
    let per_method = methods
        .iter()
        .map(|m| m.fit_predict(train, disputed, exec))
        .collect::<Result<Vec<_>>>()?;
    let rows = titles
        .iter()
        .enumerate()
        .map(|(i, title)| {
            let predictions: Vec<MethodPrediction> = methods
                .iter()
                .zip(&per_method)
                .map(|(m, p)| MethodPrediction {
                    method: m.name().to_string(),
                    author: train.author(p[i].label),
                    score: p[i].score,
                })
                .collect();
            let ext = external.and_then(|e| e.get(title).copied());
            let mut authors = predictions.iter().map(|p| p.author).chain(ext);
            let first = authors.next();
            let agreement = authors.all(|a| Some(a) == first);
            DisputedRow {
                title: title.clone(),
                predictions,
                external: ext,
                agreement,
            }
        })
        .collect();
    Ok(DisputedTable {
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        has_external: external.is_some(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn blobs(n_per: usize, k: usize, gap: f64, seed: u64) -> LabeledScores {
        let mut rng = rng(seed);
        let n = 2 * n_per;
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let scores = DMatrix::from_fn(n, k, |i, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + if j == 0 && labels[i] == 1 { gap } else { 0.0 }
        });
        let titles = (0..n).map(|i| format!("s{i}")).collect();
        LabeledScores::new(scores, labels, titles, [Author::McCartney, Author::Lennon]).unwrap()
    }

    #[test]
    fn kmeans_separates_blobs_and_descends() {
        let data = blobs(30, 3, 10.0, 1);
        let res = kmeans(&data.scores, &KMeansConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(res.majority_accuracy(&data.labels), 1.0);
        assert!(res.converged);
        assert!(res.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let par = kmeans(&data.scores, &KMeansConfig::default(), Execution::Parallel).unwrap();
        assert_eq!(res, par);
    }

    #[test]
    fn kmeans_rejects_too_many_clusters() {
        let m = DMatrix::zeros(2, 2);
        let cfg = KMeansConfig { k: 3, ..KMeansConfig::default() };
        assert!(kmeans(&m, &cfg, Execution::Sequential).is_err());
    }

    #[test]
    fn kmeans_inertia_matches_assignment() {
        let data = blobs(20, 2, 1.0, 4);
        let res = kmeans(&data.scores, &KMeansConfig { k: 3, ..KMeansConfig::default() }, Execution::Sequential).unwrap();
        let mut expect = 0.0;
        for c in 0..3 {
            let members: Vec<usize> = (0..data.n()).filter(|&i| res.assignments[i] == c).collect();
            for j in 0..2 {
                let mean = members.iter().map(|&i| data.scores[(i, j)]).sum::<f64>() / members.len() as f64;
                expect += members.iter().map(|&i| (data.scores[(i, j)] - mean).powi(2)).sum::<f64>();
            }
        }
        assert!((res.inertia - expect).abs() < 1e-9);
    }

    #[test]
    fn logreg_gradient_matches_finite_differences() {
        let data = blobs(15, 3, 1.0, 7);
        let beta = vec![0.3, -0.2, 0.5, 0.1];
        let g = log_likelihood_gradient(&data, &beta, 0.1);
        let h = 1e-5;
        for j in 0..beta.len() {
            let mut up = beta.clone();
            let mut down = beta.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (penalized_log_likelihood(&data, &up, 0.1) - penalized_log_likelihood(&data, &down, 0.1)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-4 * g[j].abs().max(1e-2));
        }
    }

    #[test]
    fn logreg_zero_scores_give_zero_coefficients() {
        let scores = DMatrix::zeros(6, 2);
        let data = LabeledScores::new(scores, vec![1, 0, 1, 0, 1, 0], vec![String::new(); 6], [Author::McCartney, Author::Lennon]).unwrap();
        let model = logreg_fit(&data, DEFAULT_RIDGE).unwrap();
        assert!(model.coefficients.iter().all(|b| b.abs() < 1e-8));
        assert!(model.converged);
    }

    #[test]
    fn logreg_separable_is_finite_with_correct_sign() {
        let scores = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let data = LabeledScores::new(scores, vec![0, 0, 0, 1, 1, 1], vec![String::new(); 6], [Author::McCartney, Author::Lennon]).unwrap();
        let model = logreg_fit(&data, 1e-4).unwrap();
        assert!(model.coefficients.iter().all(|b| b.is_finite()));
        assert!(model.coefficients[1] > 0.0);
        let loose = logreg_fit(&data, 0.0).unwrap();
        assert!(loose.separated);
        assert!(!loose.converged);
    }

    #[test]
    fn logreg_shift_and_relabel() {
        let data = blobs(20, 2, 1.5, 9);
        let model = logreg_fit(&data, DEFAULT_RIDGE).unwrap();
        let mut shifted = data.clone();
        for i in 0..shifted.n() {
            shifted.scores[(i, 1)] += 4.0;
        }
        let model_s = logreg_fit(&shifted, DEFAULT_RIDGE).unwrap();
        for i in 0..data.n() {
            assert!((model.predict_proba(&data.row(i)) - model_s.predict_proba(&shifted.row(i))).abs() < 1e-8);
        }
        let flipped = logreg_fit(&data.relabeled(), DEFAULT_RIDGE).unwrap();
        for i in 0..data.n() {
            assert_eq!(model.predict(&data.row(i)).label, 1 - flipped.predict(&data.row(i)).label);
        }
    }

    #[test]
    fn knn_basics() {
        let data = blobs(5, 2, 3.0, 2);
        let q = data.scores.select_rows(&[3]);
        assert_eq!(knn_predict(&data, &q, 1).unwrap()[0].label, data.labels[3]);
        let scores = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let votes = LabeledScores::new(scores, vec![1, 1, 0, 1, 1], vec![String::new(); 5], [Author::McCartney, Author::Lennon]).unwrap();
        let q = DMatrix::from_column_slice(1, 1, &[2.0]);
        let p = knn_predict(&votes, &q, 5).unwrap()[0];
        assert_eq!(p.label, 1);
        assert!((p.score - 0.8).abs() < 1e-15);
        assert!(knn_predict(&votes, &q, 6).is_err());
    }

    #[test]
    fn forest_is_deterministic_and_separates() {
        let data = blobs(20, 4, 8.0, 3);
        let cfg = ForestConfig { n_trees: 50, mtry: 2, seed: 11 };
        let a = rf_fit(&data, &cfg, Execution::Sequential).unwrap();
        let b = rf_fit(&data, &cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.oob_accuracy.unwrap() >= 0.95);
        let json = a.to_json().unwrap();
        assert!(json.contains("\"kind\""));
    }

    #[test]
    fn forest_single_class_is_constant() {
        let mut data = blobs(5, 2, 1.0, 3);
        data.labels = vec![1; data.n()];
        let forest = rf_fit(&data, &ForestConfig { n_trees: 5, mtry: 1, seed: 0 }, Execution::Sequential).unwrap();
        assert!(forest.trees.iter().all(|t| t.nodes == vec![Node::Leaf { label: 1 }]));
    }

    #[test]
    fn thresholds_split_the_central_rank_gap() {
        let unique = [0.0, 1.0, 2.0, 12.0, 13.0];
        assert_eq!(split_threshold(&unique, 1.0, 12.0), 1.5);
        assert_eq!(split_threshold(&unique, 0.0, 12.0), 1.5);
        assert_eq!(split_threshold(&unique, 2.0, 12.0), 7.0);
        assert_eq!(split_threshold(&[1.0, f64::from_bits(1.0f64.to_bits() + 1)], 1.0, f64::from_bits(1.0f64.to_bits() + 1)), 1.0);
    }

    #[test]
    fn loo_on_wide_margin_is_perfect() {
        let data = blobs(10, 2, 12.0, 5);
        for method in [Method::logreg(), Method::knn(), Method::Rf { n_trees: 25, mtry: 1, seed: 2 }] {
            let report = loo_evaluate(&method, &data, Execution::Parallel).unwrap();
            assert_eq!(report.accuracy, 1.0, "{}", method.name());
            let flipped = loo_evaluate(&method, &data.relabeled(), Execution::Parallel).unwrap();
            for (a, b) in report.rows.iter().zip(&flipped.rows) {
                assert_eq!(a.predicted, 1 - b.predicted);
            }
        }
    }

    #[test]
    fn loo_rejects_single_class() {
        let mut data = blobs(3, 2, 1.0, 5);
        data.labels = vec![0; data.n()];
        assert!(matches!(loo_evaluate(&Method::knn(), &data, Execution::Sequential), Err(Error::SingleClass(0))));
    }

    #[test]
    fn disputed_duplicate_of_training_row_agrees() {
        let data = blobs(10, 2, 12.0, 6);
        let deep = (0..data.n()).find(|&i| data.labels[i] == 1).unwrap();
        let disputed = data.scores.select_rows(&[deep]);
        let methods = [Method::logreg(), Method::knn(), Method::Rf { n_trees: 25, mtry: 1, seed: 0 }];
        let mut external = BTreeMap::new();
        external.insert("x".to_string(), Author::Lennon);
        let table = predict_disputed(&methods, &data, &disputed, &["x".into()], Some(&external), Execution::Sequential).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.methods.len(), 3);
        assert!(table.rows[0].agreement);
        assert!(table.rows[0].predictions.iter().all(|p| p.author == Author::Lennon));
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("title,logreg,logreg_score,knn,knn_score,rf,rf_score,external,agreement\n"));
    }

    #[test]
    fn external_predictions_parse() {
        let map = read_external_predictions("title,author\nHelp,Lennon\nYesterday,McCartney\n".as_bytes()).unwrap();
        assert_eq!(map["Help"], Author::Lennon);
        assert!(read_external_predictions("title,author\nX,Ringo\n".as_bytes()).is_err());
    }
}
