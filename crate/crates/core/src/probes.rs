//! Linear read-out of non-identity attributes from frozen embeddings.
//!
//! Identities are split into disjoint train and test sides, a multinomial
//! logistic regression is trained by full-batch gradient descent on
//! standardized features, and held-out accuracy (plus AUC for binary
//! targets) is reported.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EmbeddingCorpus, EmbeddingRecord};
use crate::emb1::{sidecar_path, Emb1Error, Emb1Matrix};
use crate::metrics;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("no record carries a value for {0:?}")]
    TargetAbsent(String),
    #[error("{found} identities carry {target:?}; a split needs at least 2")]
    TooFewIdentities { target: String, found: usize },
    #[error("split fraction {0} is not in (0, 1)")]
    Fraction(f64),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("{vectors} vectors but {labels} labels")]
    LengthMismatch { vectors: usize, labels: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("label {0:?} is not one of the model's classes")]
    UnknownLabel(String),
    #[error("dimension mismatch: model has {model}, vectors have {vectors}")]
    DimensionMismatch { model: usize, vectors: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("the {0} side of the split holds no labelled images")]
    EmptySide(&'static str),
    #[error(transparent)]
    Emb1(#[from] Emb1Error),
    #[error("model sidecar: {0}")]
    Sidecar(String),
}

/// What a probe predicts: a named attribute, or the record's dataset tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "name")]
pub enum ProbeTarget {
    Attribute(String),
    Dataset,
}

impl ProbeTarget {
    /// `"dataset"` selects the dataset tag; any other name is an attribute.
    pub fn parse(name: &str) -> Self {
        if name == "dataset" {
            ProbeTarget::Dataset
        } else {
            ProbeTarget::Attribute(name.to_string())
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ProbeTarget::Attribute(n) => n,
            ProbeTarget::Dataset => "dataset",
        }
    }

    pub fn label<'a>(&self, record: &'a EmbeddingRecord) -> Option<&'a str> {
        match self {
            ProbeTarget::Attribute(n) => record.attributes.get(n).map(String::as_str),
            ProbeTarget::Dataset => Some(record.dataset.as_str()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSplit {
    pub target: ProbeTarget,
    pub fraction: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Train,
    Test,
}

impl ProbeSplit {
    pub fn side_index(&self) -> HashMap<&str, Side> {
        self.train
            .iter()
            .map(|id| (id.as_str(), Side::Train))
            .chain(self.test.iter().map(|id| (id.as_str(), Side::Test)))
            .collect()
    }
}

/// Shuffles the labelled identities with a seeded generator and sends the
/// first `ceil(fraction * n)` to training (at least one identity stays on
/// each side). Images follow their identity.
pub fn identity_split(
    corpus: &EmbeddingCorpus,
    target: &ProbeTarget,
    fraction: f64,
    seed: u64,
) -> Result<ProbeSplit, ProbeError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ProbeError::Fraction(fraction));
    }
    let mut seen = HashSet::new();
    let mut identities: Vec<String> = corpus
        .records()
        .iter()
        .filter(|r| target.label(r).is_some())
        .filter(|r| seen.insert(r.identity_id.as_str()))
        .map(|r| r.identity_id.clone())
        .collect();
    if identities.is_empty() {
        return Err(ProbeError::TargetAbsent(target.name().to_string()));
    }
    if identities.len() < 2 {
        return Err(ProbeError::TooFewIdentities {
            target: target.name().to_string(),
            found: identities.len(),
        });
    }
    let n = identities.len();
    identities.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let test = identities.split_off(n_train);
    Ok(ProbeSplit {
        target: target.clone(),
        fraction,
        seed,
        train: identities,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub tolerance: f64,
    /// Standardize features with training-set statistics.
    pub standardize: bool,
    /// Cap the step at `1 / L`, `L` an estimate of the loss gradient's
    /// Lipschitz constant, so the loss never increases.
    pub cap_step: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            l2: 1e-4,
            tolerance: 1e-6,
            standardize: true,
            cap_step: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ProbeError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ProbeError::Config("learning_rate must be positive".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(ProbeError::Config("l2 must be non-negative".into()));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(ProbeError::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Multinomial logistic regression over (optionally standardized) features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub classes: Vec<String>,
    /// `classes x dimension`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub feature_mean: Array1<f64>,
    pub feature_scale: Array1<f64>,
    pub config: TrainConfig,
    pub step: f64,
    pub epochs_run: usize,
    /// Regularized training loss before each update, plus the final loss.
    pub loss_history: Vec<f64>,
}

/// Regularized cross-entropy `mean(-log p[y]) + l2/2 * |W|^2` and its
/// gradient with respect to the weights and bias.
pub fn loss_and_gradient(
    weights: &Array2<f64>,
    bias: &Array1<f64>,
    x: ArrayView2<f64>,
    y: &[usize],
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mut resid = x.dot(&weights.t()) + bias;
    let mut nll = 0.0;
    for (mut row, &label) in resid.axis_iter_mut(Axis(0)).zip(y) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let total = row.sum();
        row.mapv_inplace(|e| e / total);
        nll -= row[label].ln();
        row[label] -= 1.0;
    }
    let loss = nll / n + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    let grad_w = resid.t().dot(&x) / n + weights * l2;
    let grad_b = resid.sum_axis(Axis(0)) / n;
    (loss, grad_w, grad_b)
}

/// Upper estimate of the Lipschitz constant of the loss gradient:
/// `lambda_max([X 1]^T [X 1] / n) / 2 + l2`, the top eigenvalue by power
/// iteration padded by 10%.
fn lipschitz_estimate(x: ArrayView2<f64>, l2: f64) -> f64 {
    let (n, d) = x.dim();
    let mut v = Array1::from_elem(d + 1, 1.0 / ((d + 1) as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let xv = x.dot(&v.slice(ndarray::s![..d])) + v[d];
        let mut w = Array1::zeros(d + 1);
        w.slice_mut(ndarray::s![..d]).assign(&x.t().dot(&xv));
        w[d] = xv.sum();
        w /= n as f64;
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            break;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-9 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    1.1 * 0.5 * lambda + l2
}

fn check_finite(x: ArrayView2<f64>) -> Result<(), ProbeError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ProbeError::NonFinite)
    }
}

/// Full-batch gradient descent from zero initialization. Stops after
/// `config.epochs` updates or once the gradient's max-norm drops below
/// `config.tolerance`. Classes are the sorted distinct labels.
pub fn train_probe(vectors: ArrayView2<f64>, labels: &[String], config: &TrainConfig) -> Result<ProbeModel, ProbeError> {
    config.validate()?;
    if vectors.nrows() != labels.len() {
        return Err(ProbeError::LengthMismatch {
            vectors: vectors.nrows(),
            labels: labels.len(),
        });
    }
    check_finite(vectors)?;
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(ProbeError::SingleClass);
    }
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let y: Vec<usize> = labels.iter().map(|l| index[l.as_str()]).collect();

    let d = vectors.ncols();
    let (feature_mean, feature_scale) = if config.standardize {
        let mean = vectors.mean_axis(Axis(0)).unwrap();
        let scale = vectors
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
        (mean, scale)
    } else {
        (Array1::zeros(d), Array1::ones(d))
    };
    let x = (&vectors - &feature_mean) / &feature_scale;

    let step = if config.cap_step {
        config.learning_rate.min(1.0 / lipschitz_estimate(x.view(), config.l2))
    } else {
        config.learning_rate
    };
    let mut weights = Array2::zeros((classes.len(), d));
    let mut bias = Array1::zeros(classes.len());
    let mut loss_history = Vec::with_capacity(config.epochs + 1);
    let mut epochs_run = 0;
    loop {
        let (loss, gw, gb) = loss_and_gradient(&weights, &bias, x.view(), &y, config.l2);
        loss_history.push(loss);
        let gmax = gw.iter().chain(gb.iter()).fold(0.0f64, |m, g| m.max(g.abs()));
        if epochs_run == config.epochs || gmax < config.tolerance {
            break;
        }
        weights.scaled_add(-step, &gw);
        bias.scaled_add(-step, &gb);
        epochs_run += 1;
    }
    if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite);
    }
    Ok(ProbeModel {
        classes,
        weights,
        bias,
        feature_mean,
        feature_scale,
        config: config.clone(),
        step,
        epochs_run,
        loss_history,
    })
}

impl ProbeModel {
    pub fn dimension(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, vectors: ArrayView2<f64>) -> Result<Array2<f64>, ProbeError> {
        if vectors.ncols() != self.dimension() {
            return Err(ProbeError::DimensionMismatch {
                model: self.dimension(),
                vectors: vectors.ncols(),
            });
        }
        let x = (&vectors - &self.feature_mean) / &self.feature_scale;
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }

    /// Arg-max class index per row; the lowest index wins ties.
    pub fn predict(&self, vectors: ArrayView2<f64>) -> Result<Vec<usize>, ProbeError> {
        Ok(self
            .logits(vectors)?
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &z) in row.iter().enumerate() {
                    if z > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Writes feature mean, feature scale and weight rows as EMB1 with a
    /// `.json` sidecar holding classes, bias and training configuration.
    pub fn write(&self, path: &Path) -> Result<(), ProbeError> {
        let data = self
            .feature_mean
            .iter()
            .chain(self.feature_scale.iter())
            .chain(self.weights.iter())
            .map(|&v| v as f32)
            .collect();
        Emb1Matrix::new(self.classes.len() + 2, self.dimension(), data)?.write(path)?;
        let sidecar = ModelSidecar {
            kind: "probe-model".into(),
            classes: self.classes.clone(),
            bias: self.bias.to_vec(),
            config: self.config.clone(),
            step: self.step,
            epochs_run: self.epochs_run,
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| ProbeError::Sidecar(e.to_string()))?;
        let side = sidecar_path(path, ".json");
        fs::write(&side, text + "\n").map_err(|source| Emb1Error::Io { path: side, source }.into())
    }

    pub fn read(path: &Path) -> Result<Self, ProbeError> {
        let m = Emb1Matrix::read(path)?;
        let side = sidecar_path(path, ".json");
        let text = fs::read_to_string(&side).map_err(|source| Emb1Error::Io { path: side, source })?;
        let s: ModelSidecar = serde_json::from_str(&text).map_err(|e| ProbeError::Sidecar(e.to_string()))?;
        if m.rows != s.classes.len() + 2 || s.bias.len() != s.classes.len() {
            return Err(ProbeError::Sidecar("sidecar shape disagrees with the EMB1 file".into()));
        }
        let wide: Vec<f64> = m.data.iter().map(|&v| f64::from(v)).collect();
        let d = m.dim;
        Ok(Self {
            feature_mean: Array1::from(wide[..d].to_vec()),
            feature_scale: Array1::from(wide[d..2 * d].to_vec()),
            weights: Array2::from_shape_vec((s.classes.len(), d), wide[2 * d..].to_vec()).unwrap(),
            bias: Array1::from(s.bias),
            classes: s.classes,
            config: s.config,
            step: s.step,
            epochs_run: s.epochs_run,
            loss_history: Vec::new(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    kind: String,
    classes: Vec<String>,
    bias: Vec<f64>,
    config: TrainConfig,
    step: f64,
    epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub label: String,
    pub count: usize,
    /// `None` when the class has no test examples.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: Option<ProbeTarget>,
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// Binary targets only: AUC of the logit margin of the second class.
    pub auc: Option<f64>,
    pub train_size: usize,
    pub test_size: usize,
    pub train_identities: usize,
    pub test_identities: usize,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
}

/// Held-out accuracy, per-class accuracy and (binary case) AUC.
pub fn eval_probe(model: &ProbeModel, vectors: ArrayView2<f64>, labels: &[String]) -> Result<ProbeReport, ProbeError> {
    if vectors.nrows() != labels.len() {
        return Err(ProbeError::LengthMismatch {
            vectors: vectors.nrows(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(ProbeError::EmptySide("test"));
    }
    check_finite(vectors)?;
    let index: HashMap<&str, usize> = model.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let y = labels
        .iter()
        .map(|l| index.get(l.as_str()).copied().ok_or_else(|| ProbeError::UnknownLabel(l.clone())))
        .collect::<Result<Vec<usize>, _>>()?;
    let logits = model.logits(vectors)?;
    let predicted = model.predict(vectors)?;

    let mut count = vec![0usize; model.classes.len()];
    let mut hit = vec![0usize; model.classes.len()];
    for (&t, &p) in y.iter().zip(&predicted) {
        count[t] += 1;
        hit[t] += usize::from(t == p);
    }
    let per_class = model
        .classes
        .iter()
        .enumerate()
        .map(|(c, label)| ClassAccuracy {
            label: label.clone(),
            count: count[c],
            accuracy: (count[c] > 0).then(|| hit[c] as f64 / count[c] as f64),
        })
        .collect();

    let auc = if model.classes.len() == 2 && count.iter().all(|&c| c > 0) {
        let margin = |i: usize| logits[[i, 1]] - logits[[i, 0]];
        let positive: Vec<f64> = (0..y.len()).filter(|&i| y[i] == 1).map(margin).collect();
        let negative: Vec<f64> = (0..y.len()).filter(|&i| y[i] == 0).map(margin).collect();
        metrics::roc_auc(&positive, &negative).ok()
    } else {
        None
    };

    Ok(ProbeReport {
        target: None,
        accuracy: hit.iter().sum::<usize>() as f64 / y.len() as f64,
        per_class,
        auc,
        train_size: 0,
        test_size: y.len(),
        train_identities: 0,
        test_identities: 0,
        epochs_run: model.epochs_run,
        final_loss: model.loss_history.last().copied(),
    })
}

fn gather(corpus: &EmbeddingCorpus, target: &ProbeTarget, keep: impl Fn(&str) -> bool) -> (Array2<f64>, Vec<String>) {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for r in corpus.records() {
        if let Some(label) = target.label(r) {
            if keep(&r.identity_id) {
                data.extend(r.vector.iter().map(|&v| f64::from(v)));
                labels.push(label.to_string());
            }
        }
    }
    let x = Array2::from_shape_vec((labels.len(), corpus.dimension()), data).unwrap();
    (x, labels)
}

/// Split, train and evaluate one attribute (or dataset-of-origin) probe.
pub fn run_attribute_probe(
    corpus: &EmbeddingCorpus,
    target: &ProbeTarget,
    fraction: f64,
    seed: u64,
    config: &TrainConfig,
) -> Result<ProbeReport, ProbeError> {
    let split = identity_split(corpus, target, fraction, seed)?;
    let sides = split.side_index();
    let (x_train, y_train) = gather(corpus, target, |id| sides.get(id) == Some(&Side::Train));
    let (x_test, y_test) = gather(corpus, target, |id| sides.get(id) == Some(&Side::Test));
    if y_train.is_empty() {
        return Err(ProbeError::EmptySide("train"));
    }
    let model = train_probe(x_train.view(), &y_train, config)?;
    let mut report = eval_probe(&model, x_test.view(), &y_test)?;
    report.target = Some(target.clone());
    report.train_size = y_train.len();
    report.train_identities = split.train.len();
    report.test_identities = split.test.len();
    Ok(report)
}
