//! Logistic regression, linear SVM and MLP detectors over standardized
//! features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::features::{FeatureSet, Pooling};
use super::DetectError;
use crate::numcore::{Graph, Tensor, Var};
use crate::train::{AdamConfig, AdamW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    #[default]
    LogisticRegression,
    LinearSvm,
    Mlp,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [Self::LogisticRegression, Self::LinearSvm, Self::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            Self::LogisticRegression => "logistic-regression",
            Self::LinearSvm => "linear-svm",
            Self::Mlp => "mlp",
        }
    }

    fn default_learning_rate(self) -> f64 {
        match self {
            Self::Mlp => 1e-3,
            _ => 0.05,
        }
    }
}

/// Classifier, pooling and optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub pooling: Pooling,
    pub features: FeatureSet,
    /// Feed log lens probabilities instead of probabilities.
    pub log_space: bool,
    /// MLP hidden layer widths.
    pub hidden: Vec<usize>,
    /// Full-batch iterations for linear models, epochs for the MLP.
    pub max_iter: usize,
    /// Adam step size; the kind's default when absent.
    pub learning_rate: Option<f64>,
    /// Inverse L2 strength for the linear models.
    pub c: f64,
    /// L2 penalty on MLP weights.
    pub alpha: f64,
    pub batch_size: usize,
    /// MLP only: hold out a validation split and stop when its accuracy
    /// stalls.
    pub early_stopping: bool,
    pub validation_fraction: f64,
    pub n_iter_no_change: usize,
    pub tol: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::default(),
            pooling: Pooling::default(),
            features: FeatureSet::default(),
            log_space: false,
            hidden: vec![256, 128, 128, 64],
            max_iter: 1000,
            learning_rate: None,
            c: 1.0,
            alpha: 1e-4,
            batch_size: 200,
            early_stopping: true,
            validation_fraction: 0.1,
            n_iter_no_change: 10,
            tol: 1e-4,
        }
    }
}

impl ClassifierSpec {
    pub fn new(kind: ClassifierKind, pooling: Pooling) -> Self {
        Self {
            kind,
            pooling,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: String| Err(DetectError::InvalidSpec(m));
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if self.kind == ClassifierKind::Mlp && (self.hidden.is_empty() || self.hidden.contains(&0)) {
            return bad(format!(
                "mlp hidden sizes {:?} must be non-empty and positive",
                self.hidden
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            ));
        }
        if !(self.c > 0.0 && self.alpha >= 0.0 && self.tol >= 0.0) || self.batch_size == 0 {
            return bad("c must be positive; alpha and tol non-negative; batch size at least 1".into());
        }
        if let Some(lr) = self.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("learning rate {lr} must be positive"));
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| self.kind.default_learning_rate())
    }
}

/// Per-feature z-score parameters fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation, 1 for constant features.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, DetectError> {
        let d = check_rows(rows)?;
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..d)
            .map(|j| {
                let s = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>, DetectError> {
        if row.len() != self.dim() {
            return Err(DetectError::Dimension {
                expected: self.dim(),
                actual: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize, DetectError> {
    let d = rows.first().ok_or(DetectError::EmptyInput)?.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(DetectError::Ragged);
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(DetectError::NonFiniteFeature);
    }
    Ok(d)
}

/// Dense layer with `w` stored row-major as `[inputs][outputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64], relu: bool) -> Vec<f64> {
        let mut out = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w[i * self.outputs..(i + 1) * self.outputs];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        out
    }
}

/// Learned decision function producing one logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Network {
    Linear { w: Vec<f64>, b: f64 },
    Mlp { layers: Vec<Dense> },
}

impl Network {
    fn logit(&self, x: &[f64]) -> f64 {
        match self {
            Self::Linear { w, b } => b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>(),
            Self::Mlp { layers } => {
                let mut h = x.to_vec();
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.apply(&h, i + 1 < layers.len());
                }
                h[0]
            }
        }
    }
}

/// Label (true = hallucinated) and decision score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: bool,
    /// Probability for logistic regression and the MLP, signed margin for
    /// the SVM.
    pub score: f64,
}

/// A fitted detector: standardizer plus network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub spec: ClassifierSpec,
    pub scaler: Standardizer,
    pub network: Network,
}

impl Detector {
    pub fn predict(&self, features: &[f64]) -> Result<Prediction, DetectError> {
        let x = self.scaler.transform(features)?;
        let z = self.network.logit(&x);
        let score = match self.spec.kind {
            ClassifierKind::LinearSvm => z,
            _ => sigmoid(z),
        };
        Ok(Prediction { label: z > 0.0, score })
    }

    pub fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Prediction>, DetectError> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Optimisation summary returned with a fitted detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Early-stopping split accuracy of the restored MLP weights.
    pub validation_accuracy: Option<f64>,
}

fn matrix(rows: &[&Vec<f64>]) -> Tensor<f64> {
    let d = rows[0].len();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data).expect("rows share a length")
}

fn signs(labels: &[bool]) -> Tensor<f64> {
    let data: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { -1.0 }).collect();
    Tensor::new(vec![labels.len(), 1], data).expect("column vector")
}

/// Data term of the loss for logits `z` and `±1` targets `s`.
fn data_loss(g: &mut Graph<f64>, kind: ClassifierKind, z: Var, s: Var) -> Result<Var, DetectError> {
    let sz = g.mul(z, s)?;
    let per = match kind {
        ClassifierKind::LinearSvm => {
            let n = g.value(sz).shape()[0];
            let ones = g.constant(Tensor::full(&[n, 1], 1.0))?;
            let slack = g.sub(ones, sz)?;
            let hinge = g.relu(slack)?;
            g.mul(hinge, hinge)?
        }
        _ => {
            let ls = g.log_sigmoid(sz)?;
            g.neg(ls)?
        }
    };
    Ok(g.mean(per)?)
}

fn l2(g: &mut Graph<f64>, weights: &[Var], strength: f64) -> Result<Option<Var>, DetectError> {
    if strength == 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for &w in weights {
        let sq = g.mul(w, w)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(match total {
        Some(t) => Some(g.scale(t, strength / 2.0)?),
        None => None,
    })
}

fn accuracy(net: &Network, rows: &[Vec<f64>], labels: &[bool]) -> f64 {
    let hits = rows
        .iter()
        .zip(labels)
        .filter(|(r, &y)| (net.logit(r) > 0.0) == y)
        .count();
    hits as f64 / rows.len().max(1) as f64
}

fn max_abs(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
}

fn fit_linear(x: &[Vec<f64>], y: &[bool], spec: &ClassifierSpec) -> Result<(Network, FitReport), DetectError> {
    let d = x[0].len();
    let n = x.len();
    let rows: Vec<&Vec<f64>> = x.iter().collect();
    let xm = matrix(&rows);
    let s = signs(y);
    let mut w = Tensor::<f64>::zeros(&[d, 1]);
    let mut b = Tensor::<f64>::zeros(&[1]);
    let mut opt = AdamW::new(AdamConfig::default(), 0.0);
    let strength = 1.0 / (spec.c * n as f64);
    let (mut iterations, mut converged, mut final_loss) = (0, false, f64::NAN);
    for _ in 0..spec.max_iter {
        let mut g = Graph::new();
        let xv = g.constant(xm.clone())?;
        let sv = g.constant(s.clone())?;
        let wv = g.param(w.clone())?;
        let bv = g.param(b.clone())?;
        let xw = g.matmul(xv, wv)?;
        let z = g.add_row(xw, bv)?;
        let mut loss = data_loss(&mut g, spec.kind, z, sv)?;
        if let Some(reg) = l2(&mut g, &[wv], strength)? {
            loss = g.add(loss, reg)?;
        }
        final_loss = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        let gs = vec![grads.get_or_zeros(wv, d), grads.get_or_zeros(bv, 1)];
        iterations += 1;
        if max_abs(&gs) < spec.tol {
            converged = true;
            break;
        }
        opt.step(
            &mut [("w".to_string(), &mut w), ("b".to_string(), &mut b)],
            &gs,
            spec.lr(),
        )
        .map_err(|e| DetectError::Training(e.to_string()))?;
    }
    let net = Network::Linear {
        w: w.into_vec(),
        b: b.data()[0],
    };
    let train_accuracy = accuracy(&net, x, y);
    Ok((
        net,
        FitReport {
            iterations,
            converged,
            final_loss,
            train_accuracy,
            validation_accuracy: None,
        },
    ))
}

/// Stratified hold-out: about `fraction` of each class, at least one sample
/// per class when that class has two or more.
fn stratified_split(y: &[bool], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(rng);
        let k = if idx.len() >= 2 {
            ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn glorot(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Dense {
    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    Dense {
        inputs,
        outputs,
        w: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
        b: (0..outputs).map(|_| dist.sample(rng)).collect(),
    }
}

fn fit_mlp(x: &[Vec<f64>], y: &[bool], spec: &ClassifierSpec, seed: u64) -> Result<(Network, FitReport), DetectError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_idx, val_idx) = if spec.early_stopping {
        stratified_split(y, spec.validation_fraction, &mut rng)
    } else {
        ((0..y.len()).collect(), Vec::new())
    };
    let val_x: Vec<Vec<f64>> = val_idx.iter().map(|&i| x[i].clone()).collect();
    let val_y: Vec<bool> = val_idx.iter().map(|&i| y[i]).collect();
    let use_val = !val_idx.is_empty();

    let mut widths = vec![x[0].len()];
    widths.extend(&spec.hidden);
    widths.push(1);
    let mut layers: Vec<Dense> = widths.windows(2).map(|w| glorot(&mut rng, w[0], w[1])).collect();
    let mut tensors: Vec<Tensor<f64>> = layers
        .iter()
        .flat_map(|l| {
            [
                Tensor::new(vec![l.inputs, l.outputs], l.w.clone()).expect("layer shape"),
                Tensor::new(vec![l.outputs], l.b.clone()).expect("bias shape"),
            ]
        })
        .collect();
    let names: Vec<String> = (0..tensors.len()).map(|i| format!("p{i}")).collect();
    let mut opt = AdamW::new(AdamConfig::default(), 0.0);
    let batch = spec.batch_size.min(train_idx.len()).max(1);
    let n_train = train_idx.len() as f64;

    let to_net = |tensors: &[Tensor<f64>], layers: &mut Vec<Dense>| {
        for (l, pair) in layers.iter_mut().zip(tensors.chunks(2)) {
            l.w = pair[0].data().to_vec();
            l.b = pair[1].data().to_vec();
        }
        Network::Mlp { layers: layers.clone() }
    };

    let mut best_score = f64::NEG_INFINITY;
    let mut best_tensors = tensors.clone();
    let mut stall = 0;
    let (mut iterations, mut converged, mut final_loss) = (0, false, f64::NAN);
    let mut order = train_idx.clone();
    for _ in 0..spec.max_iter {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let rows: Vec<&Vec<f64>> = chunk.iter().map(|&i| &x[i]).collect();
            let labels: Vec<bool> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let params = tensors
                .iter()
                .map(|t| g.param(t.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            let mut h = g.constant(matrix(&rows))?;
            for (k, pair) in params.chunks(2).enumerate() {
                let xw = g.matmul(h, pair[0])?;
                h = g.add_row(xw, pair[1])?;
                if k + 1 < params.len() / 2 {
                    h = g.relu(h)?;
                }
            }
            let sv = g.constant(signs(&labels))?;
            let mut loss = data_loss(&mut g, spec.kind, h, sv)?;
            let weights: Vec<Var> = params.iter().step_by(2).copied().collect();
            if let Some(reg) = l2(&mut g, &weights, spec.alpha / n_train)? {
                loss = g.add(loss, reg)?;
            }
            epoch_loss += g.value(loss).item()? * chunk.len() as f64 / n_train;
            let grads = g.backward(loss)?;
            let gs: Vec<Vec<f64>> = params
                .iter()
                .zip(&tensors)
                .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
                .collect();
            let mut named: Vec<(String, &mut Tensor<f64>)> = names.iter().cloned().zip(tensors.iter_mut()).collect();
            opt.step(&mut named, &gs, spec.lr())
                .map_err(|e| DetectError::Training(e.to_string()))?;
        }
        iterations += 1;
        final_loss = epoch_loss;
        let score = if use_val {
            accuracy(&to_net(&tensors, &mut layers), &val_x, &val_y)
        } else {
            -epoch_loss
        };
        if score > best_score + spec.tol {
            best_score = score;
            best_tensors = tensors.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= spec.n_iter_no_change {
                converged = true;
                break;
            }
        }
    }
    let tensors = if use_val { best_tensors } else { tensors };
    let net = to_net(&tensors, &mut layers);
    let train_x: Vec<Vec<f64>> = train_idx.iter().map(|&i| x[i].clone()).collect();
    let train_y: Vec<bool> = train_idx.iter().map(|&i| y[i]).collect();
    let report = FitReport {
        iterations,
        converged,
        final_loss,
        train_accuracy: accuracy(&net, &train_x, &train_y),
        validation_accuracy: use_val.then(|| accuracy(&net, &val_x, &val_y)),
    };
    Ok((net, report))
}

/// Standardizes `features` and fits the classifier `spec` describes.
pub fn train_classifier(
    features: &[Vec<f64>],
    labels: &[bool],
    spec: &ClassifierSpec,
    seed: u64,
) -> Result<(Detector, FitReport), DetectError> {
    spec.validate()?;
    if features.len() != labels.len() {
        return Err(DetectError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    let scaler = Standardizer::fit(features)?;
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(DetectError::SingleClass);
    }
    let x = features
        .iter()
        .map(|r| scaler.transform(r))
        .collect::<Result<Vec<_>, _>>()?;
    let (network, report) = match spec.kind {
        ClassifierKind::Mlp => fit_mlp(&x, labels, spec, seed)?,
        _ => fit_linear(&x, labels, spec)?,
    };
    Ok((
        Detector {
            spec: spec.clone(),
            scaler,
            network,
        },
        report,
    ))
}
