//! Frozen prompt-feature regressors fitted to offline partition labels.
//!
//! `fit` always returns a frozen amortizer. There is no public mutation path
//! afterwards: the parameters are private and `predict` takes `&self`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{uniform, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmortizerKind {
    LinearRidge,
    OneHiddenLayer,
}

impl std::fmt::Display for AmortizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AmortizerKind::LinearRidge => "linear-ridge",
            AmortizerKind::OneHiddenLayer => "one-hidden-layer",
        })
    }
}

impl std::str::FromStr for AmortizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-ridge" => Ok(AmortizerKind::LinearRidge),
            "one-hidden-layer" => Ok(AmortizerKind::OneHiddenLayer),
            _ => Err(Error::Parse(format!("unknown amortizer kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub kind: AmortizerKind,
    pub ridge_lambda: f64,
    pub split_seed: u64,
    pub val_fraction: f64,
    /// One-hidden-layer only.
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            kind: AmortizerKind::LinearRidge,
            ridge_lambda: 1e-6,
            split_seed: 0,
            val_fraction: 0.1,
            hidden: 64,
            epochs: 3000,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelPoint {
    pub prompt_id: String,
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq)]
enum Params {
    Linear {
        weights: Vec<f64>,
        intercept: f64,
    },
    Mlp {
        hidden: usize,
        /// `hidden x feature_dim`, row-major
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

impl Params {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Params::Linear { weights, intercept } => {
                intercept + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            }
            Params::Mlp {
                hidden,
                w1,
                b1,
                w2,
                b2,
            } => {
                let d = x.len();
                let mut out = *b2;
                for h in 0..*hidden {
                    let pre = b1[h] + (0..d).map(|j| w1[h * d + j] * x[j]).sum::<f64>();
                    out += w2[h] * pre.tanh();
                }
                out
            }
        }
    }

    fn flat(&self) -> Vec<f64> {
        match self {
            Params::Linear { weights, intercept } => {
                let mut v = weights.clone();
                v.push(*intercept);
                v
            }
            Params::Mlp { w1, b1, w2, b2, .. } => {
                let mut v = w1.clone();
                v.extend(b1);
                v.extend(w2);
                v.push(*b2);
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Amortizer {
    kind: AmortizerKind,
    feature_dim: usize,
    ridge_lambda: f64,
    split_seed: u64,
    params: Params,
    frozen: bool,
    train_mse: f64,
    val_mse: f64,
    label_manifest: String,
}

/// Result of a fit: the frozen amortizer plus diagnostics that do not belong
/// in the checkpoint.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub amortizer: Amortizer,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// Validation MSE per epoch (one-hidden-layer only).
    pub val_curve: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// SHA-256 over a canonical rendering of the label set.
pub fn label_manifest(labels: &[LabelPoint]) -> String {
    let mut h = Sha256::new();
    for l in labels {
        let feats: Vec<String> = l.features.iter().map(|f| f.to_string()).collect();
        h.update(format!("{},{},{}\n", l.prompt_id, feats.join(" "), l.target).as_bytes());
    }
    hex::encode(h.finalize())
}

fn split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = StreamKey::root(seed).child("amortizer-split").stream();
    for i in (1..n).rev() {
        let j = (uniform(&mut rng) * (i + 1) as f64) as usize;
        idx.swap(i, j.min(i));
    }
    let n_val = if n >= 3 && val_fraction > 0.0 {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n - 2)
    } else {
        0
    };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn mse(params: &Params, labels: &[LabelPoint], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::NAN;
    }
    idx.iter()
        .map(|&i| (params.predict(&labels[i].features) - labels[i].target).powi(2))
        .sum::<f64>()
        / idx.len() as f64
}

/// Ridge with an unpenalized intercept: minimizes
/// `sum (y - Xw - b)^2 + lambda |w|^2` through the centered normal equations.
fn fit_ridge(labels: &[LabelPoint], train: &[usize], d: usize, lambda: f64) -> Result<Params> {
    let n = train.len();
    let x = DMatrix::from_fn(n, d, |r, c| labels[train[r]].features[c]);
    let y = DVector::from_fn(n, |r, _| labels[train[r]].target);
    let x_mean: Vec<f64> = (0..d).map(|c| x.column(c).mean()).collect();
    let y_mean = y.mean();
    let xc = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - x_mean[c]);
    let yc = y.add_scalar(-y_mean);
    let mut gram = xc.transpose() * &xc;
    if d > 0 {
        let eig = gram.clone().symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(0.0f64, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if lambda <= 0.0 && (min <= 1e-12 * max.max(1e-300) || n <= d) {
            return Err(Error::RankDeficient);
        }
    }
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let w = if d == 0 {
        DVector::zeros(0)
    } else {
        gram.cholesky().ok_or(Error::RankDeficient)?.solve(&rhs)
    };
    let intercept = y_mean - (0..d).map(|c| w[c] * x_mean[c]).sum::<f64>();
    Ok(Params::Linear {
        weights: w.iter().cloned().collect(),
        intercept,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

fn unflatten_mlp(flat: &[f64], d: usize, hidden: usize) -> Params {
    let (w1, rest) = flat.split_at(hidden * d);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, rest) = rest.split_at(hidden);
    Params::Mlp {
        hidden,
        w1: w1.to_vec(),
        b1: b1.to_vec(),
        w2: w2.to_vec(),
        b2: rest[0],
    }
}

/// Full-batch Adam on the squared error of a tanh network; keeps the
/// parameters from the epoch with the lowest validation MSE.
fn fit_mlp(
    labels: &[LabelPoint],
    train: &[usize],
    val: &[usize],
    d: usize,
    opts: &FitOptions,
) -> (Params, Vec<f64>, Option<usize>) {
    let h = opts.hidden.max(1);
    let mut rng = StreamKey::root(opts.split_seed).child("amortizer-init").stream();
    let n_params = h * d + h + h + 1;
    let mut flat = vec![0.0; n_params];
    let s1 = 1.0 / (d.max(1) as f64).sqrt();
    let s2 = 1.0 / (h as f64).sqrt();
    for (i, p) in flat.iter_mut().enumerate() {
        let scale = if i < h * d {
            s1
        } else if i < h * d + h {
            0.0
        } else if i < h * d + 2 * h {
            s2
        } else {
            0.0
        };
        *p = scale * (2.0 * uniform(&mut rng) - 1.0);
    }
    // start the output bias at the label mean
    let y_mean = train.iter().map(|&i| labels[i].target).sum::<f64>() / train.len() as f64;
    flat[n_params - 1] = y_mean;

    let mut adam = Adam::new(n_params);
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut best = (f64::INFINITY, flat.clone(), None);
    let mut grad = vec![0.0; n_params];
    let mut act = vec![0.0; h];
    for epoch in 0..opts.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in train {
            let x = &labels[i].features;
            let mut out = flat[n_params - 1];
            for k in 0..h {
                let pre = flat[h * d + k] + (0..d).map(|j| flat[k * d + j] * x[j]).sum::<f64>();
                act[k] = pre.tanh();
                out += flat[h * d + h + k] * act[k];
            }
            let err = 2.0 * (out - labels[i].target) / train.len() as f64;
            grad[n_params - 1] += err;
            for k in 0..h {
                let w2 = flat[h * d + h + k];
                grad[h * d + h + k] += err * act[k];
                let back = err * w2 * (1.0 - act[k] * act[k]);
                grad[h * d + k] += back;
                for j in 0..d {
                    grad[k * d + j] += back * x[j];
                }
            }
        }
        adam.step(&mut flat, &grad, opts.learning_rate);
        let params = unflatten_mlp(&flat, d, h);
        let score = if val.is_empty() {
            mse(&params, labels, train)
        } else {
            mse(&params, labels, val)
        };
        curve.push(score);
        if score < best.0 {
            best = (score, flat.clone(), Some(epoch));
        }
    }
    let chosen = if best.2.is_some() { best.1 } else { flat };
    (unflatten_mlp(&chosen, d, h), curve, best.2)
}

pub fn fit(labels: &[LabelPoint], opts: &FitOptions) -> Result<FitReport> {
    let d = labels.first().map(|l| l.features.len()).unwrap_or(0);
    if let Some(bad) = labels.iter().find(|l| l.features.len() != d) {
        return Err(Error::Config(format!(
            "label {} has {} features, expected {d}",
            bad.prompt_id,
            bad.features.len()
        )));
    }
    if labels.iter().any(|l| !l.target.is_finite()) {
        return Err(Error::Config("non-finite regression target".into()));
    }
    if !(opts.ridge_lambda >= 0.0) {
        return Err(Error::Config("ridge_lambda must be >= 0".into()));
    }
    let (train, val) = split(labels.len(), opts.val_fraction, opts.split_seed);
    if train.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 training labels after the split, have {}",
            train.len()
        )));
    }
    let (params, val_curve, best_epoch) = match opts.kind {
        AmortizerKind::LinearRidge => (fit_ridge(labels, &train, d, opts.ridge_lambda)?, Vec::new(), None),
        AmortizerKind::OneHiddenLayer => fit_mlp(labels, &train, &val, d, opts),
    };
    let amortizer = Amortizer {
        kind: opts.kind,
        feature_dim: d,
        ridge_lambda: opts.ridge_lambda,
        split_seed: opts.split_seed,
        train_mse: mse(&params, labels, &train),
        val_mse: mse(&params, labels, &val),
        params,
        frozen: true,
        label_manifest: label_manifest(labels),
    };
    let ids = |v: &[usize]| v.iter().map(|&i| labels[i].prompt_id.clone()).collect();
    Ok(FitReport {
        amortizer,
        train_ids: ids(&train),
        val_ids: ids(&val),
        val_curve,
        best_epoch,
    })
}

impl Amortizer {
    /// An unfrozen linear amortizer with given coefficients. Call
    /// [`freeze`](Self::freeze) before use.
    pub fn linear(weights: Vec<f64>, intercept: f64) -> Self {
        Self {
            kind: AmortizerKind::LinearRidge,
            feature_dim: weights.len(),
            ridge_lambda: 0.0,
            split_seed: 0,
            params: Params::Linear { weights, intercept },
            frozen: false,
            train_mse: f64::NAN,
            val_mse: f64::NAN,
            label_manifest: String::new(),
        }
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn kind(&self) -> AmortizerKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn train_mse(&self) -> f64 {
        self.train_mse
    }

    pub fn val_mse(&self) -> f64 {
        self.val_mse
    }

    pub fn label_manifest(&self) -> &str {
        &self.label_manifest
    }

    /// Slope weights and intercept of a linear amortizer.
    pub fn linear_coefficients(&self) -> Option<(&[f64], f64)> {
        match &self.params {
            Params::Linear { weights, intercept } => Some((weights, *intercept)),
            Params::Mlp { .. } => None,
        }
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if !self.frozen {
            return Err(Error::Contract("amortizer must be frozen before predict".into()));
        }
        if features.len() != self.feature_dim {
            return Err(Error::Config(format!(
                "amortizer expects {} features, got {}",
                self.feature_dim,
                features.len()
            )));
        }
        Ok(self.params.predict(features))
    }

    pub fn to_checkpoint(&self) -> String {
        let hidden = match &self.params {
            Params::Linear { .. } => 0,
            Params::Mlp { hidden, .. } => *hidden,
        };
        let weights: Vec<String> = self.params.flat().iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "{AMORTIZER_MAGIC}");
        let _ = writeln!(s, "kind={}", self.kind);
        let _ = writeln!(s, "feature_dim={}", self.feature_dim);
        let _ = writeln!(s, "hidden={hidden}");
        let _ = writeln!(s, "lambda={}", self.ridge_lambda);
        let _ = writeln!(s, "split_seed={}", self.split_seed);
        let _ = writeln!(s, "frozen={}", self.frozen);
        let _ = writeln!(s, "weights={}", weights.join(" "));
        let _ = writeln!(s, "train_mse={}", self.train_mse);
        let _ = writeln!(s, "val_mse={}", self.val_mse);
        let _ = writeln!(s, "label_manifest={}", self.label_manifest);
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(AMORTIZER_MAGIC) {
            return Err(Error::Parse("missing amortizer checkpoint header".into()));
        }
        let mut fields = std::collections::BTreeMap::new();
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad checkpoint line {line:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Parse(format!("checkpoint missing {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number for {k}")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse::<u64>()
                .map_err(|_| Error::Parse(format!("bad integer for {k}")))
        };
        let kind: AmortizerKind = get("kind")?.parse()?;
        let d = int("feature_dim")? as usize;
        let hidden = int("hidden")? as usize;
        let flat: Vec<f64> = get("weights")?
            .split_whitespace()
            .map(|w| w.parse().map_err(|_| Error::Parse(format!("bad weight {w:?}"))))
            .collect::<Result<_>>()?;
        let params = match kind {
            AmortizerKind::LinearRidge => {
                if flat.len() != d + 1 {
                    return Err(Error::Parse("linear weight count mismatch".into()));
                }
                Params::Linear {
                    weights: flat[..d].to_vec(),
                    intercept: flat[d],
                }
            }
            AmortizerKind::OneHiddenLayer => {
                if flat.len() != hidden * d + 2 * hidden + 1 {
                    return Err(Error::Parse("network weight count mismatch".into()));
                }
                unflatten_mlp(&flat, d, hidden)
            }
        };
        Ok(Self {
            kind,
            feature_dim: d,
            ridge_lambda: num("lambda")?,
            split_seed: int("split_seed")?,
            params,
            frozen: match get("frozen")? {
                "true" => true,
                "false" => false,
                other => return Err(Error::Parse(format!("bad frozen flag {other:?}"))),
            },
            train_mse: num("train_mse")?,
            val_mse: num("val_mse")?,
            label_manifest: get("label_manifest")?.to_string(),
        })
    }
}

pub const AMORTIZER_MAGIC: &str = "# anchorlab amortizer v1";

/// Root-mean-square gap between amortizer predictions and exact log-partitions.
pub fn sigma_g(g: &Amortizer, points: &[(Vec<f64>, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyInput("sigma_g prompt set"));
    }
    let mut acc = 0.0;
    for (x, log_z) in points {
        acc += (g.predict(x)? - log_z).powi(2);
    }
    Ok((acc / points.len() as f64).sqrt())
}
