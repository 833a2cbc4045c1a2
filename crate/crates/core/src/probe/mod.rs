//! Linear probes: one logistic-regression classifier per layer and task,
//! trained with mini-batch Adam on frozen features.

mod adam;
mod checkpoint;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot, Scalar};
use crate::seed;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{ProbeCheckpoint, ProbeHeader};

/// Per-feature affine transform `(x - mean) / scale` fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    /// Zero-variance features get scale 1.
    pub fn fit(x: &Matrix<T>) -> Self {
        let n = T::from_usize(x.rows().max(1)).unwrap();
        let d = x.cols();
        let mut mean = vec![T::zero(); d];
        for row in x.iter_rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); d];
        for row in x.iter_rows() {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > T::zero() && sd.is_finite() {
                    sd
                } else {
                    T::one()
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .map(|((&v, &m), &s)| (v - m) / s),
        );
    }

    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut data = Vec::with_capacity(x.data().len());
        let mut buf = Vec::with_capacity(x.cols());
        for row in x.iter_rows() {
            self.apply_row(row, &mut buf);
            data.extend_from_slice(&buf);
        }
        Matrix::new(x.rows(), x.cols(), data).expect("same shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe<T> {
    pub weights: Vec<T>,
    pub bias: T,
    pub layer: u16,
    pub task_tag: String,
    /// Applied to raw features before the affine map when present.
    pub standardizer: Option<Standardizer<T>>,
}

impl<T: Scalar> LinearProbe<T> {
    pub fn zeros(dim: usize, layer: u16, task_tag: &str) -> Self {
        Self {
            weights: vec![T::zero(); dim],
            bias: T::zero(),
            layer,
            task_tag: task_tag.into(),
            standardizer: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                actual: len,
            });
        }
        Ok(())
    }

    /// `w·x + b`, after standardization when the probe carries one.
    pub fn logit(&self, x: &[T]) -> Result<T> {
        self.check_dim(x.len())?;
        Ok(match &self.standardizer {
            None => dot(&self.weights, x) + self.bias,
            Some(s) => {
                let mut buf = Vec::with_capacity(x.len());
                s.apply_row(x, &mut buf);
                dot(&self.weights, &buf) + self.bias
            }
        })
    }

    /// Class 1 iff sigmoid(logit) ≥ 0.5, i.e. logit ≥ 0.
    pub fn predict(&self, x: &[T]) -> Result<u8> {
        Ok(predict_from_logit(self.logit(x)?))
    }
}

pub fn predict_from_logit<T: Scalar>(z: T) -> u8 {
    (z >= T::zero()) as u8
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad_w: Vec<T>,
    pub grad_b: T,
}

fn check_labels(y: &[u8]) -> Result<()> {
    match y.iter().find(|&&l| l > 1) {
        Some(l) => Err(Error::Precondition(format!("label {l} is not binary"))),
        None => Ok(()),
    }
}

/// Mean binary cross-entropy over `rows` with an optional L2 term
/// `0.5·l2·‖w‖²`, and its exact gradient.
fn batch_loss_grad<T: Scalar>(
    weights: &[T],
    bias: T,
    x: &Matrix<T>,
    y: &[u8],
    rows: impl ExactSizeIterator<Item = usize>,
    l2: T,
) -> LossGrad<T> {
    let n = T::from_usize(rows.len()).unwrap();
    let mut loss = T::zero();
    let mut grad_w = vec![T::zero(); weights.len()];
    let mut grad_b = T::zero();
    for i in rows {
        let row = x.row(i);
        let z = dot(weights, row) + bias;
        let target = if y[i] == 1 { T::one() } else { T::zero() };
        loss = loss + softplus(z) - target * z;
        let r = sigmoid(z) - target;
        for (g, &v) in grad_w.iter_mut().zip(row) {
            *g = *g + r * v;
        }
        grad_b = grad_b + r;
    }
    loss = loss / n;
    grad_b = grad_b / n;
    grad_w.iter_mut().for_each(|g| *g = *g / n);
    if l2 > T::zero() {
        let half = T::lit(0.5);
        loss = loss + half * l2 * dot(weights, weights);
        for (g, &w) in grad_w.iter_mut().zip(weights) {
            *g = *g + l2 * w;
        }
    }
    LossGrad { loss, grad_w, grad_b }
}

/// Loss and gradient of `probe` on a batch. Features pass through the
/// probe's standardizer when it has one.
pub fn loss_and_grad<T: Scalar>(
    probe: &LinearProbe<T>,
    x: &Matrix<T>,
    y: &[u8],
    l2: T,
) -> Result<LossGrad<T>> {
    if x.rows() == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    if y.len() != x.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            actual: y.len(),
        });
    }
    probe.check_dim(x.cols())?;
    check_labels(y)?;
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("batch features".into()));
    }
    let owned;
    let x = match &probe.standardizer {
        Some(s) => {
            owned = s.apply(x);
            &owned
        }
        None => x,
    };
    Ok(batch_loss_grad(&probe.weights, probe.bias, x, y, 0..x.rows(), l2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct TrainConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-accuracy improvement before stopping.
    pub patience: usize,
    pub l2: T,
    /// Fit a per-feature standardizer on the training rows first.
    pub standardize: bool,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::lit(1e-3),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
            batch_size: 256,
            max_epochs: 50,
            patience: 5,
            l2: T::zero(),
            standardize: false,
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        let unit = |v: T| v >= T::zero() && v < T::one();
        if !pos(self.lr) || !pos(self.epsilon) || !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Invalid(format!(
                "invalid optimizer settings lr={} beta1={} beta2={} eps={}",
                self.lr, self.beta1, self.beta2, self.epsilon
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Invalid("batch_size, max_epochs and patience must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Invalid("patience exceeds max_epochs".into()));
        }
        if self.l2.is_nan() || self.l2 < T::zero() {
            return Err(Error::Invalid("l2 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> TrainConfig<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        TrainConfig {
            lr: c(self.lr),
            beta1: c(self.beta1),
            beta2: c(self.beta2),
            epsilon: c(self.epsilon),
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            l2: c(self.l2),
            standardize: self.standardize,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

fn accuracy_of<T: Scalar>(weights: &[T], bias: T, x: &Matrix<T>, y: &[u8]) -> f64 {
    let correct = x
        .iter_rows()
        .zip(y)
        .filter(|(row, &label)| predict_from_logit(dot(weights, row) + bias) == label)
        .count();
    correct as f64 / y.len().max(1) as f64
}

/// Trains a probe with seeded mini-batch Adam from zero initialization and
/// keeps the parameters of the best validation-accuracy epoch. Ties go to the
/// later epoch and do not count toward patience, so a saturated validation
/// score keeps training. With an empty validation set the training accuracy
/// is used.
pub fn train_probe<T: Scalar>(
    x_train: &Matrix<T>,
    y_train: &[u8],
    x_val: &Matrix<T>,
    y_val: &[u8],
    cfg: &TrainConfig<T>,
) -> Result<(LinearProbe<T>, TrainHistory)> {
    cfg.validate()?;
    if x_train.rows() != y_train.len() || x_val.rows() != y_val.len() {
        return Err(Error::DimensionMismatch {
            expected: x_train.rows(),
            actual: y_train.len(),
        });
    }
    if x_val.rows() > 0 && x_val.cols() != x_train.cols() {
        return Err(Error::DimensionMismatch {
            expected: x_train.cols(),
            actual: x_val.cols(),
        });
    }
    check_labels(y_train)?;
    check_labels(y_val)?;
    if x_train.rows() == 0 {
        return Err(Error::Precondition("empty training set".into()));
    }
    let positives = y_train.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == y_train.len() {
        return Err(Error::DegenerateLabels(y_train[0]));
    }
    if x_train.data().iter().chain(x_val.data()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }

    let standardizer = cfg.standardize.then(|| Standardizer::fit(x_train));
    let (xt, xv) = match &standardizer {
        Some(s) => (s.apply(x_train), s.apply(x_val)),
        None => (x_train.clone(), x_val.clone()),
    };
    let (x_sel, y_sel) = if xv.rows() > 0 { (&xv, y_val) } else { (&xt, y_train) };

    let d = xt.cols();
    let mut params = vec![T::zero(); d + 1];
    let mut state = AdamState::new(d + 1, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut grads = vec![T::zero(); d + 1];
    let mut order: Vec<usize> = (0..xt.rows()).collect();

    let mut history = TrainHistory {
        best_val_accuracy: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = params.clone();
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::seed_mix(cfg.seed, seed::domain::TRAIN, epoch as u64)));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lg = batch_loss_grad(&params[..d], params[d], &xt, y_train, batch.iter().copied(), cfg.l2);
            grads[..d].copy_from_slice(&lg.grad_w);
            grads[d] = lg.grad_b;
            state.step_in_place(&mut params, &grads)?;
            epoch_loss += lg.loss.to_f64_lossy() * batch.len() as f64;
        }
        let train_loss = epoch_loss / xt.rows() as f64;
        if !train_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                detail: format!("train loss {train_loss}"),
            });
        }
        let val_accuracy = accuracy_of(&params[..d], params[d], x_sel, y_sel);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
        if val_accuracy >= history.best_val_accuracy {
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = epoch;
            best.copy_from_slice(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        }
    }

    let probe = LinearProbe {
        weights: best[..d].to_vec(),
        bias: best[d],
        layer: 0,
        task_tag: String::new(),
        standardizer,
    };
    Ok((probe, history))
}

/// Per-example logits and predicted labels, alongside the reference labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet<T> {
    pub logits: Vec<T>,
    pub predictions: Vec<u8>,
    pub labels: Vec<u8>,
}

pub fn evaluate_probe<T: Scalar>(
    probe: &LinearProbe<T>,
    x: &Matrix<T>,
    y: &[u8],
) -> Result<PredictionSet<T>> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            actual: y.len(),
        });
    }
    let logits = x.iter_rows().map(|r| probe.logit(r)).collect::<Result<Vec<_>>>()?;
    let predictions = logits.iter().map(|&z| predict_from_logit(z)).collect();
    Ok(PredictionSet {
        logits,
        predictions,
        labels: y.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_examples() {
        let p = LinearProbe::<f64>::zeros(2, 1, "t");
        assert_eq!(p.logit(&[3.0, -7.0]).unwrap(), 0.0);
        assert_eq!(p.predict(&[3.0, -7.0]).unwrap(), 1);

        let p = LinearProbe {
            weights: vec![1.0, 0.0],
            bias: -1.0,
            ..LinearProbe::zeros(2, 1, "t")
        };
        assert_eq!(p.logit(&[3.0, 5.0]).unwrap(), 2.0);
        assert_eq!(p.predict(&[3.0, 5.0]).unwrap(), 1);

        let p = LinearProbe {
            weights: vec![2.0, -1.0],
            bias: 0.5,
            ..LinearProbe::zeros(2, 1, "t")
        };
        assert_eq!(p.logit(&[1.0, 4.0]).unwrap(), -1.5);
        assert_eq!(p.predict(&[1.0, 4.0]).unwrap(), 0);
        assert!(p.logit(&[1.0]).is_err());
    }

    #[test]
    fn balanced_batch_at_zero_has_ln2_loss() {
        let p = LinearProbe::<f64>::zeros(2, 1, "t");
        let x = Matrix::new(4, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0, 0.0, 1.0]).unwrap();
        let lg = loss_and_grad(&p, &x, &[1, 0, 1, 0], 0.0).unwrap();
        assert!((lg.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn single_example_gradient() {
        let p = LinearProbe::<f64>::zeros(1, 1, "t");
        let x = Matrix::new(1, 1, vec![1.0]).unwrap();
        let lg = loss_and_grad(&p, &x, &[1], 0.0).unwrap();
        assert_eq!(lg.grad_w, vec![-0.5]);
        assert_eq!(lg.grad_b, -0.5);
    }

    #[test]
    fn loss_is_stable_for_large_logits() {
        let p = LinearProbe {
            weights: vec![1000.0],
            ..LinearProbe::<f64>::zeros(1, 1, "t")
        };
        let x = Matrix::new(2, 1, vec![5.0, -5.0]).unwrap();
        let lg = loss_and_grad(&p, &x, &[0, 1], 0.0).unwrap();
        assert!((lg.loss - 5000.0).abs() < 1e-9);
        assert!(lg.grad_w[0].is_finite());
    }

    #[test]
    fn loss_and_grad_errors() {
        let p = LinearProbe::<f64>::zeros(1, 1, "t");
        let empty = Matrix::new(0, 1, vec![]).unwrap();
        assert!(loss_and_grad(&p, &empty, &[], 0.0).is_err());
        let nan = Matrix::new(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(loss_and_grad(&p, &nan, &[1], 0.0), Err(Error::NonFinite(_))));
        let x = Matrix::new(1, 1, vec![1.0]).unwrap();
        assert!(loss_and_grad(&p, &x, &[2], 0.0).is_err());
    }

    #[test]
    fn l2_gradient_matches_finite_difference() {
        let p = LinearProbe {
            weights: vec![0.3, -0.7],
            bias: 0.1,
            ..LinearProbe::<f64>::zeros(2, 1, "t")
        };
        let x = Matrix::new(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.2, -0.4]).unwrap();
        let y = [1, 0, 1];
        let lg = loss_and_grad(&p, &x, &y, 0.5).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut plus = p.clone();
            plus.weights[j] += h;
            let mut minus = p.clone();
            minus.weights[j] -= h;
            let fd = (loss_and_grad(&plus, &x, &y, 0.5).unwrap().loss
                - loss_and_grad(&minus, &x, &y, 0.5).unwrap().loss)
                / (2.0 * h);
            assert!((fd - lg.grad_w[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn single_class_training_rejected() {
        let x = Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let cfg = TrainConfig::<f64>::default();
        assert!(matches!(
            train_probe(&x, &[1, 1, 1], &x, &[1, 0, 1], &cfg),
            Err(Error::DegenerateLabels(1))
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig::<f64> {
            patience: 100,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig::<f64> {
            lr: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn perfect_fixture_predictions_equal_labels() {
        let x = Matrix::new(6, 1, vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]).unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let cfg = TrainConfig::<f64> {
            lr: 0.05,
            ..Default::default()
        };
        let (probe, hist) = train_probe(&x, &y, &x, &y, &cfg).unwrap();
        assert_eq!(hist.best_val_accuracy, 1.0);
        let preds = evaluate_probe(&probe, &x, &y).unwrap();
        assert_eq!(preds.predictions, y.to_vec());
    }

    #[test]
    fn saturated_validation_keeps_training() {
        let x = Matrix::new(6, 1, vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]).unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let cfg = TrainConfig::<f64> {
            max_epochs: 20,
            ..Default::default()
        };
        let (probe, hist) = train_probe(&x, &y, &x, &y, &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 20);
        assert!(!hist.stopped_early);
        assert_eq!(hist.best_epoch, 19);
        let w = probe.weights[0];
        assert!(w > 0.015, "weight {w}");
    }

    #[test]
    fn constant_zero_probe_predicts_one() {
        let p = LinearProbe::<f32>::zeros(3, 1, "t");
        let x = Matrix::new(2, 3, vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0]).unwrap();
        let preds = evaluate_probe(&p, &x, &[0, 1]).unwrap();
        assert_eq!(preds.predictions, vec![1, 1]);
    }

    #[test]
    fn logits_ordered_along_weight_direction() {
        let p = LinearProbe {
            weights: vec![0.5, -1.5, 2.0],
            bias: 0.3,
            ..LinearProbe::<f64>::zeros(3, 1, "t")
        };
        let x1: Vec<f64> = p.weights.clone();
        let x2: Vec<f64> = x1.iter().map(|v| v * 2.0).collect();
        assert!(p.logit(&x2).unwrap() > p.logit(&x1).unwrap());
    }

    #[test]
    fn xor_points_cap_at_three_quarters() {
        let x = Matrix::new(4, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let y = [0, 1, 1, 0];
        // Exhaustive oracle over a grid of separators: none beats 3/4.
        let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.25).collect();
        let mut best = 0.0f64;
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    best = best.max(accuracy_of(&[a, b], c, &x, &y));
                }
            }
        }
        assert_eq!(best, 0.75);
        let cfg = TrainConfig::<f64> {
            lr: 0.05,
            batch_size: 4,
            max_epochs: 200,
            patience: 50,
            ..Default::default()
        };
        let (probe, _) = train_probe(&x, &y, &x, &y, &cfg).unwrap();
        let acc = evaluate_probe(&probe, &x, &y)
            .unwrap()
            .predictions
            .iter()
            .zip(y)
            .filter(|(p, l)| **p == *l)
            .count() as f64
            / 4.0;
        assert!(acc <= 0.75);
    }

    #[test]
    fn standardizer_handles_constant_features() {
        let x = Matrix::new(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let s = Standardizer::<f64>::fit(&x);
        assert_eq!(s.scale[1], 1.0);
        let z = s.apply(&x);
        assert_eq!(z.row(0)[1], 0.0);
        assert!((z.row(2)[0] - 1.224744871391589).abs() < 1e-12);
    }
}
