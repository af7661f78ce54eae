use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::layers::Mode;
use super::model::{argmax_rows, Model};
use crate::datasets::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::{cross_entropy_row, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Epochs without a new best validation loss before the learning rate halves.
    pub halving_patience: usize,
    /// Epochs without a new best validation loss before training stops.
    pub early_stop_patience: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_epochs: 100,
            learning_rate: 1e-3,
            halving_patience: 5,
            early_stop_patience: 20,
            dropout: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch count must be positive");
        }
        if self.halving_patience == 0 || self.early_stop_patience == 0 {
            return bad("patiences must be positive");
        }
        if self.early_stop_patience < self.halving_patience {
            return bad("early-stop patience must be at least the halving patience");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout probability must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub halvings: usize,
    pub stopped_early: bool,
}

impl History {
    /// `epoch,train_loss,val_loss,val_acc,lr` with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr
            ));
        }
        out
    }
}

/// Replaces a minibatch before it is used, e.g. by its adversarial perturbation.
pub trait BatchTransform {
    /// `stream` identifies the batch so implementations can derive private randomness.
    fn transform(&self, model: &Model, x: &Array2<f64>, y: &[usize], stream: u64) -> Result<Array2<f64>>;

    /// Iterations spent per call, for telemetry.
    fn iterations(&self) -> usize {
        0
    }
}

fn check_eval_inputs(model: &Model, x: &Array2<f64>, y: &[usize]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("evaluation on an empty input set".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: x.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Fraction of rows whose argmax logit equals the label (dropout off).
pub fn evaluate(model: &Model, x: &Array2<f64>, y: &[usize]) -> Result<f64> {
    check_eval_inputs(model, x, y)?;
    let pred = model.predict(x)?;
    Ok(accuracy(&pred, y))
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    let hits = pred.iter().zip(y).filter(|(p, l)| p == l).count();
    hits as f64 / y.len() as f64
}

/// Mean cross-entropy and accuracy in evaluation mode.
pub fn loss_and_accuracy(model: &Model, x: &Array2<f64>, y: &[usize]) -> Result<(f64, f64)> {
    check_eval_inputs(model, x, y)?;
    let logits = model.logits(x)?;
    let mut loss = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(y) {
        loss += cross_entropy_row(&row.to_vec(), label);
    }
    let loss = loss / y.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    Ok((loss, accuracy(&argmax_rows(&logits), y)))
}

/// Clean training; see [`train_with`].
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    train_with(model, data, cfg, None)
}

const VAL_STREAM_BASE: u64 = 1 << 62;

/// Minibatch Adam with learning-rate halving and early stopping on the
/// validation loss. On return `model` holds the parameters of the epoch with
/// the lowest validation loss. With a `transform`, every training batch and the
/// validation set are replaced by their transformed versions.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    transform: Option<&dyn BatchTransform>,
) -> Result<History> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() || data.indices(Split::Val).is_empty() {
        return Err(Error::Data(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let (x_val, y_val) = data.split(Split::Val);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate);
    adam.checked = true;

    let mut best_model = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut halvings = 0;
    let mut stopped_early = false;
    let mut records = Vec::new();
    let mut order = train_idx.to_vec();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = adam.learning_rate;
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut xb, yb) = data.select(chunk);
            if let Some(t) = transform {
                xb = t.transform(model, &xb, &yb, (epoch as u64) << 32 | bi as u64)?;
            }
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(Tensor::from_matrix(xb));
            let mut mode = Mode::Train {
                dropout: cfg.dropout,
                rng: &mut rng,
            };
            let out = model.forward(&mut g, &bound, x, &mut mode)?;
            let ce = g.cross_entropy(out.logits, &yb)?;
            let loss = g.mean(ce)?;
            let value = g.tensor(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += value * chunk.len() as f64;
            let mut grads = g.backward(loss)?;
            let grad_arrays: Vec<_> = bound.vars().into_iter().map(|v| grads.take(v)).collect();
            let grad_slices: Vec<&[f64]> = grad_arrays
                .iter()
                .map(|a| a.as_slice().expect("standard layout"))
                .collect();
            adam_step(&mut model.param_slices_mut(), &grad_slices, &mut adam)?;
            model.project_constraints();
        }
        let train_loss = loss_sum / order.len() as f64;

        let x_eval = match transform {
            Some(t) => t.transform(model, &x_val, &y_val, VAL_STREAM_BASE + epoch as u64)?,
            None => x_val.clone(),
        };
        let (val_loss, val_acc) = loss_and_accuracy(model, &x_eval, &y_val)?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_model = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
            if since_best % cfg.halving_patience == 0 {
                adam.learning_rate /= 2.0;
                halvings += 1;
            }
        }
    }

    *model = best_model;
    Ok(History {
        records,
        best_epoch,
        best_val_loss: best_val,
        halvings,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_blobs;
    use crate::nn::model::ModelSpec;
    use rand::Rng;

    fn blob_model(seed: u64) -> Model {
        let mut spec = ModelSpec::mlp(4, 8, 8, 2);
        spec.normalization = None;
        Model::new(spec, seed).unwrap()
    }

    #[test]
    fn labels_from_argmax_give_full_accuracy() {
        let model = blob_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((50, 4), |_| rng.gen::<f64>());
        let y = model.predict(&x).unwrap();
        assert_eq!(evaluate(&model, &x, &y).unwrap(), 1.0);
    }

    #[test]
    fn constant_logits_give_chance_accuracy() {
        let spec = ModelSpec::mlp(3, 4, 4, 10);
        let params: Vec<Tensor> = Model::new(spec.clone(), 0)
            .unwrap()
            .param_tensors()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let model = Model::from_params(spec, params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let x = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>());
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let acc = evaluate(&model, &x, &y).unwrap();
        // Binomial standard deviation is 0.003.
        assert!((acc - 0.1).abs() < 0.015, "{acc}");
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        let model = blob_model(0);
        assert!(evaluate(&model, &Array2::zeros((0, 4)), &[]).is_err());
        assert!(evaluate(&model, &Array2::zeros((1, 4)), &[5]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                halving_patience: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                early_stop_patience: 4,
                ..TrainConfig::default()
            },
            TrainConfig {
                dropout: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn plateau_triggers_halving_and_early_stop() {
        let data = synthetic_blobs(100, 4, 2, 4.0, 0).unwrap();
        let mut model = blob_model(0);
        // Updates far below the parameters' resolution leave the validation loss flat.
        let cfg = TrainConfig {
            learning_rate: 1e-300,
            max_epochs: 50,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &data, &cfg).unwrap();
        assert!(h.stopped_early);
        assert_eq!(h.records.len(), 21);
        assert_eq!(h.best_epoch, 1);
        assert_eq!(h.halvings, 3);
        assert_eq!(h.records[6].lr, 1e-300 / 2.0);
        assert_eq!(h.records[20].lr, 1e-300 / 8.0);
    }

    #[test]
    fn steady_improvement_never_halves() {
        let data = synthetic_blobs(100, 4, 2, 4.0, 1).unwrap();
        let mut model = blob_model(1);
        let cfg = TrainConfig {
            batch_size: 1000,
            max_epochs: 10,
            dropout: 0.0,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &data, &cfg).unwrap();
        assert!(h.records.windows(2).all(|w| w[1].val_loss < w[0].val_loss));
        assert_eq!(h.halvings, 0);
        assert!(h.records.iter().all(|r| r.lr == 1e-3));
        assert_eq!(h.best_epoch, 10);
    }

    #[test]
    fn best_epoch_parameters_are_restored() {
        let data = synthetic_blobs(200, 4, 2, 1.0, 2).unwrap();
        let mut model = blob_model(2);
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 12,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &data, &cfg).unwrap();
        let (x_val, y_val) = data.split(Split::Val);
        let (loss, acc) = loss_and_accuracy(&model, &x_val, &y_val).unwrap();
        let best = &h.records[h.best_epoch - 1];
        assert_eq!(loss, best.val_loss);
        assert_eq!(acc, best.val_acc);
        assert_eq!(loss, h.best_val_loss);
        assert!(h.records.iter().all(|r| r.val_loss >= loss));
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_acc: 1.0,
                lr: 0.001,
            }],
            best_epoch: 1,
            best_val_loss: 0.25,
            halvings: 0,
            stopped_early: false,
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,val_loss,val_acc,lr\n1,0.5,0.25,1,0.001\n");
    }

    #[test]
    fn training_needs_both_splits() {
        let mut data = synthetic_blobs(100, 4, 2, 4.0, 0).unwrap();
        data.truncate_split(Split::Val, 0);
        let mut model = blob_model(0);
        assert!(train(&mut model, &data, &TrainConfig::default()).is_err());
    }
}
