//! Mini-batch training with Adam, step learning-rate decay, spectral
//! normalization after every step and early stopping on validation loss.

use crate::data::{split, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::network::{
    batch_loss_gradient, predict_params, spectral_estimates, spectral_normalize, NetworkConfig, NetworkParams,
};
use crate::objective::loss_for_label;
use crate::uncertainty::predict;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_step_size: usize,
    pub lr_gamma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Print one progress line per epoch to stdout.
    #[serde(default = "default_true")]
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            batch_size: 64,
            learning_rate: 5e-4,
            lr_step_size: 20,
            lr_gamma: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_patience: 10,
            seed: 0,
            val_fraction: 0.05,
            progress: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        let checks = [
            (self.max_epochs > 0, "max_epochs must be positive"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive"),
            (self.lr_step_size > 0, "lr_step_size must be positive"),
            (unit(self.lr_gamma), "lr_gamma must be in (0, 1)"),
            (unit(self.adam_beta1), "adam_beta1 must be in (0, 1)"),
            (unit(self.adam_beta2), "adam_beta2 must be in (0, 1)"),
            (self.adam_eps > 0.0, "adam_eps must be positive"),
            (self.early_stop_patience > 0, "early_stop_patience must be positive"),
            (unit(self.val_fraction), "val_fraction must be in (0, 1)"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    /// `learning_rate * lr_gamma^floor(epoch / lr_step_size)`, epochs from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_gamma.powi((epoch / self.lr_step_size) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// Bias-corrected Adam step, in place.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hyper: AdamHyper) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract("Adam shapes do not match".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// Largest `|sigma - 1|` over normalized layers at the end of each epoch.
    pub sigma_deviation: Vec<f64>,
    /// Zero-based.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation loss.
    pub params: NetworkParams,
    pub history: TrainHistory,
    pub optimizer: AdamState,
}

/// Mean loss and accuracy of `params` on labeled rows.
pub fn evaluate(params: &NetworkParams, config: &NetworkConfig, inputs: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64)> {
    let outputs = predict_params(params, config, inputs)?;
    let loss = outputs
        .iter()
        .zip(labels)
        .map(|(fd, l)| loss_for_label(fd, *l).total)
        .sum::<f64>()
        / labels.len() as f64;
    let preds: Vec<usize> = outputs.iter().map(predict).collect();
    Ok((loss, accuracy(&preds, labels)?))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::InvalidParams(m) => Error::Divergence { epoch, message: m },
        other => other,
    }
}

/// Trains from a fresh initialization drawn from `rng`. The validation split
/// uses `train_config.seed`; shuffling and initialization use `rng`.
/// Unlabeled rows are ignored.
pub fn train<R: Rng + ?Sized>(
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    dataset: &LabeledDataset,
    rng: &mut R,
) -> Result<TrainOutcome> {
    net_config.validate()?;
    train_config.validate()?;
    let labeled: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i].is_some()).collect();
    if labeled.len() < dataset.len() {
        log::info!("ignoring {} unlabeled rows", dataset.len() - labeled.len());
    }
    let dataset = dataset.subset(&labeled);
    if dataset.dim() != net_config.input_dim && !dataset.is_empty() {
        return Err(Error::Config(format!(
            "dataset has dimension {}, network expects {}",
            dataset.dim(),
            net_config.input_dim
        )));
    }
    let mut classes: Vec<usize> = dataset.labels.iter().flatten().copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 || dataset.len() < 2 * train_config.batch_size {
        return Err(Error::Config(format!(
            "training needs at least 2 classes and {} rows; got {} classes and {} rows",
            2 * train_config.batch_size,
            classes.len(),
            dataset.len()
        )));
    }
    if classes.iter().any(|c| *c >= net_config.num_classes) {
        return Err(Error::Config("dataset labels exceed the network's class count".into()));
    }

    let parts = split(&dataset, 1.0 - train_config.val_fraction, train_config.seed)?;
    let (train_y, val_y) = (parts.first.class_labels()?, parts.second.class_labels()?);
    let (train_x, val_x) = (parts.first.features, parts.second.features);

    let mut params = NetworkParams::init(net_config, rng)?;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    let hyper = AdamHyper::from(train_config);

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_accuracy: Vec::new(),
        learning_rate: Vec::new(),
        sigma_deviation: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, NetworkParams, AdamState)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut batch_x = Vec::with_capacity(train_config.batch_size);
    let mut batch_y = Vec::with_capacity(train_config.batch_size);

    for epoch in 0..train_config.max_epochs {
        let lr = train_config.lr_at(epoch);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(train_config.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.push(train_x[i].clone());
                batch_y.push(train_y[i]);
            }
            let (loss, grads) =
                batch_loss_gradient(&params, net_config, &batch_x, &batch_y).map_err(|e| diverged(epoch, e))?;
            let grads = grads.flatten();
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("training loss {loss} or its gradient is not finite"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            adam_update(&mut flat, &grads, &mut adam, lr, hyper)?;
            params.assign_flat(&flat)?;
            spectral_normalize(&mut params, net_config);
            flat = params.flatten();
        }
        let train_loss = loss_sum / train_x.len() as f64;
        let (val_loss, val_acc) = evaluate(&params, net_config, &val_x, &val_y).map_err(|e| diverged(epoch, e))?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                message: format!("validation loss became {val_loss}"),
            });
        }
        let sigma_dev = spectral_estimates(&params)
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max);
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.val_accuracy.push(val_acc);
        history.learning_rate.push(lr);
        history.sigma_deviation.push(sigma_dev);
        if train_config.progress {
            println!("epoch={epoch} train_loss={train_loss:.6} val_loss={val_loss:.6} val_acc={val_acc:.4} lr={lr:e}");
        }

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, params.clone(), adam.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_config.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    let (_, params, optimizer) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        history,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState {
            step: 3,
            m: vec![0.5, 0.1],
            v: vec![0.2, 0.3],
        };
        let hyper = AdamHyper::from(&TrainConfig::default());
        let before_m = st.m.clone();
        adam_update(&mut p, &[0.0, 0.0], &mut st, 0.0, hyper).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert!(st.m.iter().zip(&before_m).all(|(a, b)| a.abs() < b.abs()));

        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        adam_update(&mut p, &[0.0], &mut st, 0.1, hyper).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let hyper = AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let lr = 1e-3;
        let mut last_step = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam_update(&mut p, &[3.7], &mut st, lr, hyper).unwrap();
            last_step = before - p[0];
        }
        // with constant g, m_hat = g and v_hat = g^2 exactly
        assert!((last_step - lr * 3.7 / (3.7 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 5e-4);
        assert_eq!(c.lr_at(19), 5e-4);
        assert_eq!(c.lr_at(20), 2.5e-4);
        assert_eq!(c.lr_at(45), 1.25e-4);
    }

    fn blobs(n_per_class: usize, seed: u64) -> LabeledDataset {
        SynthConfig {
            num_classes: 2,
            n_per_class,
            seed,
            ..SynthConfig::default()
        }
        .generate()
        .unwrap()
    }

    #[test]
    fn rejects_small_or_single_class_data() {
        let net = NetworkConfig::new(2, 2).with_hidden(&[8], &[4]);
        let tc = TrainConfig {
            progress: false,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(train(&net, &tc, &blobs(20, 0), &mut rng), Err(Error::Config(_))));
        let ds = blobs(100, 0);
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == Some(0)).collect();
        assert!(matches!(train(&net, &tc, &ds.subset(&idx), &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_reports_epoch() {
        let net = NetworkConfig::new(2, 2).with_hidden(&[8], &[4]);
        let tc = TrainConfig {
            progress: false,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let tc = TrainConfig {
            learning_rate: 1e300,
            ..tc
        };
        let err = train(&net, &tc, &blobs(100, 1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0, .. }), "{err:?}");

        let mut ds = blobs(100, 1);
        ds.features[5][0] = f64::NAN;
        let err = train(&net, &TrainConfig { learning_rate: 5e-4, ..tc }, &ds, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_history() {
        let net = NetworkConfig::new(2, 2).with_hidden(&[8], &[4]);
        let tc = TrainConfig {
            progress: false,
            max_epochs: 4,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let ds = blobs(60, 2);
        let a = train(&net, &tc, &ds, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = train(&net, &tc, &ds, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.epochs_run(), 4);
    }
}
