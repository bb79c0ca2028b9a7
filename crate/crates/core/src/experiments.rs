//! Downstream tasks on a trained model: misclassification detection, OOD
//! detection, the ambiguity comparison, data scaling and ablation runs.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fd::FdParams;
use crate::metrics::{accuracy, histogram_overlap, ranking_metrics, RankingResult};
use crate::network::{predict_params, Ablation, NetworkConfig, NetworkParams};
use crate::trainer::{train, TrainConfig};
use crate::uncertainty::{normalize_batch, uncertainties, UncertaintyReport};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: NetworkParams,
}

impl Model {
    pub fn fd_params(&self, inputs: &[Vec<f64>]) -> Result<Vec<FdParams>> {
        predict_params(&self.params, &self.config, inputs)
    }

    pub fn reports(&self, inputs: &[Vec<f64>]) -> Result<Vec<UncertaintyReport>> {
        Ok(self.fd_params(inputs)?.iter().map(uncertainties).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub datasets: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    pub score_convention: String,
}

impl TaskReport {
    fn new(task: &str, datasets: Vec<String>, convention: &str) -> Self {
        Self {
            task: task.into(),
            datasets,
            metrics: BTreeMap::new(),
            score_convention: convention.into(),
        }
    }

    fn add_ranking(&mut self, r: &RankingResult) {
        self.metrics.insert("aupr".into(), r.aupr);
        self.metrics.insert("auroc".into(), r.auroc);
        self.metrics.insert("n_pos".into(), r.n_pos as f64);
        self.metrics.insert("n_neg".into(), r.n_neg as f64);
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Scores each labeled row by `-AU`; correct predictions are positives.
pub fn run_misclassification_detection(model: &Model, dataset: &LabeledDataset) -> Result<TaskReport> {
    let labels = dataset.class_labels()?;
    let reports = model.reports(&dataset.features)?;
    let preds: Vec<usize> = reports.iter().map(|r| r.predicted_class).collect();
    let correct: Vec<bool> = preds.iter().zip(&labels).map(|(p, l)| p == l).collect();
    let scores: Vec<f64> = reports.iter().map(|r| -r.aleatoric).collect();
    let ranking = ranking_metrics(&scores, &correct)?;
    let mut report = TaskReport::new("misclassification", vec![dataset.name.clone()], "-aleatoric; correct = 1");
    report.add_ranking(&ranking);
    report.metrics.insert("accuracy".into(), accuracy(&preds, &labels)?);
    Ok(report)
}

/// Scores each row by `-EU`; ID rows are positives.
pub fn run_ood_detection(model: &Model, id_set: &LabeledDataset, ood_set: &LabeledDataset) -> Result<TaskReport> {
    if id_set.is_empty() || ood_set.is_empty() {
        return Err(Error::Contract("OOD detection needs non-empty ID and OOD sets".into()));
    }
    let id = model.reports(&id_set.features)?;
    let ood = model.reports(&ood_set.features)?;
    let scores: Vec<f64> = id.iter().chain(&ood).map(|r| -r.epistemic).collect();
    let labels: Vec<bool> = std::iter::repeat_n(true, id.len())
        .chain(std::iter::repeat_n(false, ood.len()))
        .collect();
    let ranking = ranking_metrics(&scores, &labels)?;
    let mut report = TaskReport::new(
        "ood",
        vec![id_set.name.clone(), ood_set.name.clone()],
        "-epistemic; ID = 1, OOD = 0",
    );
    report.add_ranking(&ranking);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityReport {
    pub mean_au_clean: f64,
    pub mean_au_ambiguous: f64,
    pub mean_eu_clean: f64,
    pub mean_eu_ambiguous: f64,
    /// Histogram overlap of min-max scaled AU over the union of both sets.
    pub au_overlap: f64,
    /// Same for EU, log-transformed before scaling.
    pub eu_overlap: f64,
}

pub fn ambiguity_comparison(model: &Model, clean: &LabeledDataset, ambiguous: &LabeledDataset, bins: usize) -> Result<AmbiguityReport> {
    if clean.is_empty() || ambiguous.is_empty() {
        return Err(Error::Contract("ambiguity comparison needs both sets".into()));
    }
    let c = model.reports(&clean.features)?;
    let a = model.reports(&ambiguous.features)?;
    let mean = |v: &[UncertaintyReport], f: fn(&UncertaintyReport) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let overlap = |f: fn(&UncertaintyReport) -> f64, log: bool| -> Result<f64> {
        let all: Vec<f64> = c.iter().chain(&a).map(f).collect();
        let scaled = normalize_batch(&all, log)?;
        histogram_overlap(&scaled[..c.len()], &scaled[c.len()..], bins)
    };
    Ok(AmbiguityReport {
        mean_au_clean: mean(&c, |r| r.aleatoric),
        mean_au_ambiguous: mean(&a, |r| r.aleatoric),
        mean_eu_clean: mean(&c, |r| r.epistemic),
        mean_eu_ambiguous: mean(&a, |r| r.epistemic),
        au_overlap: overlap(|r| r.aleatoric, false)?,
        eu_overlap: overlap(|r| r.epistemic, true)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub size: usize,
    pub mean_epistemic: Option<f64>,
    pub accuracy: Option<f64>,
    /// Set when training at this size failed; the experiment continues.
    pub error: Option<String>,
}

/// Trains one model per size on nested prefixes of one shuffled order of
/// `pool` and evaluates mean EU and accuracy on `heldout`.
pub fn data_scaling_experiment<R: Rng + ?Sized>(
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    sizes: &[usize],
    pool: &LabeledDataset,
    heldout: &LabeledDataset,
    rng: &mut R,
) -> Result<Vec<ScalingPoint>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sizes must be non-empty and strictly ascending".into()));
    }
    let labeled: Vec<usize> = (0..pool.len()).filter(|&i| pool.labels[i].is_some()).collect();
    if *sizes.last().unwrap() > labeled.len() {
        return Err(Error::Config(format!(
            "largest size {} exceeds the {} labeled rows available",
            sizes.last().unwrap(),
            labeled.len()
        )));
    }
    let held_labels = heldout.class_labels()?;
    let mut order = labeled;
    order.shuffle(rng);
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let subset = pool.subset(&nested_prefix(&order, size));
        let point = match train(net_config, train_config, &subset, rng) {
            Ok(outcome) => {
                let model = Model {
                    config: net_config.clone(),
                    params: outcome.params,
                };
                let reports = model.reports(&heldout.features)?;
                let mean_eu = reports.iter().map(|r| r.epistemic).sum::<f64>() / reports.len() as f64;
                let preds: Vec<usize> = reports.iter().map(|r| r.predicted_class).collect();
                ScalingPoint {
                    size,
                    mean_epistemic: Some(mean_eu),
                    accuracy: Some(accuracy(&preds, &held_labels)?),
                    error: None,
                }
            }
            Err(e) => {
                log::warn!("training at size {size} failed: {e}");
                ScalingPoint {
                    size,
                    mean_epistemic: None,
                    accuracy: None,
                    error: Some(e.to_string()),
                }
            }
        };
        points.push(point);
    }
    Ok(points)
}

/// The first `size` entries of `order`; smaller sizes are prefixes of larger.
pub fn nested_prefix(order: &[usize], size: usize) -> Vec<usize> {
    order[..size.min(order.len())].to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub ood: TaskReport,
    pub accuracy: f64,
}

/// Trains the full model and each ablated variant with the same seed and
/// reports OOD detection and test accuracy for each.
pub fn run_ablations(
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    train_set: &LabeledDataset,
    id_test: &LabeledDataset,
    ood_test: &LabeledDataset,
    seed: u64,
) -> Result<Vec<AblationResult>> {
    use rand::SeedableRng;
    let labels = id_test.class_labels()?;
    Ablation::ALL
        .iter()
        .map(|&ablation| {
            let config = net_config.clone().with_ablation(ablation);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let outcome = train(&config, train_config, train_set, &mut rng)?;
            let model = Model {
                config,
                params: outcome.params,
            };
            let preds: Vec<usize> = model.reports(&id_test.features)?.iter().map(|r| r.predicted_class).collect();
            Ok(AblationResult {
                ablation,
                ood: run_ood_detection(&model, id_test, ood_test)?,
                accuracy: accuracy(&preds, &labels)?,
            })
        })
        .collect()
}
