use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fedl::data::{load_csv_features, load_csv_with_classes, write_csv, LabeledDataset, Role};
use fedl::experiments::{data_scaling_experiment, run_ablations, run_misclassification_detection, run_ood_detection, Model};
use fedl::metrics::{brier_score, spearman};
use fedl::network::NetworkConfig;
use fedl::trainer::{train, TrainConfig};
use fedl::FdParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::config::{default_seed, parse_dims, parse_reals, ConfigFile, SynthArgs, TrainArgs};
use crate::report::{config_hash, emit, out_line, Record};
use crate::{verify, CliError};

#[derive(Debug, Parser)]
#[command(name = "fedl", version, about = "Flexible Dirichlet evidential classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (clean, ambiguous and OOD rows) as CSV
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        args: SynthArgs,
    },
    /// Train a model on a CSV and write a checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Accuracy, Brier score and misclassification detection on labeled rows
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        label_column: Option<String>,
    },
    /// OOD detection by negative epistemic uncertainty
    Ood {
        #[arg(long)]
        model: PathBuf,
        /// One file whose `role` column marks the OOD rows
        #[arg(long, conflicts_with_all = ["id", "ood"])]
        data: Option<PathBuf>,
        #[arg(long, requires = "ood")]
        id: Option<PathBuf>,
        #[arg(long, requires = "id")]
        ood: Option<PathBuf>,
        #[arg(long)]
        label_column: Option<String>,
    },
    /// Per-row distribution parameters and uncertainties as JSON lines
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        label_column: Option<String>,
    },
    /// Draw samples from one flexible Dirichlet distribution
    Sample {
        #[arg(long)]
        alpha: String,
        #[arg(long)]
        p: String,
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean held-out epistemic uncertainty against training-set size
    Scaling {
        /// Pool of labeled rows; smaller sizes are prefixes of larger ones
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long, default_value = "100,300,1000,3000")]
        sizes: String,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Train the full model and each ablated variant, report OOD detection
    Ablate {
        #[arg(long)]
        train: PathBuf,
        /// Test file whose `role` column marks the OOD rows
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Run the identity and oracle suite; exit 3 on any failure
    Verify {
        #[arg(long)]
        seed: Option<u64>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out, args } => synth(&out, &args),
        Command::Train { data, out, args } => train_cmd(&data, &out, &args),
        Command::Eval { model, data, label_column } => eval(&model, &data, label_column.as_deref()),
        Command::Ood {
            model,
            data,
            id,
            ood,
            label_column,
        } => ood_cmd(&model, data.as_deref(), id.as_deref().zip(ood.as_deref()), label_column.as_deref()),
        Command::Predict { model, data, label_column } => predict(&model, &data, label_column.as_deref()),
        Command::Sample { alpha, p, tau, n, seed } => sample(&alpha, &p, tau, n, seed),
        Command::Scaling {
            data,
            heldout,
            sizes,
            args,
        } => scaling(&data, &heldout, &sizes, &args),
        Command::Ablate { train, test, args } => ablate(&train, &test, &args),
        Command::Verify { seed } => verify_cmd(seed),
    }
}

#[derive(Serialize)]
struct HashInput<'a> {
    network: &'a NetworkConfig,
    train: &'a TrainConfig,
}

fn run_hash(net: &NetworkConfig, tc: &TrainConfig) -> String {
    config_hash(&HashInput { network: net, train: tc })
}

fn load_model(path: &Path) -> Result<(Checkpoint, Model), CliError> {
    let ck = checkpoint::load(path)?;
    let model = Model {
        config: ck.meta.net_config.clone(),
        params: ck.params.clone(),
    };
    Ok((ck, model))
}

fn check_dim(ck: &Checkpoint, ds: &LabeledDataset) -> Result<(), CliError> {
    let want = ck.meta.net_config.input_dim;
    if ds.dim() != want {
        return Err(CliError::Data(format!(
            "{} has {} feature columns, the model expects {want}",
            ds.name,
            ds.dim()
        )));
    }
    Ok(())
}

/// Labeled rows that are not marked OOD.
fn labeled_id_rows(ds: &LabeledDataset) -> LabeledDataset {
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.roles[i] != Role::Ood && ds.labels[i].is_some())
        .collect();
    ds.subset(&idx)
}

fn record(task: &str, dataset: &str, metric: &str, value: f64, seed: u64, hash: &str) -> Record {
    Record {
        task: task.into(),
        dataset: dataset.into(),
        metric: metric.into(),
        value,
        seed,
        config_hash: hash.into(),
    }
}

fn synth(out: &Path, args: &SynthArgs) -> Result<(), CliError> {
    let file = ConfigFile::read(args.config.as_deref())?;
    let sc = args.resolve(&file)?;
    let ds = sc.generate()?;
    write_csv(&ds, out)?;
    let hash = config_hash(&sc);
    emit(&[record("synth", &out.display().to_string(), "rows", ds.len() as f64, sc.seed, &hash)]);
    Ok(())
}

fn fit(args: &TrainArgs, file: &ConfigFile, ds: &LabeledDataset) -> Result<(NetworkConfig, TrainConfig, fedl::trainer::TrainOutcome), CliError> {
    let tc = args.resolve_train(file)?;
    let net = args.resolve_network(file, ds.dim(), ds.num_classes)?;
    let outcome = train(&net, &tc, ds, &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
    Ok((net, tc, outcome))
}

fn train_cmd(data: &Path, out: &Path, args: &TrainArgs) -> Result<(), CliError> {
    let file = ConfigFile::read(args.config.as_deref())?;
    let (ds, classes) = load_csv_with_classes(data, file.label_column(args.label_column.as_deref()), None)?;
    let (net, tc, outcome) = fit(args, &file, &ds)?;
    let hash = run_hash(&net, &tc);
    let h = &outcome.history;
    let meta = CheckpointMeta {
        net_config: net,
        train_config: tc.clone(),
        classes,
        best_epoch: h.best_epoch,
        epochs_run: h.epochs_run(),
        stopped_early: h.stopped_early,
        seed: tc.seed,
        config_hash: hash.clone(),
    };
    let ck = Checkpoint::new(meta, outcome.params.clone(), outcome.optimizer.clone(), &ds.features);
    checkpoint::save(out, &ck)?;
    let name = ds.name.as_str();
    emit(&[
        record("train", name, "best_epoch", h.best_epoch as f64, tc.seed, &hash),
        record("train", name, "val_loss", h.val_loss[h.best_epoch], tc.seed, &hash),
        record("train", name, "val_accuracy", h.val_accuracy[h.best_epoch], tc.seed, &hash),
    ]);
    Ok(())
}

fn eval(model_path: &Path, data: &Path, label_column: Option<&str>) -> Result<(), CliError> {
    let (ck, model) = load_model(model_path)?;
    let (ds, _) = load_csv_with_classes(data, label_column.unwrap_or("label"), Some(&ck.meta.classes))?;
    check_dim(&ck, &ds)?;
    let rows = labeled_id_rows(&ds);
    if rows.is_empty() {
        return Err(CliError::Data(format!("{} has no labeled in-distribution rows", ds.name)));
    }
    let labels = rows.class_labels()?;
    let probs: Vec<Vec<f64>> = model.reports(&rows.features)?.into_iter().map(|r| r.expected_probs).collect();
    let brier = brier_score(&probs, &labels)?;
    let (seed, hash) = (ck.meta.seed, ck.meta.config_hash.as_str());
    let name = ds.name.as_str();
    let mut out = vec![
        record("eval", name, "brier", brier.raw, seed, hash),
        record("eval", name, "brier_x100", brier.scaled, seed, hash),
    ];
    match run_misclassification_detection(&model, &rows) {
        Ok(r) => {
            out.insert(0, record("eval", name, "accuracy", r.metrics["accuracy"], seed, hash));
            out.push(record("misclassification", name, "aupr", r.metrics["aupr"], seed, hash));
            out.push(record("misclassification", name, "auroc", r.metrics["auroc"], seed, hash));
        }
        // every row right or every row wrong leaves the ranking undefined
        Err(fedl::Error::UndefinedMetric(m)) => {
            let preds: Vec<usize> = probs.iter().map(|p| fedl::uncertainty::argmax(p)).collect();
            out.insert(0, record("eval", name, "accuracy", fedl::metrics::accuracy(&preds, &labels)?, seed, hash));
            log::warn!("misclassification metrics undefined: {m}");
        }
        Err(e) => return Err(e.into()),
    }
    emit(&out);
    Ok(())
}

fn ood_cmd(model_path: &Path, data: Option<&Path>, pair: Option<(&Path, &Path)>, label_column: Option<&str>) -> Result<(), CliError> {
    let (ck, model) = load_model(model_path)?;
    let label = label_column.unwrap_or("label");
    let (id, ood) = match (data, pair) {
        (Some(path), _) => {
            let ds = load_csv_features(path, label)?;
            let id_idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.roles[i] != Role::Ood).collect();
            (ds.subset(&id_idx), ds.with_role(Role::Ood))
        }
        (None, Some((id, ood))) => (load_csv_features(id, label)?, load_csv_features(ood, label)?),
        (None, None) => return Err(CliError::Usage("give --data, or both --id and --ood".into())),
    };
    check_dim(&ck, &id)?;
    check_dim(&ck, &ood)?;
    if id.is_empty() || ood.is_empty() {
        return Err(CliError::Data(format!("need both ID and OOD rows (got {} and {})", id.len(), ood.len())));
    }
    let r = run_ood_detection(&model, &id, &ood)?;
    let name = format!("{}|{}", id.name, ood.name);
    let (seed, hash) = (ck.meta.seed, ck.meta.config_hash.as_str());
    emit(&[
        record("ood", &name, "aupr", r.metrics["aupr"], seed, hash),
        record("ood", &name, "auroc", r.metrics["auroc"], seed, hash),
    ]);
    Ok(())
}

#[derive(Serialize)]
struct PredictRow<'a> {
    row: usize,
    alpha: &'a [f64],
    p: &'a [f64],
    tau: f64,
    predicted_class: &'a str,
    expected_probs: &'a [f64],
    total: f64,
    aleatoric: f64,
    epistemic: f64,
}

fn predict(model_path: &Path, data: &Path, label_column: Option<&str>) -> Result<(), CliError> {
    let (ck, model) = load_model(model_path)?;
    let ds = load_csv_features(data, label_column.unwrap_or("label"))?;
    check_dim(&ck, &ds)?;
    let fds = model.fd_params(&ds.features)?;
    for (i, fd) in fds.iter().enumerate() {
        let u = fedl::uncertainty::uncertainties(fd);
        let row = PredictRow {
            row: i,
            alpha: fd.alpha(),
            p: fd.p(),
            tau: fd.tau(),
            predicted_class: &ck.meta.classes[u.predicted_class],
            expected_probs: &u.expected_probs,
            total: u.total,
            aleatoric: u.aleatoric,
            epistemic: u.epistemic,
        };
        out_line(&serde_json::to_string(&row).expect("row serializes"));
    }
    Ok(())
}

fn sample(alpha: &str, p: &str, tau: f64, n: usize, seed: Option<u64>) -> Result<(), CliError> {
    let fd = FdParams::new(parse_reals(alpha, "alpha")?, parse_reals(p, "p")?, tau).map_err(|e| CliError::Usage(e.to_string()))?;
    let seed = match seed {
        Some(s) => s,
        None => default_seed()?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in fd.sample(&mut rng, n) {
        let cells: Vec<String> = s.as_slice().iter().map(|v| format!("{v:?}")).collect();
        out_line(&cells.join(","));
    }
    Ok(())
}

fn scaling(data: &Path, heldout: &Path, sizes: &str, args: &TrainArgs) -> Result<(), CliError> {
    let file = ConfigFile::read(args.config.as_deref())?;
    let label = file.label_column(args.label_column.as_deref());
    let (pool, classes) = load_csv_with_classes(data, label, None)?;
    let (held, _) = load_csv_with_classes(heldout, label, Some(&classes))?;
    let held = labeled_id_rows(&held);
    let sizes = parse_dims(sizes)?;
    let tc = args.resolve_train(&file)?;
    let net = args.resolve_network(&file, pool.dim(), pool.num_classes)?;
    let hash = run_hash(&net, &tc);
    let points = data_scaling_experiment(&net, &tc, &sizes, &pool, &held, &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
    let mut out = Vec::new();
    for pt in &points {
        let name = format!("{}[..{}]", pool.name, pt.size);
        match (pt.mean_epistemic, pt.accuracy) {
            (Some(eu), Some(acc)) => {
                out.push(record("scaling", &name, "mean_epistemic", eu, tc.seed, &hash));
                out.push(record("scaling", &name, "accuracy", acc, tc.seed, &hash));
            }
            _ => log::warn!("size {} failed: {}", pt.size, pt.error.as_deref().unwrap_or("unknown")),
        }
    }
    let ok: Vec<_> = points.iter().filter_map(|p| Some((p.size as f64, p.mean_epistemic?))).collect();
    if ok.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = ok.into_iter().unzip();
        if let Ok(rho) = spearman(&x, &y) {
            out.push(record("scaling", &pool.name, "spearman_size_epistemic", rho, tc.seed, &hash));
        }
    }
    emit(&out);
    Ok(())
}

fn ablate(train_path: &Path, test_path: &Path, args: &TrainArgs) -> Result<(), CliError> {
    let file = ConfigFile::read(args.config.as_deref())?;
    let label = file.label_column(args.label_column.as_deref());
    let (train_set, classes) = load_csv_with_classes(train_path, label, None)?;
    let test = load_csv_features(test_path, label)?;
    let id_idx: Vec<usize> = (0..test.len()).filter(|&i| test.roles[i] != Role::Ood).collect();
    let (id, ood) = (test.subset(&id_idx), test.with_role(Role::Ood));
    if id.is_empty() || ood.is_empty() {
        return Err(CliError::Data(format!("{} needs both ID and OOD rows", test.name)));
    }
    // accuracy needs labels in the training class order
    let (labeled_test, _) = load_csv_with_classes(test_path, label, Some(&classes))?;
    let id_labeled = labeled_id_rows(&labeled_test);
    let tc = args.resolve_train(&file)?;
    let net = args.resolve_network(&file, train_set.dim(), train_set.num_classes)?;
    let results = run_ablations(&net, &tc, &train_set, &id_labeled, &ood, tc.seed)?;
    let mut out = Vec::new();
    for r in &results {
        let cfg = net.clone().with_ablation(r.ablation);
        let hash = run_hash(&cfg, &tc);
        let task = format!("ablate:{}", r.ablation.name());
        out.push(record(&task, &test.name, "ood_aupr", r.ood.metrics["aupr"], tc.seed, &hash));
        out.push(record(&task, &test.name, "ood_auroc", r.ood.metrics["auroc"], tc.seed, &hash));
        out.push(record(&task, &test.name, "accuracy", r.accuracy, tc.seed, &hash));
    }
    emit(&out);
    Ok(())
}

fn verify_cmd(seed: Option<u64>) -> Result<(), CliError> {
    let seed = match seed {
        Some(s) => s,
        None => default_seed()?,
    };
    let checks = verify::run(seed);
    for c in &checks {
        out_line(&format!("verify {:<26} {} {}", c.name, if c.passed { "ok" } else { "FAIL" }, c.detail));
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    out_line(&format!("verify summary seed={seed} passed={} failed={}", checks.len() - failed.len(), failed.len()));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("failed checks: {}", failed.join(", "))))
    }
}
