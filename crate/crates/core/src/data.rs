//! Datasets: synthetic Gaussian blobs with ambiguous and out-of-distribution
//! rows, IDX and CSV loaders, and seeded splitting.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const ROLE_COLUMN: &str = "role";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    CleanId,
    AmbiguousId,
    Ood,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::CleanId => "clean_id",
            Role::AmbiguousId => "ambiguous_id",
            Role::Ood => "ood",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean_id" => Ok(Role::CleanId),
            "ambiguous_id" => Ok(Role::AmbiguousId),
            "ood" => Ok(Role::Ood),
            _ => Err(Error::Config(format!("unknown role '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub name: String,
    pub features: Vec<Vec<f64>>,
    /// `None` for rows without a class (OOD rows).
    pub labels: Vec<Option<usize>>,
    pub roles: Vec<Role>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<Vec<f64>>,
        labels: Vec<Option<usize>>,
        roles: Vec<Role>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            features,
            labels,
            roles,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.len();
        if self.labels.len() != n || self.roles.len() != n {
            return Err(Error::Contract(format!(
                "row counts disagree: {} features, {} labels, {} roles",
                n,
                self.labels.len(),
                self.roles.len()
            )));
        }
        if let Some(d) = self.features.first().map(Vec::len) {
            if self.features.iter().any(|r| r.len() != d) {
                return Err(Error::Contract("feature rows have different lengths".into()));
            }
        }
        if let Some(l) = self.labels.iter().flatten().find(|l| **l >= self.num_classes) {
            return Err(Error::Contract(format!("label {l} not below K={}", self.num_classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            roles: indices.iter().map(|&i| self.roles[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn with_role(&self, role: Role) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.roles[i] == role).collect();
        let mut out = self.subset(&idx);
        out.name = format!("{}:{}", self.name, role.name());
        out
    }

    pub fn retag(mut self, role: Role) -> Self {
        self.roles = vec![role; self.len()];
        self
    }

    /// Labels as plain indices; fails if any row is unlabeled.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Contract(format!("row {i} has no class label"))))
            .collect()
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if !self.is_empty() && !other.is_empty() && self.dim() != other.dim() {
            return Err(Error::Contract("cannot concatenate datasets of different dimension".into()));
        }
        let mut out = self.clone();
        out.features.extend(other.features.iter().cloned());
        out.labels.extend(&other.labels);
        out.roles.extend(&other.roles);
        out.num_classes = self.num_classes.max(other.num_classes);
        Ok(out)
    }
}

fn default_rho() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    /// Radius of the circle the class means sit on.
    pub class_separation: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub n_ambiguous: usize,
    #[serde(default)]
    pub n_ood: usize,
    #[serde(default)]
    pub ood_offset: f64,
    #[serde(default = "default_rho")]
    pub imbalance_rho: f64,
    /// Fraction of clean rows whose label is replaced by a different class.
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            n_per_class: 300,
            dim: 2,
            class_separation: 4.0,
            noise_sigma: 1.0,
            n_ambiguous: 0,
            n_ood: 0,
            ood_offset: 20.0,
            imbalance_rho: 1.0,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("synthetic data needs dim >= 2".into()));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if !(self.class_separation > 0.0 && self.noise_sigma > 0.0) {
            return Err(Error::Config("class_separation and noise_sigma must be positive".into()));
        }
        if self.n_ood > 0 && !(self.ood_offset > 0.0) {
            return Err(Error::Config("ood_offset must be positive".into()));
        }
        if !(self.imbalance_rho > 0.0 && self.imbalance_rho <= 1.0) {
            return Err(Error::Config("imbalance_rho must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Per-class row counts `round(n * rho^(k / (K - 1)))`.
    pub fn class_counts(&self) -> Vec<usize> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let frac = c as f64 / (k - 1) as f64;
                (self.n_per_class as f64 * self.imbalance_rho.powf(frac)).round() as usize
            })
            .collect()
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let k = self.num_classes as f64;
        (0..self.num_classes)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k;
                let mut m = vec![0.0; self.dim];
                m[0] = self.class_separation * angle.cos();
                m[1] = self.class_separation * angle.sin();
                m
            })
            .collect()
    }

    /// Centre of the OOD blob. With a third axis available it sits on that
    /// axis, at `ood_offset` from the plane of the means; otherwise it sits
    /// outside the circle, `ood_offset` beyond it between classes 0 and 1.
    pub fn ood_center(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        if self.dim >= 3 {
            c[2] = self.ood_offset;
        } else {
            let angle = std::f64::consts::PI / self.num_classes as f64;
            let r = self.class_separation + self.ood_offset;
            c[0] = r * angle.cos();
            c[1] = r * angle.sin();
        }
        c
    }

    pub fn generate(&self) -> Result<LabeledDataset> {
        synth_generate(self, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }
}

fn noisy<R: Rng + ?Sized>(center: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Clean blobs per class, then ambiguous midpoint rows, then OOD rows.
pub fn synth_generate<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<LabeledDataset> {
    config.validate()?;
    let k = config.num_classes;
    let means = config.class_means();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut roles = Vec::new();
    for (c, n) in config.class_counts().into_iter().enumerate() {
        for _ in 0..n {
            features.push(noisy(&means[c], config.noise_sigma, rng));
            let mut label = c;
            if config.label_noise > 0.0 && rng.random::<f64>() < config.label_noise {
                label = (c + rng.random_range(1..k)) % k;
            }
            labels.push(Some(label));
            roles.push(Role::CleanId);
        }
    }
    let pairs = if k == 2 { 1 } else { k };
    for i in 0..config.n_ambiguous {
        let a = i % pairs;
        let b = (a + 1) % k;
        let mid: Vec<f64> = means[a].iter().zip(&means[b]).map(|(x, y)| 0.5 * (x + y)).collect();
        features.push(noisy(&mid, config.noise_sigma, rng));
        labels.push(Some(if rng.random::<bool>() { a } else { b }));
        roles.push(Role::AmbiguousId);
    }
    let ood = config.ood_center();
    for _ in 0..config.n_ood {
        features.push(noisy(&ood, config.noise_sigma, rng));
        labels.push(None);
        roles.push(Role::Ood);
    }
    LabeledDataset::new("synthetic", features, labels, roles, k)
}

fn be_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            field: field.into(),
            message: "file ends inside the header".into(),
        })
}

/// Reads an IDX image file and its label file. Pixels are scaled by 1/255
/// and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;

    let magic = be_u32(&images, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            field: "image magic".into(),
            message: format!("expected 0x{IDX_IMAGE_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let n = be_u32(&images, 4, "image count")? as usize;
    let rows = be_u32(&images, 8, "image rows")? as usize;
    let cols = be_u32(&images, 12, "image cols")? as usize;
    let dim = rows * cols;
    let payload = &images[16..];
    if payload.len() != n * dim {
        return Err(Error::Format {
            field: "image payload".into(),
            message: format!("expected {} bytes, found {}", n * dim, payload.len()),
        });
    }

    let magic = be_u32(&label_bytes, 0, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format {
            field: "label magic".into(),
            message: format!("expected 0x{IDX_LABEL_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let n_labels = be_u32(&label_bytes, 4, "label count")? as usize;
    if n_labels != n {
        return Err(Error::Format {
            field: "label count".into(),
            message: format!("{n} images but {n_labels} labels"),
        });
    }
    let label_payload = &label_bytes[8..];
    if label_payload.len() != n {
        return Err(Error::Format {
            field: "label payload".into(),
            message: format!("expected {n} bytes, found {}", label_payload.len()),
        });
    }

    let features = if dim == 0 {
        vec![Vec::new(); n]
    } else {
        payload
            .chunks_exact(dim)
            .map(|px| px.iter().map(|b| *b as f64 / 255.0).collect())
            .collect()
    };
    let labels: Vec<Option<usize>> = label_payload.iter().map(|b| Some(*b as usize)).collect();
    let k = label_payload.iter().map(|b| *b as usize + 1).max().unwrap_or(0).max(2);
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    LabeledDataset::new(name, features, labels, vec![Role::CleanId; n], k)
}

struct RawCsv {
    features: Vec<Vec<f64>>,
    raw_labels: Vec<String>,
    roles: Vec<Role>,
}

fn read_csv_raw(path: &Path, label_column: &str, require_label: bool) -> Result<RawCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format {
            field: "header".into(),
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(Error::Format {
            field: "header".into(),
            message: "file is empty".into(),
        });
    }
    let label_idx = headers.iter().position(|h| h == label_column);
    if label_idx.is_none() && require_label {
        return Err(Error::Config(format!("label column '{label_column}' not found")));
    }
    let role_idx = headers.iter().position(|h| h == ROLE_COLUMN);
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|i| Some(*i) != label_idx && Some(*i) != role_idx)
        .collect();

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut roles = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row: line,
            column: String::new(),
            message: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: headers[c].to_string(),
                message: format!("'{cell}' is not a number"),
            })?;
            row.push(v);
        }
        let role = match role_idx {
            Some(c) => record.get(c).unwrap_or("").trim().parse::<Role>().map_err(|_| Error::Parse {
                row: line,
                column: ROLE_COLUMN.into(),
                message: format!("unknown role '{}'", record.get(c).unwrap_or("")),
            })?,
            None => Role::CleanId,
        };
        features.push(row);
        raw_labels.push(label_idx.map_or("", |c| record.get(c).unwrap_or("")).trim().to_string());
        roles.push(role);
    }
    if features.is_empty() {
        return Err(Error::Format {
            field: "rows".into(),
            message: "no data rows".into(),
        });
    }

    Ok(RawCsv {
        features,
        raw_labels,
        roles,
    })
}

/// Reads only the feature columns (and roles) of a CSV. The label column is
/// skipped when present; every row comes back unlabeled.
pub fn load_csv_features(path: &Path, label_column: &str) -> Result<LabeledDataset> {
    let raw = read_csv_raw(path, label_column, false)?;
    let n = raw.features.len();
    LabeledDataset::new(csv_name(path), raw.features, vec![None; n], raw.roles, 2)
}

/// Reads a CSV with a header row. Every column other than the label column
/// (and an optional `role` column) must be numeric. Labels are densified to
/// `0..K` in sorted order of the original values, numerically when all of
/// them are integers. Rows with role `ood` are left unlabeled.
pub fn load_csv(path: &Path, label_column: &str) -> Result<LabeledDataset> {
    load_csv_with_classes(path, label_column, None).map(|(ds, _)| ds)
}

/// Like [`load_csv`], also returning the original label of each class index.
/// With `classes` given, labels are mapped through that list instead of being
/// densified, and a label outside it is a parse error.
pub fn load_csv_with_classes(
    path: &Path,
    label_column: &str,
    classes: Option<&[String]>,
) -> Result<(LabeledDataset, Vec<String>)> {
    let RawCsv {
        features,
        raw_labels,
        roles,
    } = read_csv_raw(path, label_column, true)?;
    if let Some(classes) = classes {
        let mut labels = Vec::with_capacity(raw_labels.len());
        for (r, (l, role)) in raw_labels.iter().zip(&roles).enumerate() {
            if *role == Role::Ood {
                labels.push(None);
                continue;
            }
            let found = classes.iter().position(|c| c == l || same_number(c, l));
            labels.push(Some(found.ok_or_else(|| Error::Parse {
                row: r + 2,
                column: label_column.into(),
                message: format!("label '{l}' is not one of the {} known classes", classes.len()),
            })?));
        }
        let ds = LabeledDataset::new(csv_name(path), features, labels, roles, classes.len())?;
        return Ok((ds, classes.to_vec()));
    }

    let labeled = raw_labels.iter().zip(&roles).filter(|(_, r)| **r != Role::Ood).map(|(l, _)| l);
    let all_int = labeled.clone().all(|l| l.parse::<i64>().is_ok());
    let mapping: BTreeMap<String, usize> = if all_int {
        let mut vals: Vec<i64> = labeled.map(|l| l.parse().unwrap()).collect();
        vals.sort_unstable();
        vals.dedup();
        vals.into_iter().enumerate().map(|(i, v)| (v.to_string(), i)).collect()
    } else {
        let mut vals: Vec<&String> = labeled.collect();
        vals.sort();
        vals.dedup();
        vals.into_iter().enumerate().map(|(i, v)| (v.clone(), i)).collect()
    };
    let labels: Vec<Option<usize>> = raw_labels
        .iter()
        .zip(&roles)
        .map(|(l, r)| {
            if *r == Role::Ood {
                None
            } else if all_int {
                mapping.get(&l.parse::<i64>().unwrap().to_string()).copied()
            } else {
                mapping.get(l).copied()
            }
        })
        .collect();
    let mut names = vec![String::new(); mapping.len()];
    for (name, i) in &mapping {
        names[*i] = name.clone();
    }
    let ds = LabeledDataset::new(csv_name(path), features, labels, roles, mapping.len().max(2))?;
    Ok((ds, names))
}

fn same_number(a: &str, b: &str) -> bool {
    matches!((a.trim().parse::<f64>(), b.trim().parse::<f64>()), (Ok(x), Ok(y)) if x == y)
}

fn csv_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned())
}

/// Writes `x0..x{D-1}, label, role`. Floats use shortest round-trip
/// formatting; unlabeled rows get label -1.
pub fn write_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    header.push(ROLE_COLUMN.into());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(&header).map_err(io)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.features[i].iter().map(|v| format!("{v:?}")).collect();
        rec.push(dataset.labels[i].map_or_else(|| "-1".to_string(), |l| l.to_string()));
        rec.push(dataset.roles[i].name().into());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub first: LabeledDataset,
    pub second: LabeledDataset,
    /// Set when stratification was impossible and a plain shuffle was used.
    pub warning: Option<String>,
}

/// Partitions the rows so that `first` holds `round(n * fraction)` of them,
/// stratified by label (unlabeled rows form their own stratum).
pub fn split(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target = (n as f64 * fraction).round() as usize;
    if n >= 2 {
        target = target.clamp(1, n - 1);
    }

    let mut strata: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, l) in dataset.labels.iter().enumerate() {
        strata.entry(*l).or_default().push(i);
    }
    let mut warning = None;
    let mut first: Vec<usize>;
    if strata.values().any(|v| v.len() < 2) {
        let msg = "a class has fewer than 2 rows; split is not stratified".to_string();
        log::warn!("{msg}");
        warning = Some(msg);
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        first = all[..target].to_vec();
    } else {
        // largest-remainder allocation of `target` across strata
        let ideal: Vec<f64> = strata.values().map(|v| v.len() as f64 * target as f64 / n as f64).collect();
        let mut take: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..ideal.len()).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut left = target - take.iter().sum::<usize>();
        for &s in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if take[s] < strata.values().nth(s).map_or(0, Vec::len) {
                take[s] += 1;
                left -= 1;
            }
        }
        first = Vec::with_capacity(target);
        for (rows, t) in strata.values().zip(take) {
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            first.extend_from_slice(&rows[..t]);
        }
    }
    first.sort_unstable();
    let mut in_first = vec![false; n];
    first.iter().for_each(|&i| in_first[i] = true);
    let second: Vec<usize> = (0..n).filter(|&i| !in_first[i]).collect();
    Ok(Split {
        first: dataset.subset(&first),
        second: dataset.subset(&second),
        warning,
    })
}
