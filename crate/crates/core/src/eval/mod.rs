//! Counting metrics, embedding diagnostics and report artifacts.

mod report;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{CrowdSample, Split, NORMAL};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::{images_to_tensor, DensityMap, MqclModel, ProjVector};
use crate::multiqueue::KeyMemory;
use crate::trainer::Checkpoint;

pub use report::{read_log, report, ReportSummary, COMPARISON_FILE, LOSS_PLOT_FILE, MAE_PLOT_FILE};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METADATA_FILE: &str = "metadata.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// Predicted head count: the total mass of the density map.
pub fn count_of(density: &DensityMap) -> f64 {
    density.sum()
}

/// Mean absolute and root-mean-square error.
pub fn mae_rmse(preds: &[f64], gts: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions to score".into()));
    }
    let n = preds.len() as f64;
    let (abs, sq) = preds.iter().zip(gts).fold((0.0, 0.0), |(a, s), (p, g)| {
        let e = p - g;
        (a + e.abs(), s + e * e)
    });
    Ok((abs / n, (sq / n).sqrt()))
}

/// Anything that turns an image into a density map.
pub trait DensityEstimator {
    /// Input sides must be a multiple of this.
    fn input_multiple(&self) -> usize;
    /// Input pixels per density cell along each axis.
    fn cell(&self) -> usize;
    /// Density of an image whose sides are multiples of [`Self::input_multiple`].
    fn density(&self, image: &Image) -> Result<DensityMap>;
}

impl DensityEstimator for MqclModel {
    fn input_multiple(&self) -> usize {
        self.config.stride
    }

    fn cell(&self) -> usize {
        self.config.density_cell()
    }

    fn density(&self, image: &Image) -> Result<DensityMap> {
        let x = images_to_tensor(&[image], &self.device)?;
        Ok(self.infer_density(&x)?.remove(0))
    }
}

impl DensityEstimator for Checkpoint {
    fn input_multiple(&self) -> usize {
        self.model.input_multiple()
    }

    fn cell(&self) -> usize {
        self.model.cell()
    }

    fn density(&self, image: &Image) -> Result<DensityMap> {
        self.model.density(image)
    }
}

/// Count of a full image of any size: reflect-pad to the input multiple,
/// then sum only the cells covering the original image.
pub fn full_image_count(estimator: &dyn DensityEstimator, image: &Image) -> Result<f64> {
    let padded = image.pad_reflect_to_multiple(estimator.input_multiple());
    let density = estimator.density(&padded)?;
    let cell = estimator.cell();
    let kept = density.crop(image.height().div_ceil(cell), image.width().div_ceil(cell))?;
    Ok(count_of(&kept))
}

/// Ground truth and prediction for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub image_index: u64,
    pub weather: usize,
    pub gt: f64,
    pub pred: f64,
}

pub fn predict_counts(estimator: &dyn DensityEstimator, samples: &[CrowdSample]) -> Result<Vec<ImageCount>> {
    samples
        .iter()
        .map(|s| {
            Ok(ImageCount {
                image_index: s.image_index,
                weather: s.weather,
                gt: s.count() as f64,
                pred: full_image_count(estimator, &s.image)?,
            })
        })
        .collect()
}

/// One table row. `mae` and `rmse` are absent when the group is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub group: String,
    pub n: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
}

impl MetricsRow {
    fn from_counts(group: &str, counts: &[&ImageCount]) -> Self {
        if counts.is_empty() {
            return Self { group: group.into(), n: 0, mae: None, rmse: None };
        }
        let preds: Vec<f64> = counts.iter().map(|c| c.pred).collect();
        let gts: Vec<f64> = counts.iter().map(|c| c.gt).collect();
        let (mae, rmse) = mae_rmse(&preds, &gts).expect("non-empty, equal lengths");
        Self { group: group.into(), n: counts.len(), mae: Some(mae), rmse: Some(rmse) }
    }

    /// Size-weighted combination of the same group measured on two disjoint sets.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.group != other.group {
            return Err(Error::Invalid(format!("cannot merge rows {} and {}", self.group, other.group)));
        }
        let n = self.n + other.n;
        if n == 0 {
            return Ok(self.clone());
        }
        let w = |row: &Self, f: fn(&Self) -> f64| if row.n == 0 { 0.0 } else { row.n as f64 * f(row) };
        let abs = w(self, |r| r.mae.unwrap()) + w(other, |r| r.mae.unwrap());
        let sq = w(self, |r| r.rmse.unwrap().powi(2)) + w(other, |r| r.rmse.unwrap().powi(2));
        Ok(Self { group: self.group.clone(), n, mae: Some(abs / n as f64), rmse: Some((sq / n as f64).sqrt()) })
    }
}

/// Provenance of a metrics table.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TableMeta {
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub seed: u64,
    pub split: String,
}

/// Per-class rows, then `adverse` (all non-normal classes), then `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub meta: TableMeta,
}

pub const ADVERSE: &str = "adverse";
pub const TOTAL: &str = "total";

impl MetricsTable {
    pub fn from_counts(counts: &[ImageCount], class_names: &[String], meta: TableMeta) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Invalid("cannot evaluate an empty split".into()));
        }
        if let Some(c) = counts.iter().find(|c| c.weather >= class_names.len()) {
            return Err(Error::UnknownWeather { class: c.weather, num_classes: class_names.len() });
        }
        let select = |keep: &dyn Fn(usize) -> bool| counts.iter().filter(|c| keep(c.weather)).collect::<Vec<_>>();
        let mut rows: Vec<MetricsRow> = class_names
            .iter()
            .enumerate()
            .map(|(class, name)| MetricsRow::from_counts(name, &select(&|w| w == class)))
            .collect();
        rows.push(MetricsRow::from_counts(ADVERSE, &select(&|w| w != NORMAL)));
        rows.push(MetricsRow::from_counts(TOTAL, &select(&|_| true)));
        Ok(Self { rows, meta })
    }

    pub fn row(&self, group: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.group == group)
    }

    /// Group-by-group [`MetricsRow::merge`] of two tables with the same layout.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.rows.len() != other.rows.len() {
            return Err(Error::Invalid("tables have different groups".into()));
        }
        let rows = self.rows.iter().zip(&other.rows).map(|(a, b)| a.merge(b)).collect::<Result<_>>()?;
        Ok(Self { rows, meta: self.meta.clone() })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,n,mae,rmse\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.group, r.n, fmt(r.mae), fmt(r.rmse)));
        }
        out
    }

    /// Parses the output of [`Self::to_csv`]. Metadata is left empty.
    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let csv_err = |e| Error::Csv { path: path.to_path_buf(), source: e };
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != ["group", "n", "mae", "rmse"] {
            return Err(Error::Invalid(format!("{}: unexpected header", path.display())));
        }
        let bad = |field: &str| Error::Invalid(format!("{}: bad value {field:?}", path.display()));
        let opt = |field: &str| -> Result<Option<f64>> {
            if field == "NA" {
                Ok(None)
            } else {
                field.parse().map(Some).map_err(|_| bad(field))
            }
        };
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            rows.push(MetricsRow {
                group: record[0].to_string(),
                n: record[1].parse().map_err(|_| bad(&record[1]))?,
                mae: opt(&record[2])?,
                rmse: opt(&record[3])?,
            });
        }
        Ok(Self { rows, meta: TableMeta::default() })
    }

    /// Writes `metrics.csv` and `metadata.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        std::fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))?;
        crate::datagen::write_json(&dir.join(METADATA_FILE), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut table = Self::from_csv(&text, &path)?;
        let meta_path = dir.join(METADATA_FILE);
        if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            table.meta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
        }
        Ok(table)
    }
}

pub fn predictions_csv(counts: &[ImageCount]) -> String {
    let mut out = String::from("image_index,weather,gt,pred\n");
    for c in counts {
        out.push_str(&format!("{},{},{},{:.6}\n", c.image_index, c.weather, c.gt, c.pred));
    }
    out
}

/// Full-image evaluation of `samples`, grouped by weather class.
pub fn grouped_eval(
    estimator: &dyn DensityEstimator,
    samples: &[CrowdSample],
    class_names: &[String],
    meta: TableMeta,
) -> Result<MetricsTable> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    MetricsTable::from_counts(&predict_counts(estimator, samples)?, class_names, meta)
}

/// Evaluates a checkpoint and returns the table together with per-image counts.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    samples: &[CrowdSample],
    split: Split,
    meta: TableMeta,
) -> Result<(MetricsTable, Vec<ImageCount>)> {
    checkpoint.check_consistency()?;
    if samples.is_empty() {
        return Err(Error::Invalid(format!("{} split is empty", split.name())));
    }
    let counts = predict_counts(checkpoint, samples)?;
    let meta = TableMeta { split: split.name().into(), ..meta };
    Ok((MetricsTable::from_counts(&counts, &checkpoint.class_names, meta)?, counts))
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-300)
}

/// Mean silhouette coefficient under cosine distance.
pub fn cluster_separation(vectors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if vectors.len() != labels.len() {
        return Err(Error::Invalid(format!("{} vectors but {} labels", vectors.len(), labels.len())));
    }
    let num_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; num_labels];
    for &l in labels {
        sizes[l] += 1;
    }
    let present: Vec<usize> = (0..num_labels).filter(|&l| sizes[l] > 0).collect();
    if present.len() < 2 {
        return Err(Error::Invalid("silhouette needs at least two classes".into()));
    }
    if let Some(&l) = present.iter().find(|&&l| sizes[l] < 2) {
        return Err(Error::Invalid(format!("class {l} has a single point")));
    }
    let n = vectors.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; num_labels];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += cosine_distance(&vectors[i], &vectors[j]);
            }
        }
        let own = labels[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = present
            .iter()
            .filter(|&&l| l != own)
            .map(|&l| sums[l] / sizes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// Projections of full images, in sample order, computed in batches of
/// equally sized images.
pub fn embed_samples(model: &MqclModel, samples: &[CrowdSample], batch: usize) -> Result<Vec<ProjVector>> {
    let multiple = model.config.stride;
    let padded: Vec<Image> = samples.iter().map(|s| s.image.pad_reflect_to_multiple(multiple)).collect();
    let mut out = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        let dims = (padded[start].height(), padded[start].width());
        let mut end = start + 1;
        while end < samples.len() && end - start < batch.max(1) && (padded[end].height(), padded[end].width()) == dims {
            end += 1;
        }
        let images: Vec<&Image> = padded[start..end].iter().collect();
        let rows = model.embed(&images_to_tensor(&images, &model.device)?)?;
        out.extend(
            rows.into_iter()
                .zip(&samples[start..end])
                .map(|(v, s)| ProjVector::new(v, s.image_index, s.weather)),
        );
        start = end;
    }
    Ok(out)
}

/// Mean cosine similarity between the given vectors and the centroid of
/// the normal-weather keys in `memory`.
pub fn domain_pull(vectors: &[Vec<f64>], memory: &dyn KeyMemory) -> Result<f64> {
    let normal = memory.class(NORMAL)?;
    if normal.is_empty() {
        return Err(Error::Protocol("memory holds no normal-weather keys".into()));
    }
    if vectors.is_empty() {
        return Err(Error::Invalid("no vectors to compare".into()));
    }
    let mut centroid = vec![0.0; memory.dim()];
    for k in &normal {
        centroid.iter_mut().zip(&k.vector).for_each(|(c, v)| *c += v / normal.len() as f64);
    }
    let sum: f64 = vectors.iter().map(|v| 1.0 - cosine_distance(v, &centroid)).sum();
    Ok(sum / vectors.len() as f64)
}

/// Embedding dump: one row per image with its split, class and vector.
pub fn embeddings_csv(vectors: &[ProjVector], split: Split, class_names: &[String]) -> String {
    let dim = vectors.first().map_or(0, |v| v.vector.len());
    let mut out = String::from("image_index,split,weather,class");
    for d in 0..dim {
        out.push_str(&format!(",q{d}"));
    }
    out.push('\n');
    for v in vectors {
        let name = class_names.get(v.weather).map_or("?", String::as_str);
        out.push_str(&format!("{},{},{},{}", v.image_index, split.name(), v.weather, name));
        for x in &v.vector {
            out.push_str(&format!(",{x:.8}"));
        }
        out.push('\n');
    }
    out
}

/// Reads an embedding dump back into vectors and weather labels.
pub fn read_embeddings(path: &Path) -> Result<Vec<ProjVector>> {
    let csv_err = |e| Error::Csv { path: path.to_path_buf(), source: e };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let bad = || Error::Invalid(format!("{}: malformed embedding row", path.display()));
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let image_index = record.get(0).and_then(|f| f.parse().ok()).ok_or_else(bad)?;
        let weather = record.get(2).and_then(|f| f.parse().ok()).ok_or_else(bad)?;
        let vector = record.iter().skip(4).map(|f| f.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        out.push(ProjVector::new(vector, image_index, weather));
    }
    Ok(out)
}
