//! Synthetic weather-imbalanced crowd scenes with head-point annotations,
//! and the on-disk dataset layout they are stored in.
//!
//! A dataset directory holds `manifest.json`, one PNG per image under
//! `images/` and one JSON point list per image under `annotations/`.
//! Every image derives its own seed from `(dataset seed, image_index)`, so
//! generation is reproducible image by image.

mod scene;
pub mod weather;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::seeding;

pub use weather::{apply_weather, Weather, NORMAL};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT: &str = "mqcl-dataset/1";

/// Smallest accepted image side; one 64 px crop must always fit.
pub const MIN_IMAGE_SIDE: usize = 64;

/// Weather mix of the imbalanced benchmark this generator imitates:
/// normal, haze, rain, snow.
pub const BENCHMARK_CLASS_MIX: [f64; 4] = [0.88, 0.04, 0.03, 0.05];

/// Head position in pixel coordinates, `(0, 0)` being the top-left corner
/// of the top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 2]", into = "[f32; 2]")]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl From<[f32; 2]> for Point {
    fn from([x, y]: [f32; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f32; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrowdSample {
    pub image: Image,
    pub points: Vec<Point>,
    pub weather: usize,
    pub image_index: u64,
}

impl CrowdSample {
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// Recipe for a synthetic dataset. `counts[c]` is the number of training
/// images of weather class `c`; `test_counts` likewise for the test split
/// (empty means no test split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    /// Inclusive range of heads per image.
    pub crowd_range: [usize; 2],
    /// Per-class `[lo, hi]` severity range; severity is drawn uniformly.
    pub severity: Vec<[f32; 2]>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            counts: vec![340, 20, 20, 20],
            test_counts: Vec::new(),
            image_size: [128, 128],
            crowd_range: [10, 40],
            severity: vec![[0.0, 0.0], [0.5, 1.0], [0.5, 1.0], [0.5, 1.0]],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Reads a spec from a TOML file holding either the spec's keys at top
    /// level or a full pipeline config with a `[data]` table.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let toml_err = |source| Error::Toml { path: path.to_path_buf(), source };
        let mut value: toml::Table = toml::from_str(&text).map_err(toml_err)?;
        let spec: Self = match value.remove("data") {
            Some(toml::Value::Table(data)) => data.try_into().map_err(toml_err)?,
            _ => toml::from_str(&text).map_err(toml_err)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Splits `total` images across classes following `mix`, using
    /// largest-remainder rounding so the counts sum to `total` exactly.
    pub fn with_class_mix(total: usize, mix: &[f64]) -> Self {
        let sum: f64 = mix.iter().sum();
        let exact: Vec<f64> = mix.iter().map(|m| m / sum * total as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..mix.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let missing = total - counts.iter().sum::<usize>();
        for &c in order.iter().take(missing) {
            counts[c] += 1;
        }
        let mut spec = Self { counts, ..Self::default() };
        spec.severity.resize(mix.len(), [0.5, 1.0]);
        spec.severity.truncate(mix.len());
        spec
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.num_classes();
        if !(2..=Weather::ALL.len()).contains(&b) {
            return Err(Error::Config(format!(
                "need between 2 and {} weather classes, got {b}",
                Weather::ALL.len()
            )));
        }
        if self.counts[NORMAL] == 0 {
            return Err(Error::Config("at least one normal-weather training image is required".into()));
        }
        if !self.test_counts.is_empty() && self.test_counts.len() != b {
            return Err(Error::Config(format!(
                "test_counts has {} classes, counts has {b}",
                self.test_counts.len()
            )));
        }
        let [h, w] = self.image_size;
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "image size {h}x{w} is below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum"
            )));
        }
        let [lo, hi] = self.crowd_range;
        if lo > hi {
            return Err(Error::Config(format!("empty crowd range [{lo}, {hi}]")));
        }
        if self.severity.len() != b {
            return Err(Error::Config(format!(
                "severity has {} ranges for {b} classes",
                self.severity.len()
            )));
        }
        for &[lo, hi] in &self.severity {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("severity range [{lo}, {hi}] not within [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Renders one scene. Deterministic in `(seed, spec, weather)`.
pub fn generate_scene(seed: u64, spec: &DatasetSpec, weather: usize, image_index: u64) -> Result<CrowdSample> {
    spec.validate()?;
    if weather >= spec.num_classes() {
        return Err(Error::UnknownWeather { class: weather, num_classes: spec.num_classes() });
    }
    let mut rng = seeding::rng(seed);
    let [h, w] = spec.image_size;
    let [lo, hi] = spec.crowd_range;
    let count = rng.random_range(lo..=hi);
    let mut image = scene::background(h, w, &mut rng);
    let points = scene::draw_heads(&mut image, count, &mut rng);
    let [slo, shi] = spec.severity[weather];
    let severity = if shi > slo { rng.random_range(slo..=shi) } else { slo };
    let image = apply_weather(&image, weather, severity, rng.random())?;
    Ok(CrowdSample { image, points, weather, image_index })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_index: u64,
    pub image: String,
    pub annotation: String,
    pub weather: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub image_size: [usize; 2],
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Images per class within `split`.
    pub fn histogram(&self, split: Split) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for e in self.entries.iter().filter(|e| e.split == split) {
            hist[e.weather] += 1;
        }
        hist
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Annotation {
    image_index: u64,
    weather: usize,
    points: Vec<Point>,
}

/// Generation plan: `(split, weather, image_index)` in index order.
fn plan(spec: &DatasetSpec) -> Vec<(Split, usize, u64)> {
    let mut out = Vec::new();
    let mut next = 0u64;
    for (split, counts) in [(Split::Train, &spec.counts), (Split::Test, &spec.test_counts)] {
        for (weather, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                out.push((split, weather, next));
                next += 1;
            }
        }
    }
    out
}

fn render(spec: &DatasetSpec, weather: usize, image_index: u64) -> Result<CrowdSample> {
    let mut sample = generate_scene(seeding::child_seed(spec.seed, image_index), spec, weather, image_index)?;
    // Round-trip through 8 bits so in-memory samples equal what loads from disk.
    let img = &sample.image;
    sample.image = Image::from_rgb8(img.height(), img.width(), &img.to_rgb8())?;
    Ok(sample)
}

/// An in-memory dataset split into train and test samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: Option<PathBuf>,
    pub manifest: Manifest,
    pub train: Vec<CrowdSample>,
    pub test: Vec<CrowdSample>,
}

impl Dataset {
    /// Renders every image without touching the filesystem. Pixel values are
    /// quantized exactly as [`generate_dataset`] stores them.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut entries = Vec::new();
        for (split, weather, index) in plan(spec) {
            let sample = render(spec, weather, index)?;
            entries.push(entry(index, weather, split));
            match split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        Ok(Self { root: None, manifest: manifest(spec, entries), train, test })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Invalid(format!(
                "{}: unsupported dataset format '{}'",
                path.display(),
                manifest.format
            )));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for e in &manifest.entries {
            if e.weather >= manifest.num_classes {
                return Err(Error::UnknownWeather { class: e.weather, num_classes: manifest.num_classes });
            }
            let image = load_png(&dir.join(&e.image))?;
            let ann_path = dir.join(&e.annotation);
            let text = fs::read_to_string(&ann_path).map_err(|err| Error::io(&ann_path, err))?;
            let ann: Annotation = serde_json::from_str(&text).map_err(|err| Error::json(&ann_path, err))?;
            let sample = CrowdSample { image, points: ann.points, weather: e.weather, image_index: e.image_index };
            match e.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        Ok(Self { root: Some(dir.to_path_buf()), manifest, train, test })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    pub fn split(&self, split: Split) -> &[CrowdSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn entry(image_index: u64, weather: usize, split: Split) -> ManifestEntry {
    ManifestEntry {
        image_index,
        image: format!("images/{image_index:06}.png"),
        annotation: format!("annotations/{image_index:06}.json"),
        weather,
        split,
    }
}

fn manifest(spec: &DatasetSpec, entries: Vec<ManifestEntry>) -> Manifest {
    Manifest {
        format: DATASET_FORMAT.to_string(),
        num_classes: spec.num_classes(),
        class_names: (0..spec.num_classes()).map(|c| Weather::ALL[c].name().to_string()).collect(),
        image_size: spec.image_size,
        seed: spec.seed,
        entries,
    }
}

/// Writes the dataset under `out` and returns its manifest.
pub fn generate_dataset(spec: &DatasetSpec, out: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out = out.as_ref();
    for sub in ["images", "annotations"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::new();
    for (split, weather, index) in plan(spec) {
        let sample = render(spec, weather, index)?;
        let e = entry(index, weather, split);
        save_png(&sample.image, &out.join(&e.image))?;
        let ann = Annotation { image_index: index, weather, points: sample.points };
        write_json(&out.join(&e.annotation), &ann)?;
        entries.push(e);
    }
    let manifest = manifest(spec, entries);
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    Image::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}
