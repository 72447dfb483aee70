//! The trainable blocks: query/key encoders, projection heads, refiner and
//! counting head, plus the momentum update that ties the key branch to the
//! query branch.

pub mod nets;
pub mod params;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::seeding;

pub use nets::{DensityHead, Encoder, ProjectionHead, Refiner};
pub use params::{ParamBuilder, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Total encoder downsampling; a multiple of 8 (stem patch times three
    /// 2x merges).
    pub stride: usize,
    /// Representation channels.
    pub c1: usize,
    /// Projected vector dimension.
    pub c2: usize,
    pub proj_hidden: usize,
    pub refiner_depth: usize,
    /// Key-branch momentum.
    pub momentum: f64,
    /// Density upsampling relative to the representation grid; power of two.
    pub head_upsample: usize,
    pub encoder_blocks: usize,
    pub block_expansion: usize,
    /// Adds a 3x3 convolution in front of every block's MLP.
    pub spatial_mixing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stride: 32,
            c1: 192,
            c2: 128,
            proj_hidden: 2048,
            refiner_depth: 3,
            momentum: 0.999,
            head_upsample: 4,
            encoder_blocks: 1,
            block_expansion: 4,
            spatial_mixing: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stride", self.stride),
            ("c1", self.c1),
            ("c2", self.c2),
            ("proj_hidden", self.proj_hidden),
            ("head_upsample", self.head_upsample),
            ("encoder_blocks", self.encoder_blocks),
            ("block_expansion", self.block_expansion),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.stride % 8 != 0 {
            return Err(Error::Config(format!("model.stride {} is not a multiple of 8", self.stride)));
        }
        if self.c1 % 8 != 0 {
            return Err(Error::Config(format!("model.c1 {} is not a multiple of 8", self.c1)));
        }
        if !self.head_upsample.is_power_of_two() || self.head_upsample < 2 {
            return Err(Error::Config(format!("model.head_upsample {} must be a power of two >= 2", self.head_upsample)));
        }
        if self.stride % self.head_upsample != 0 {
            return Err(Error::Config(format!(
                "model.stride {} is not divisible by head_upsample {}",
                self.stride, self.head_upsample
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("model.momentum {} outside [0, 1]", self.momentum)));
        }
        Ok(())
    }

    /// Channel widths of the four encoder stages.
    pub fn stage_widths(&self) -> [usize; 4] {
        [self.c1 / 8, self.c1 / 4, self.c1 / 2, self.c1]
    }

    /// Input pixels per density cell along each axis.
    pub fn density_cell(&self) -> usize {
        self.stride / self.head_upsample
    }
}

/// A projected vector tagged with its source image and weather class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjVector {
    pub vector: Vec<f64>,
    pub image_index: u64,
    pub weather: usize,
}

impl ProjVector {
    pub fn new(vector: Vec<f64>, image_index: u64, weather: usize) -> Self {
        Self { vector, image_index, weather }
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Nonnegative density grid; its sum is the predicted count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} density map", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(Error::Shape(format!(
                "cannot crop {}x{} density to {height}x{width}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            data.extend_from_slice(&self.data[y * self.width..y * self.width + width]);
        }
        Ok(Self { height, width, data })
    }

    /// Splits an `(N, h, w)` tensor into per-image maps.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let (_, h, w) = t.dims3()?;
        let rows: Vec<Vec<Vec<f64>>> = t.to_dtype(DType::F64)?.to_vec3()?;
        Ok(rows.into_iter().map(|m| Self { height: h, width: w, data: m.concat() }).collect())
    }
}

/// Stacks equally-sized images into an `(N, H, W, 3)` tensor.
pub fn images_to_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height(),
                img.width()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), device)?)
}

/// One encoder with its projection head; the unit that the momentum update
/// acts on.
pub struct Branch {
    pub encoder: Encoder,
    pub projection: ProjectionHead,
    pub encoder_params: ParamSet,
    pub projection_params: ParamSet,
}

impl Branch {
    fn new(config: &ModelConfig, rng: &mut rand_chacha::ChaCha8Rng, device: &Device) -> Result<Self> {
        let mut pb = ParamBuilder::new(rng, device);
        let encoder = Encoder::new(&mut pb, config)?;
        let encoder_params = pb.finish();
        let mut pb = ParamBuilder::new(rng, device);
        let projection = ProjectionHead::new(&mut pb, config)?;
        let projection_params = pb.finish();
        Ok(Self { encoder, projection, encoder_params, projection_params })
    }

    /// Representation and its unit-norm projection.
    pub fn forward(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let r = self.encoder.forward(images)?;
        let q = self.projection.forward(&r)?;
        Ok((r, q))
    }

    pub fn copy_from(&self, other: &Branch) -> Result<()> {
        self.encoder_params.copy_from(&other.encoder_params)?;
        self.projection_params.copy_from(&other.projection_params)
    }
}

pub struct Component<T> {
    pub module: T,
    pub params: ParamSet,
}

/// Every network of the pipeline. The key branch exists only until the
/// refinement stage; the refiner only from then on.
pub struct MqclModel {
    pub config: ModelConfig,
    pub device: Device,
    pub query: Branch,
    pub key: Option<Branch>,
    pub head: Component<DensityHead>,
    pub refiner: Option<Component<Refiner>>,
}

impl MqclModel {
    /// Fresh model for contrastive training; the key branch starts as an
    /// exact copy of the query branch.
    pub fn new(config: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng(seed);
        let query = Branch::new(config, &mut rng, device)?;
        let key = Branch::new(config, &mut rng, device)?;
        key.copy_from(&query)?;
        let mut pb = ParamBuilder::new(&mut rng, device);
        let head = DensityHead::new(&mut pb, config)?;
        let head = Component { module: head, params: pb.finish() };
        Ok(Self { config: config.clone(), device: device.clone(), query, key: Some(key), head, refiner: None })
    }

    /// Adds a freshly initialized refiner.
    pub fn attach_refiner(&mut self, seed: u64) -> Result<()> {
        let mut rng = seeding::rng(seed);
        let mut pb = ParamBuilder::new(&mut rng, &self.device);
        let refiner = Refiner::new(&mut pb, &self.config)?;
        self.refiner = Some(Component { module: refiner, params: pb.finish() });
        Ok(())
    }

    pub fn drop_key_branch(&mut self) {
        self.key = None;
    }

    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.query.encoder.forward(images)
    }

    pub fn project(&self, representation: &Tensor) -> Result<Tensor> {
        self.query.projection.forward(representation)
    }

    pub fn refine(&self, representation: &Tensor) -> Result<Tensor> {
        match &self.refiner {
            Some(r) => r.module.forward(representation),
            None => Err(Error::Invalid("model has no refiner".into())),
        }
    }

    pub fn predict_density(&self, representation: &Tensor) -> Result<Tensor> {
        self.head.module.forward(representation)
    }

    /// Encoder output, passed through the refiner when one is attached.
    pub fn representation(&self, images: &Tensor) -> Result<Tensor> {
        let r = self.encode(images)?;
        match &self.refiner {
            Some(refiner) => refiner.module.forward(&r),
            None => Ok(r),
        }
    }

    /// Inference path: encode, refine if available, predict density.
    pub fn infer_density(&self, images: &Tensor) -> Result<Vec<DensityMap>> {
        DensityMap::from_batch(&self.predict_density(&self.representation(images)?)?)
    }

    /// Unit-norm embeddings of `images` (refined when a refiner exists).
    pub fn embed(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        params::to_f64_rows(&self.project(&self.representation(images)?)?)
    }

    /// Moves the key branch toward the query branch.
    pub fn momentum_step(&self, m: f64) -> Result<()> {
        let key = self.key.as_ref().ok_or_else(|| Error::Invalid("model has no key branch".into()))?;
        momentum_update(&key.encoder_params, &self.query.encoder_params, m)?;
        momentum_update(&key.projection_params, &self.query.projection_params, m)
    }
}

/// `target <- m * target + (1 - m) * source`, parameter by parameter.
pub fn momentum_update(target: &ParamSet, source: &ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Invalid(format!("momentum {m} outside [0, 1]")));
    }
    target.check_same_structure(source)?;
    if m == 1.0 {
        return Ok(());
    }
    if m == 0.0 {
        return target.copy_from(source);
    }
    for (name, var) in target.iter() {
        let src = source.get(name).expect("structure checked").as_tensor();
        let blended = (var.as_tensor().affine(m, 0.0)? + src.affine(1.0 - m, 0.0)?)?;
        var.set(&blended)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { c1: 32, c2: 16, proj_hidden: 32, refiner_depth: 2, ..ModelConfig::default() }
    }

    fn batch(n: usize, side: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = seeding::rng(seed);
        let data: Vec<f32> = (0..n * side * side * 3).map(|_| rng.random()).collect();
        Tensor::from_vec(data, (n, side, side, 3), &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn encoder_shape_arithmetic() {
        let model = MqclModel::new(&tiny(), 0, &Device::Cpu).unwrap();
        assert_eq!(model.encode(&batch(1, 256, 0)).unwrap().dims(), &[1, 8, 8, 32]);
        assert_eq!(model.encode(&batch(2, 128, 0)).unwrap().dims(), &[2, 4, 4, 32]);
        assert!(matches!(model.encode(&batch(1, 100, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn projections_are_unit_norm_and_deterministic() {
        let model = MqclModel::new(&tiny(), 1, &Device::Cpu).unwrap();
        let r = model.encode(&batch(3, 64, 2)).unwrap();
        let a = model.embed(&batch(3, 64, 2)).unwrap();
        for v in &a {
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "norm {n}");
        }
        let twice = params::to_f64_rows(&model.project(&r).unwrap()).unwrap();
        assert_eq!(a, twice);
    }

    #[test]
    fn zero_representation_projects_to_finite_vector() {
        let model = MqclModel::new(&tiny(), 1, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros((1, 2, 2, 32), DType::F32, &Device::Cpu).unwrap();
        let v = params::to_f64_rows(&model.project(&zeros).unwrap()).unwrap();
        assert!(v[0].iter().all(|x| x.is_finite()));
    }

    #[test]
    fn fresh_refiner_is_identity_and_shape_preserving() {
        let mut model = MqclModel::new(&tiny(), 3, &Device::Cpu).unwrap();
        model.attach_refiner(4).unwrap();
        let r = model.encode(&batch(2, 128, 5)).unwrap();
        let refined = model.refine(&r).unwrap();
        assert_eq!(refined.dims(), r.dims());
        assert_eq!(max_abs_diff(&refined, &r), 0.0);
        let wrong = Tensor::zeros((1, 4, 4, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(model.refine(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn density_head_upsamples_by_four_and_is_nonnegative() {
        let model = MqclModel::new(&tiny(), 6, &Device::Cpu).unwrap();
        let r = model.encode(&batch(2, 256, 7)).unwrap();
        let d = model.predict_density(&r).unwrap();
        assert_eq!(d.dims(), &[2, 32, 32]);
        let maps = DensityMap::from_batch(&d).unwrap();
        assert!(maps.iter().all(|m| m.data.iter().all(|&v| v >= 0.0)));
        let total: f32 = d.get(0).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!((maps[0].sum() - total as f64).abs() < 1e-3);
    }

    #[test]
    fn key_branch_starts_as_copy() {
        let model = MqclModel::new(&tiny(), 8, &Device::Cpu).unwrap();
        let x = batch(2, 64, 9);
        let (_, q) = model.query.forward(&x).unwrap();
        let (_, k) = model.key.as_ref().unwrap().forward(&x).unwrap();
        assert_eq!(max_abs_diff(&q, &k), 0.0);
    }

    fn scalar_set(value: f32, seed: u64) -> ParamSet {
        let mut rng = seeding::rng(seed);
        let mut pb = ParamBuilder::new(&mut rng, &Device::Cpu);
        pb.constant("w", &[1], value).unwrap();
        pb.finish()
    }

    fn scalar(set: &ParamSet) -> f32 {
        set.get("w").unwrap().as_tensor().to_vec1::<f32>().unwrap()[0]
    }

    #[test]
    fn momentum_update_arithmetic_and_boundaries() {
        let (k, q) = (scalar_set(1.0, 0), scalar_set(0.0, 0));
        momentum_update(&k, &q, 0.999).unwrap();
        assert!((scalar(&k) - 0.999).abs() < 1e-7);

        let (k, q) = (scalar_set(0.3, 0), scalar_set(-2.5, 0));
        momentum_update(&k, &q, 1.0).unwrap();
        assert_eq!(scalar(&k), 0.3);
        momentum_update(&k, &q, 0.0).unwrap();
        assert_eq!(scalar(&k), -2.5);
    }

    #[test]
    fn momentum_update_rejects_mismatched_structure() {
        let mut rng = seeding::rng(0);
        let mut pb = ParamBuilder::new(&mut rng, &Device::Cpu);
        pb.constant("other", &[1], 0.0).unwrap();
        let other = pb.finish();
        assert!(matches!(momentum_update(&scalar_set(1.0, 0), &other, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = MqclModel::new(&tiny(), 11, &Device::Cpu).unwrap();
        let b = MqclModel::new(&tiny(), 11, &Device::Cpu).unwrap();
        let ta = a.query.encoder_params.tensors().unwrap();
        let tb = b.query.encoder_params.tensors().unwrap();
        for (name, t) in &ta {
            assert_eq!(max_abs_diff(t, &tb[name]), 0.0, "{name}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { stride: 20, ..tiny() }.validate().is_err());
        assert!(ModelConfig { head_upsample: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { stride: 8, head_upsample: 16, ..tiny() }.validate().is_err());
        assert!(ModelConfig { c2: 0, ..tiny() }.validate().is_err());
    }
}
