use rand::Rng;

use crate::datagen::{CrowdSample, Point};
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Placement of one square crop and whether it is mirrored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

impl CropParams {
    pub fn sample(height: usize, width: usize, size: usize, flip_prob: f64, rng: &mut impl Rng) -> Result<Self> {
        if height < size || width < size {
            return Err(Error::Shape(format!("{height}x{width} image is smaller than crop {size}")));
        }
        Ok(Self {
            top: rng.random_range(0..=height - size),
            left: rng.random_range(0..=width - size),
            size,
            flip: flip_prob > 0.0 && rng.random_bool(flip_prob),
        })
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        let view = image.crop(self.top, self.left, self.size, self.size)?;
        Ok(if self.flip { view.flip_horizontal() } else { view })
    }

    /// Maps points into view coordinates; points outside the crop are dropped.
    pub fn map_points(&self, points: &[Point]) -> Vec<Point> {
        let (top, left, size) = (self.top as f32, self.left as f32, self.size as f32);
        points
            .iter()
            .filter(|p| p.x >= left && p.x < left + size && p.y >= top && p.y < top + size)
            .map(|p| {
                let x = p.x - left;
                Point { x: if self.flip { size - x } else { x }, y: p.y - top }
            })
            .collect()
    }
}

/// One augmented view of a sample with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Image,
    pub points: Vec<Point>,
    pub image_index: u64,
    pub weather: usize,
}

pub fn augment_view(sample: &CrowdSample, crop: CropParams) -> Result<View> {
    Ok(View {
        image: crop.apply(&sample.image)?,
        points: crop.map_points(&sample.points),
        image_index: sample.image_index,
        weather: sample.weather,
    })
}

/// Query and key views of one image from independent crops and flips.
/// Only the query view's points are kept for the count loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub query: View,
    pub key: Image,
}

pub fn augment_pair(sample: &CrowdSample, size: usize, flip_prob: f64, rng: &mut impl Rng) -> Result<AugmentedPair> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let q = CropParams::sample(h, w, size, flip_prob, rng)?;
    let k = CropParams::sample(h, w, size, flip_prob, rng)?;
    Ok(AugmentedPair { query: augment_view(sample, q)?, key: k.apply(&sample.image)? })
}
