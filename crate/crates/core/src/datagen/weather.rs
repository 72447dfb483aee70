//! Synthetic weather corruptions. None of these aim for photorealism; each
//! one degrades a different cue the counting head relies on (contrast for
//! haze, thin bright edges for rain, small bright blobs for snow).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::seeding;

/// Class id of the normal-weather domain. Every dataset has it.
pub const NORMAL: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Normal = 0,
    Haze = 1,
    Rain = 2,
    Snow = 3,
}

impl Weather {
    pub const ALL: [Weather; 4] = [Weather::Normal, Weather::Haze, Weather::Rain, Weather::Snow];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or(Error::UnknownWeather { class: id, num_classes: Self::ALL.len() })
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Weather::Normal => "normal",
            Weather::Haze => "haze",
            Weather::Rain => "rain",
            Weather::Snow => "snow",
        }
    }
}

/// Applies the corruption for class `weather` at `severity` in `[0, 1]`.
///
/// Zero severity and the normal class both return the input unchanged. The
/// `seed` drives streak and flake placement.
pub fn apply_weather(image: &Image, weather: usize, severity: f32, seed: u64) -> Result<Image> {
    let kind = Weather::from_id(weather)?;
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Invalid(format!("severity {severity} outside [0, 1]")));
    }
    if kind == Weather::Normal || severity == 0.0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    let mut rng = seeding::rng(seed);
    match kind {
        Weather::Normal => unreachable!(),
        Weather::Haze => haze(&mut out, severity),
        Weather::Rain => rain(&mut out, severity, &mut rng),
        Weather::Snow => snow(&mut out, severity, &mut rng),
    }
    out.clamp_unit();
    Ok(out)
}

const HAZE_GRAY: f32 = 0.78;

fn haze(img: &mut Image, severity: f32) {
    let mean = img.data().iter().sum::<f32>() / img.data().len() as f32;
    let contrast = 1.0 - 0.55 * severity;
    let alpha = 0.6 * severity;
    for v in img.data_mut() {
        let squashed = mean + (*v - mean) * contrast;
        *v = squashed + (HAZE_GRAY - squashed) * alpha;
    }
}

fn rain(img: &mut Image, severity: f32, rng: &mut impl Rng) {
    let (h, w) = (img.height(), img.width());
    let streaks = ((h * w) as f32 * severity / 30.0).round() as usize;
    // One dominant wind direction per image.
    let angle: f32 = rng.random_range(-0.35..0.35);
    let (dx, dy) = (angle.sin(), angle.cos());
    let alpha = 0.25 + 0.45 * severity;
    for _ in 0..streaks {
        let x0: f32 = rng.random_range(0.0..w as f32);
        let y0: f32 = rng.random_range(0.0..h as f32);
        let len: f32 = rng.random_range(6.0..16.0);
        let shade: f32 = rng.random_range(0.8..0.95);
        let mut t = 0.0;
        while t < len {
            let (x, y) = (x0 + dx * t, y0 + dy * t);
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                img.blend_pixel(y as usize, x as usize, [shade, shade, shade + 0.03], alpha);
            }
            t += 1.0;
        }
    }
    let dim = 0.12 * severity;
    for v in img.data_mut() {
        *v *= 1.0 - dim;
    }
}

fn snow(img: &mut Image, severity: f32, rng: &mut impl Rng) {
    let (h, w) = (img.height(), img.width());
    let flakes = ((h * w) as f32 * severity / 45.0).round() as usize;
    for _ in 0..flakes {
        let cx: f32 = rng.random_range(0.0..w as f32);
        let cy: f32 = rng.random_range(0.0..h as f32);
        let r: f32 = rng.random_range(0.7..2.2);
        let peak: f32 = rng.random_range(0.7..1.0);
        let reach = (2.0 * r).ceil() as isize;
        for oy in -reach..=reach {
            for ox in -reach..=reach {
                let (x, y) = (cx as isize + ox, cy as isize + oy);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
                let a = peak * (-d2 / (2.0 * r * r)).exp();
                img.blend_pixel(y as usize, x as usize, [0.97, 0.97, 1.0], a);
            }
        }
    }
    let lift = 0.15 * severity;
    for v in img.data_mut() {
        *v += (1.0 - *v) * lift;
    }
}
