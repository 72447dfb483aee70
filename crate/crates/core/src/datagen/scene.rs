use rand::Rng;

use crate::imaging::Image;

use super::Point;

/// Smooth value noise in `[0, 1]`, two octaves.
fn value_noise(height: usize, width: usize, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; height * width];
    for (cell, weight) in [(24usize, 0.65f32), (8, 0.35)] {
        let gh = height / cell + 2;
        let gw = width / cell + 2;
        let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
        for y in 0..height {
            let fy = y as f32 / cell as f32;
            let (iy, ty) = (fy as usize, smoothstep(fy.fract()));
            for x in 0..width {
                let fx = x as f32 / cell as f32;
                let (ix, tx) = (fx as usize, smoothstep(fx.fract()));
                let at = |r: usize, c: usize| lattice[r * gw + c];
                let top = at(iy, ix) + (at(iy, ix + 1) - at(iy, ix)) * tx;
                let bottom = at(iy + 1, ix) + (at(iy + 1, ix + 1) - at(iy + 1, ix)) * tx;
                out[y * width + x] += weight * (top + (bottom - top) * ty);
            }
        }
    }
    out
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Textured ground plane: a mid-tone with a slight tint, modulated by value
/// noise. Tone and tint vary only a little between images so that weather
/// stays the dominant global difference.
pub(super) fn background(height: usize, width: usize, rng: &mut impl Rng) -> Image {
    let tone = rng.random_range(0.52..0.6);
    let base: [f32; 3] = [
        tone + rng.random_range(-0.02..0.02),
        tone + rng.random_range(-0.02..0.02),
        tone - 0.03 + rng.random_range(-0.02..0.02),
    ];
    let texture = rng.random_range(0.15..0.19);
    let noise = value_noise(height, width, rng);
    let mut img = Image::new(height, width);
    for y in 0..height {
        for x in 0..width {
            let n = (noise[y * width + x] - 0.5) * 2.0 * texture;
            img.set_pixel(y, x, base.map(|c| (c + n).clamp(0.0, 1.0)));
        }
    }
    img
}

/// Draws `count` head-like blobs and returns their centers.
pub(super) fn draw_heads(img: &mut Image, count: usize, rng: &mut impl Rng) -> Vec<Point> {
    let (h, w) = (img.height() as f32, img.width() as f32);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let cx = rng.random_range(1.0..w - 1.0);
        let cy = rng.random_range(1.0..h - 1.0);
        let radius: f32 = rng.random_range(3.0..6.0);
        let tone: f32 = rng.random_range(0.05..0.25);
        let color = [tone + 0.05, tone + 0.02, tone];
        splat(img, cx, cy, radius / 2.0, color, 0.95);
        points.push(Point { x: cx, y: cy });
    }
    points
}

/// Gaussian-profile disc blended into `img`.
fn splat(img: &mut Image, cx: f32, cy: f32, sigma: f32, color: [f32; 3], peak: f32) {
    let reach = (2.5 * sigma).ceil() as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    for oy in -reach..=reach {
        for ox in -reach..=reach {
            let (x, y) = (cx as isize + ox, cy as isize + oy);
            if x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
            let alpha = peak * (-d2 / (2.0 * sigma * sigma)).exp();
            img.blend_pixel(y as usize, x as usize, color, alpha);
        }
    }
}
