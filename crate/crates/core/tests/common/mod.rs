//! Reference implementations used as test oracles. Each one is written the
//! slow, literal way and shares no code with the library path it checks.
#![allow(dead_code)]

use mqcl::model::ProjVector;
use mqcl::multiqueue::{KeyMemory, MultiQueue};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Literal double loop: mean over anchors of
/// `-1/|P| sum_p log(exp(q.k_p/t) / sum_a exp(q.k_a/t))`.
pub fn naive_contrastive(anchors: &[Vec<f64>], keys: &[Vec<f64>], positives: &[Vec<usize>], t: f64) -> f64 {
    let mut total = 0.0;
    for (q, pos) in anchors.iter().zip(positives) {
        let mut denom = 0.0;
        for k in keys {
            let mut s = 0.0;
            for d in 0..q.len() {
                s += q[d] * k[d];
            }
            denom += (s / t).exp();
        }
        let mut acc = 0.0;
        for &p in pos {
            let mut s = 0.0;
            for d in 0..q.len() {
                s += q[d] * keys[p][d];
            }
            acc += ((s / t).exp() / denom).ln();
        }
        total += -acc / pos.len() as f64;
    }
    total / anchors.len() as f64
}

/// Literal count loss: posterior by explicit normalization, then
/// `sum_n |1 - sum_x p(n|x) D(x)|`.
pub fn naive_bayesian(h: usize, w: usize, density: &[f64], points: &[[f64; 2]], sigma: f64) -> f64 {
    if points.is_empty() {
        return density.iter().sum::<f64>().abs();
    }
    let mut loss = 0.0;
    for n in 0..points.len() {
        let mut expected = 0.0;
        for i in 0..h {
            for j in 0..w {
                let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
                let g = |p: &[f64; 2]| (-((cx - p[0]).powi(2) + (cy - p[1]).powi(2)) / (2.0 * sigma * sigma)).exp();
                let z: f64 = points.iter().map(g).sum();
                expected += g(&points[n]) / z * density[i * w + j];
            }
        }
        loss += (1.0 - expected).abs();
    }
    loss
}

/// Central finite differences of `f` at `x`.
pub fn finite_diff(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * step);
    }
    g
}

/// `max |a - b| / max(max |a|, 1e-8)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().map(|x| x.abs()).fold(1e-8, f64::max);
    diff / scale
}

/// Textbook silhouette with cosine distance; singleton clusters score 0.
pub fn brute_silhouette(vectors: &[Vec<f64>], labels: &[usize]) -> f64 {
    let cos_dist = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        1.0 - dot / (na * nb)
    };
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let mut total = 0.0;
    for i in 0..vectors.len() {
        let mut own = (0.0, 0usize);
        let mut others = vec![(0.0, 0usize); classes.len()];
        for j in 0..vectors.len() {
            if i == j {
                continue;
            }
            let d = cos_dist(&vectors[i], &vectors[j]);
            if labels[j] == labels[i] {
                own.0 += d;
                own.1 += 1;
            } else {
                let c = classes.iter().position(|&c| c == labels[j]).unwrap();
                others[c].0 += d;
                others[c].1 += 1;
            }
        }
        if own.1 == 0 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = others.iter().filter(|o| o.1 > 0).map(|o| o.0 / o.1 as f64).fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / vectors.len() as f64
}

/// Plain-list model of a per-class FIFO memory. Entries are
/// `(image_index, class, serial)`.
#[derive(Debug, Clone, Default)]
pub struct ListQueueModel {
    pub lists: Vec<Vec<(u64, usize, u64)>>,
    pub capacity: usize,
}

impl ListQueueModel {
    pub fn new(classes: usize, capacity: usize) -> Self {
        Self { lists: vec![Vec::new(); classes], capacity }
    }

    pub fn push(&mut self, image: u64, class: usize, serial: u64) {
        let list = &mut self.lists[class];
        list.push((image, class, serial));
        if list.len() > self.capacity {
            list.remove(0);
        }
    }

    pub fn all(&self) -> Vec<(u64, usize, u64)> {
        self.lists.concat()
    }

    pub fn positives(&self, image: u64) -> Vec<(u64, usize, u64)> {
        self.all().into_iter().filter(|e| e.0 == image).collect()
    }
}

/// Unit 2-vector that encodes a push serial number.
pub fn serial_vector(serial: u64) -> Vec<f64> {
    let angle = serial as f64 * 1e-3;
    vec![angle.cos(), angle.sin()]
}

fn decode(keys: Vec<&ProjVector>) -> Vec<(u64, usize, u64)> {
    keys.iter()
        .map(|k| (k.image_index, k.weather, (k.vector[1].atan2(k.vector[0]) * 1e3).round() as u64))
        .collect()
}

/// Runs one random push/lookup sequence against both the real multi-queue
/// and [`ListQueueModel`], returning the first disagreement.
pub fn queue_sequence_check(seed: u64) -> Result<(), String> {
    let mut rng = rng(seed);
    let classes = rng.random_range(2..=5usize);
    let capacity = rng.random_range(1..=8usize);
    let ops = rng.random_range(1..=250usize);
    let images = rng.random_range(1..=30u64);
    // Heavily skewed toward class 0, like the weather mix.
    let mut weights: Vec<f64> = (0..classes).map(|c| if c == 0 { 8.0 } else { rng.random_range(0.2..1.5) }).collect();
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    let mut queue = MultiQueue::new(classes, capacity, 2).map_err(|e| e.to_string())?;
    let mut reference = ListQueueModel::new(classes, capacity);
    let mut pushed = vec![0usize; classes];
    for serial in 0..ops as u64 {
        let mut u: f64 = rng.random();
        let class = weights.iter().position(|w| { u -= w; u < 0.0 }).unwrap_or(classes - 1);
        let image = rng.random_range(0..images);
        queue.push(ProjVector::new(serial_vector(serial), image, class)).map_err(|e| e.to_string())?;
        reference.push(image, class, serial);
        pushed[class] += 1;

        if decode(queue.all()) != reference.all() {
            return Err(format!("seed {seed}: contents differ after push {serial}"));
        }
        let probe = rng.random_range(0..images);
        if decode(queue.positives(probe)) != reference.positives(probe) {
            return Err(format!("seed {seed}: positives of image {probe} differ"));
        }
        let c = rng.random_range(0..classes);
        let class_keys = decode(queue.class(c).map_err(|e| e.to_string())?);
        if class_keys != reference.lists[c] {
            return Err(format!("seed {seed}: class {c} lookup differs"));
        }
        let fills = queue.fill_counts();
        for (c, (&fill, &n)) in fills.iter().zip(&pushed).enumerate() {
            if fill != n.min(capacity) {
                return Err(format!("seed {seed}: class {c} holds {fill} keys after {n} pushes"));
            }
        }
    }
    // Balance: top every class up to capacity and check the counts are equal.
    for (c, &n) in pushed.clone().iter().enumerate() {
        for extra in n..capacity {
            let serial = (ops + c * capacity + extra) as u64;
            queue.push(ProjVector::new(serial_vector(serial), 0, c)).map_err(|e| e.to_string())?;
        }
    }
    if queue.fill_counts().iter().any(|&f| f != capacity) {
        return Err(format!("seed {seed}: unequal fill {:?} after {capacity} pushes per class", queue.fill_counts()));
    }
    if queue.class(classes).is_ok() {
        return Err(format!("seed {seed}: lookup of class {classes} should fail"));
    }
    Ok(())
}

/// Estimator stub whose predicted count is `scale * red(0, 0)`, spread
/// evenly over the density cells.
pub struct UniformStub {
    pub multiple: usize,
    pub cell: usize,
    pub scale: f64,
}

impl mqcl::eval::DensityEstimator for UniformStub {
    fn input_multiple(&self) -> usize {
        self.multiple
    }

    fn cell(&self) -> usize {
        self.cell
    }

    fn density(&self, image: &mqcl::imaging::Image) -> mqcl::Result<mqcl::model::DensityMap> {
        let (h, w) = (image.height() / self.cell, image.width() / self.cell);
        let mass = self.scale * image.pixel(0, 0)[0] as f64;
        mqcl::model::DensityMap::from_vec(h, w, vec![mass / (h * w) as f64; h * w])
    }
}

/// Estimator stub that puts one unit in every cell whose top-left pixel is
/// marked (red channel above 0.9).
pub struct MarkStub {
    pub multiple: usize,
    pub cell: usize,
}

impl mqcl::eval::DensityEstimator for MarkStub {
    fn input_multiple(&self) -> usize {
        self.multiple
    }

    fn cell(&self) -> usize {
        self.cell
    }

    fn density(&self, image: &mqcl::imaging::Image) -> mqcl::Result<mqcl::model::DensityMap> {
        let (h, w) = (image.height() / self.cell, image.width() / self.cell);
        let data = (0..h * w)
            .map(|k| f64::from(u8::from(image.pixel(k / w * self.cell, k % w * self.cell)[0] > 0.9)))
            .collect();
        mqcl::model::DensityMap::from_vec(h, w, data)
    }
}

/// A sample whose image is filled with `red` and which carries `count` points.
pub fn flat_sample(image_index: u64, weather: usize, red: f32, count: usize) -> mqcl::datagen::CrowdSample {
    mqcl::datagen::CrowdSample {
        image: mqcl::imaging::Image::filled(64, 64, [red, 0.5, 0.5]),
        points: (0..count).map(|i| mqcl::datagen::Point { x: 1.0 + i as f32 % 60.0, y: 2.0 }).collect(),
        weather,
        image_index,
    }
}
