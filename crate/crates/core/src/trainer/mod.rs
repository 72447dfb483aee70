//! The two training stages.
//!
//! Representation learning trains the query encoder, its projection head and
//! the counting head on the queue loss plus the count loss, while the key
//! branch trails the query branch by momentum and feeds the key memory.
//! Refinement then freezes the encoder, projection head and memory, and
//! trains a refiner (and by default the counting head) so that projections
//! of refined representations land among the normal-weather keys.
//!
//! Losses are evaluated outside the autograd graph (see [`crate::losses`]);
//! each step backpropagates the surrogate `<Q, dL/dQ> + lambda <D, dL/dD>`,
//! whose parameter gradient equals that of the true objective.

mod augment;
mod checkpoint;
mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{CrowdSample, NORMAL};
use crate::error::{Error, Result};
use crate::losses::{self, Reduction};
use crate::model::params::{inner, to_f64_rows};
use crate::model::{images_to_tensor, DensityMap, MqclModel, ProjVector};
use crate::multiqueue::{KeyMemory, KeyStore};
use crate::seeding;

pub use augment::{augment_pair, augment_view, AugmentedPair, CropParams, View};
pub use checkpoint::{Checkpoint, Stage, CHECKPOINT_FORMAT};
pub use config::{OptimizerKind, PipelineConfig, ScheduleKind, TrainConfig};

/// Cosine-annealed learning rate, `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn lr_at(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

fn scheduled_lr(config: &TrainConfig, step: usize, total: usize) -> f64 {
    match config.schedule {
        ScheduleKind::Cosine => lr_at(step, total, config.lr),
        ScheduleKind::Constant => config.lr,
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: String,
    pub contra: f64,
    pub bayesian: f64,
    pub total: f64,
    pub lr: f64,
}

/// Collects log records and optionally streams them as JSON lines.
#[derive(Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    sink: Option<(std::path::PathBuf, BufWriter<File>)>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { records: Vec::new(), sink: Some((path.to_path_buf(), BufWriter::new(file))) })
    }

    fn record(&mut self, rec: LogRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log::debug!("{} step {}: total {:.4} (contra {:.4}, count {:.4})", rec.stage, rec.step, rec.total, rec.contra, rec.bayesian);
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub contra: f64,
    pub bayesian: f64,
    pub total: f64,
}

fn grid_points(points: &[crate::datagen::Point], cell: usize) -> Vec<[f64; 2]> {
    let c = cell as f64;
    points.iter().map(|p| [p.x as f64 / c, p.y as f64 / c]).collect()
}

fn grad_tensor(rows: &[Vec<f64>], like: &Tensor) -> Result<Tensor> {
    let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    Ok(Tensor::from_vec(flat, like.dims(), like.device())?)
}

/// Count-loss surrogate for a batch of density predictions.
fn count_surrogate(
    density: &Tensor,
    points: &[Vec<[f64; 2]>],
    config: &PipelineConfig,
) -> Result<(Tensor, f64)> {
    let maps = DensityMap::from_batch(density)?;
    let (loss, grads) = losses::bayesian_batch(&maps, points, config.loss.sigma_bl, config.loss.loss_reduction)?;
    Ok((inner(density, &grad_tensor(&grads, density)?)?, loss))
}

/// Surrogate objective for one representation-learning batch. With the
/// contrastive term enabled, the batch's keys are pushed into `memory`
/// before the loss is evaluated, so every anchor has its twin as a
/// positive.
pub fn wrl_objective(
    model: &MqclModel,
    memory: &mut KeyStore,
    pairs: &[AugmentedPair],
    config: &PipelineConfig,
) -> Result<(Tensor, StepStats)> {
    let queries: Vec<_> = pairs.iter().map(|p| &p.query.image).collect();
    let xq = images_to_tensor(&queries, &model.device)?;
    let (rq, q) = model.query.forward(&xq)?;
    let density = model.predict_density(&rq)?;
    let cell = model.config.density_cell();
    let points: Vec<_> = pairs.iter().map(|p| grid_points(&p.query.points, cell)).collect();
    let (count_term, bayesian) = count_surrogate(&density, &points, config)?;
    let lambda1 = config.loss.lambda1;

    if !config.train.contrastive {
        let surrogate = count_term.affine(lambda1, 0.0)?;
        return Ok((surrogate, StepStats { contra: 0.0, bayesian, total: losses::wrl_total(0.0, bayesian, lambda1) }));
    }

    let key_branch = model.key.as_ref().ok_or_else(|| Error::Invalid("contrastive training needs the key branch".into()))?;
    let keys: Vec<_> = pairs.iter().map(|p| &p.key).collect();
    let xk = images_to_tensor(&keys, &model.device)?;
    let (_, k) = key_branch.forward(&xk)?;
    for (row, pair) in to_f64_rows(&k.detach())?.into_iter().zip(pairs) {
        memory.push(ProjVector::new(row, pair.query.image_index, pair.query.weather))?;
    }
    let anchors: Vec<ProjVector> = to_f64_rows(&q)?
        .into_iter()
        .zip(pairs)
        .map(|(row, p)| ProjVector::new(row, p.query.image_index, p.query.weather))
        .collect();
    let c = losses::contra1_with(
        &anchors,
        memory,
        config.loss.temperature,
        config.loss.loss_reduction,
        config.train.positive_selection,
    )?;
    let surrogate = (inner(&q, &grad_tensor(&c.grad, &q)?)? + count_term.affine(lambda1, 0.0)?)?;
    Ok((surrogate, StepStats { contra: c.loss, bayesian, total: losses::wrl_total(c.loss, bayesian, lambda1) }))
}

/// Surrogate objective for one refinement batch. The encoder output is
/// detached and `memory` is only read. With `lambda2 = 0` the counting head
/// is left out of the graph.
pub fn crr_objective(
    model: &MqclModel,
    memory: &KeyStore,
    views: &[View],
    config: &PipelineConfig,
) -> Result<(Tensor, StepStats)> {
    let images: Vec<_> = views.iter().map(|v| &v.image).collect();
    let x = images_to_tensor(&images, &model.device)?;
    let r = model.encode(&x)?.detach();
    let refined = model.refine(&r)?;
    let q = model.project(&refined)?;
    let anchors = to_f64_rows(&q)?;
    let c = losses::contra2(&anchors, memory, NORMAL, config.loss.temperature, config.loss.loss_reduction)?;
    let mut surrogate = inner(&q, &grad_tensor(&c.grad, &q)?)?;
    let lambda2 = config.loss.lambda2;
    let mut bayesian = 0.0;
    if lambda2 > 0.0 {
        let density = model.predict_density(&refined)?;
        let cell = model.config.density_cell();
        let points: Vec<_> = views.iter().map(|v| grid_points(&v.points, cell)).collect();
        let (count_term, b) = count_surrogate(&density, &points, config)?;
        surrogate = (surrogate + count_term.affine(lambda2, 0.0)?)?;
        bayesian = b;
    }
    Ok((surrogate, StepStats { contra: c.loss, bayesian, total: losses::crr_total(c.loss, bayesian, lambda2) }))
}

fn optimizer(vars: Vec<Var>, config: &TrainConfig) -> Result<AdamW> {
    match config.optimizer {
        OptimizerKind::AdamW => Ok(AdamW::new(
            vars,
            ParamsAdamW { lr: config.lr, weight_decay: config.weight_decay, ..ParamsAdamW::default() },
        )?),
    }
}

fn check_samples(samples: &[CrowdSample], num_classes: usize, crop: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    for s in samples {
        if s.weather >= num_classes {
            return Err(Error::UnknownWeather { class: s.weather, num_classes });
        }
        if s.image.height() < crop || s.image.width() < crop {
            return Err(Error::Shape(format!(
                "image {} is {}x{}, smaller than the {crop} px crop",
                s.image_index,
                s.image.height(),
                s.image.width()
            )));
        }
    }
    Ok(())
}

/// Shuffled mini-batches of sample indices, one `Vec` per step.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn guard(step: usize, stats: &StepStats) -> Result<()> {
    if !stats.total.is_finite() {
        return Err(Error::Diverged { step, loss: stats.total });
    }
    Ok(())
}

/// The untrained model a representation-learning run with `config` starts from.
pub fn init_model(config: &PipelineConfig) -> Result<MqclModel> {
    MqclModel::new(&config.model, seeding::child_seed(config.train.seed, 1), &candle_core::Device::Cpu)
}

/// Representation learning from scratch. With `train.contrastive = false`
/// this is the count-only baseline.
pub fn train_wrl(
    config: &PipelineConfig,
    train: &[CrowdSample],
    class_names: &[String],
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    config.validate()?;
    let num_classes = class_names.len();
    let tc = &config.train;
    check_samples(train, num_classes, tc.crop_size)?;
    let model = init_model(config)?;
    let mut memory = KeyStore::new(tc.memory, num_classes, tc.queue_len, config.model.c2)?;
    let mut rng = seeding::rng(seeding::child_seed(tc.seed, 2));

    let mut vars = model.query.encoder_params.vars();
    vars.extend(model.query.projection_params.vars());
    vars.extend(model.head.params.vars());
    let mut opt = optimizer(vars, tc)?;

    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total = steps_per_epoch * tc.wrl_epochs;
    let stage = if tc.contrastive { "wrl" } else { "baseline" };
    let mut step = 0;
    for _ in 0..tc.wrl_epochs {
        for batch in epoch_batches(train.len(), tc.batch_size, &mut rng) {
            let pairs = batch
                .iter()
                .map(|&i| augment_pair(&train[i], tc.crop_size, tc.flip_prob, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let lr = scheduled_lr(tc, step, total);
            opt.set_learning_rate(lr);
            let (surrogate, stats) = wrl_objective(&model, &mut memory, &pairs, config)?;
            guard(step, &stats)?;
            opt.backward_step(&surrogate)?;
            if tc.contrastive {
                model.momentum_step(config.model.momentum)?;
            }
            log.record(LogRecord { step, stage: stage.into(), contra: stats.contra, bayesian: stats.bayesian, total: stats.total, lr })?;
            step += 1;
        }
    }
    log.flush()?;
    Ok(Checkpoint {
        stage: Stage::PostWrl,
        model,
        memory,
        config: config.clone(),
        class_names: class_names.to_vec(),
        data_dir: tc.data_dir.clone(),
    })
}

/// Refinement on top of a representation-learning checkpoint. Model
/// architecture and memory come from the checkpoint; loss and schedule
/// settings from `config`.
pub fn train_crr(
    config: &PipelineConfig,
    checkpoint: Checkpoint,
    train: &[CrowdSample],
    log: &mut TrainLog,
) -> Result<Checkpoint> {
    if checkpoint.stage != Stage::PostWrl {
        return Err(Error::Checkpoint(format!(
            "refinement needs a post-wrl checkpoint, got {}",
            checkpoint.stage.name()
        )));
    }
    if checkpoint.memory.class(NORMAL)?.is_empty() {
        return Err(Error::Protocol("checkpoint memory holds no normal-weather keys".into()));
    }
    let mut config = config.clone();
    config.model = checkpoint.model.config.clone();
    config.validate()?;
    let tc = config.train.clone();
    check_samples(train, checkpoint.num_classes(), tc.crop_size)?;

    let Checkpoint { mut model, memory, class_names, data_dir, .. } = checkpoint;
    model.drop_key_branch();
    model.attach_refiner(seeding::child_seed(tc.seed, 3))?;
    let mut vars = model.refiner.as_ref().expect("attached").params.vars();
    if tc.train_head_in_crr {
        vars.extend(model.head.params.vars());
    }
    let mut opt = optimizer(vars, &tc)?;
    let mut rng = seeding::rng(seeding::child_seed(tc.seed, 4));

    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total = steps_per_epoch * tc.crr_epochs;
    let mut step = 0;
    for _ in 0..tc.crr_epochs {
        for batch in epoch_batches(train.len(), tc.batch_size, &mut rng) {
            let views = batch
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    let crop = CropParams::sample(s.image.height(), s.image.width(), tc.crop_size, tc.flip_prob, &mut rng)?;
                    augment_view(s, crop)
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = scheduled_lr(&tc, step, total);
            opt.set_learning_rate(lr);
            let (surrogate, stats) = crr_objective(&model, &memory, &views, &config)?;
            guard(step, &stats)?;
            opt.backward_step(&surrogate)?;
            log.record(LogRecord { step, stage: "crr".into(), contra: stats.contra, bayesian: stats.bayesian, total: stats.total, lr })?;
            step += 1;
        }
    }
    log.flush()?;
    Ok(Checkpoint { stage: Stage::PostCrr, model, memory, config, class_names, data_dir: data_dir.or(tc.data_dir) })
}

/// Reduction used by a run, re-exported for reporting.
pub fn reduction(config: &PipelineConfig) -> Reduction {
    config.loss.loss_reduction
}
