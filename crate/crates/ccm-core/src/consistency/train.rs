//! The training loop: per-iteration level schedule, per-sample noise and
//! level-index draws, batched loss gradients, optimizer update, teacher sync.
//!
//! All randomness is derived from the master seed and the iteration index,
//! never from the RNG's running state, so a resumed run replays the exact
//! stream of the uninterrupted one. Batch items are evaluated independently
//! (optionally in parallel) and reduced in index order, which keeps training
//! bitwise reproducible regardless of thread count.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cct_loss, default_huber_c, ConsistencyModel};
use crate::checkpoint::{parameters_to_arrays, Checkpoint, OptimizerCkpt};
use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::network::UNetConfig;
use crate::parallel::{self, Parallelism};
use crate::schedule::{NoiseSchedule, StepScheduleConfig};
use crate::seeds::stream_seed;
use crate::tensor::Tensor;

const STREAM_BATCH: u64 = 0x01;
const STREAM_SAMPLE: u64 = 0x02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    /// Plain gradient descent, the literal update rule.
    Sgd,
    /// Adaptive moments; the practical default.
    #[default]
    Adam,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    /// Pseudo-Huber constant; `None` derives `0.00054 * sqrt(C*H*W)` from
    /// the data.
    pub huber_c: Option<f64>,
    /// Step schedule; `step_cfg.total_iters` is the iteration count K.
    pub step_cfg: StepScheduleConfig,
    pub seed: u64,
    /// Teacher update: `None` copies the student after every step (the
    /// literal rule); `Some(mu)` keeps an exponential moving average.
    pub ema_decay: Option<f64>,
    pub parallelism: Parallelism,
    pub log_interval: u64,
    pub checkpoint_interval: Option<u64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lr must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        if self.batch < 1 {
            return Err(Error::InvalidArgument("batch must be >= 1".into()));
        }
        if let Some(c) = self.huber_c {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "huber_c must be positive, got {c}"
                )));
            }
        }
        if let Some(mu) = self.ema_decay {
            if !(0.0..1.0).contains(&mu) {
                return Err(Error::InvalidArgument(format!(
                    "ema_decay must be in [0, 1), got {mu}"
                )));
            }
        }
        if self.log_interval == 0 {
            return Err(Error::InvalidArgument("log_interval must be >= 1".into()));
        }
        if self.checkpoint_interval == Some(0) {
            return Err(Error::InvalidArgument(
                "checkpoint_interval must be >= 1 when set".into(),
            ));
        }
        self.step_cfg.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub steps_m: usize,
    pub mean_loss: f64,
    pub wall_ms: f64,
}

pub enum TrainEvent<'a> {
    Log(&'a LogRecord),
    /// Periodic snapshot; the caller decides whether to persist it.
    Checkpoint(&'a Checkpoint),
}

pub struct TrainOutput {
    pub model: ConsistencyModel<f32>,
    pub final_checkpoint: Checkpoint,
    pub records: Vec<LogRecord>,
}

enum OptState {
    Sgd,
    Adam {
        step: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    },
}

impl OptState {
    fn fresh(kind: OptimizerKind, model: &ConsistencyModel<f32>) -> Self {
        match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Adam => OptState::Adam {
                step: 0,
                m: model
                    .params
                    .iter()
                    .map(|(_, t)| vec![0.0f32; t.numel()])
                    .collect(),
                v: model
                    .params
                    .iter()
                    .map(|(_, t)| vec![0.0f32; t.numel()])
                    .collect(),
            },
        }
    }

    fn apply(&mut self, model: &mut ConsistencyModel<f32>, grads: &[Vec<f32>], lr: f64) {
        match self {
            OptState::Sgd => {
                let lr = lr as f32;
                for (j, g) in grads.iter().enumerate() {
                    let (_, p) = model.params.at_mut(j);
                    let mut data = p.to_vec();
                    for (d, &gv) in data.iter_mut().zip(g) {
                        *d -= lr * gv;
                    }
                    p.replace_data(data).expect("same length");
                }
            }
            OptState::Adam { step, m, v } => {
                const BETA1: f32 = 0.9;
                const BETA2: f32 = 0.999;
                const EPS: f32 = 1e-8;
                *step += 1;
                let bc1 = 1.0 - BETA1.powi(*step as i32);
                let bc2 = 1.0 - BETA2.powi(*step as i32);
                let lr = lr as f32;
                for (j, g) in grads.iter().enumerate() {
                    let (_, p) = model.params.at_mut(j);
                    let mut data = p.to_vec();
                    let mj = &mut m[j];
                    let vj = &mut v[j];
                    for (((d, &gv), mm), vv) in
                        data.iter_mut().zip(g).zip(mj.iter_mut()).zip(vj.iter_mut())
                    {
                        *mm = BETA1 * *mm + (1.0 - BETA1) * gv;
                        *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                        let mhat = *mm / bc1;
                        let vhat = *vv / bc2;
                        *d -= lr * mhat / (vhat.sqrt() + EPS);
                    }
                    p.replace_data(data).expect("same length");
                }
            }
        }
    }

    fn to_ckpt(&self, model: &ConsistencyModel<f32>) -> OptimizerCkpt {
        match self {
            OptState::Sgd => OptimizerCkpt::Sgd,
            OptState::Adam { step, m, v } => {
                let wrap = |buffers: &[Vec<f32>]| {
                    model
                        .params
                        .iter()
                        .zip(buffers)
                        .map(|((name, t), buf)| crate::checkpoint::NamedArray {
                            name: name.to_string(),
                            shape: t.shape().to_vec(),
                            data: buf.clone(),
                        })
                        .collect()
                };
                OptimizerCkpt::Adam {
                    step: *step,
                    m: wrap(m),
                    v: wrap(v),
                }
            }
        }
    }

    fn from_ckpt(ckpt: &OptimizerCkpt) -> Result<(OptimizerKind, Self)> {
        match ckpt {
            OptimizerCkpt::Sgd => Ok((OptimizerKind::Sgd, OptState::Sgd)),
            OptimizerCkpt::Adam { step, m, v } => Ok((
                OptimizerKind::Adam,
                OptState::Adam {
                    step: *step,
                    m: m.iter().map(|a| a.data.clone()).collect(),
                    v: v.iter().map(|a| a.data.clone()).collect(),
                },
            )),
        }
    }
}

fn validate_dataset(
    dataset: &[PairedSample],
    net_cfg: &UNetConfig,
) -> Result<(usize, usize, usize)> {
    let Some(first) = dataset.first() else {
        return Err(Error::Dataset("training dataset is empty".into()));
    };
    let shape = first.r.shape().to_vec();
    for s in dataset {
        if s.r.shape() != shape.as_slice() || s.v.shape() != shape.as_slice() {
            return Err(Error::Dataset(format!(
                "sample {} has shape {:?}, expected {:?}",
                s.id,
                s.r.shape(),
                shape
            )));
        }
    }
    if shape[0] != net_cfg.out_channels {
        return Err(Error::Dataset(format!(
            "dataset has {} channels, network expects {}",
            shape[0], net_cfg.out_channels
        )));
    }
    net_cfg.check_extents(shape[1], shape[2])?;
    Ok((shape[0], shape[1], shape[2]))
}

/// Train a fresh model, emitting log and checkpoint events along the way.
pub fn train<F>(
    dataset: &[PairedSample],
    sched: NoiseSchedule,
    net_cfg: UNetConfig,
    cfg: &TrainConfig,
    config_hash: u64,
    on_event: F,
) -> Result<TrainOutput>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    cfg.validate()?;
    let mut model = ConsistencyModel::<f32>::new(net_cfg, sched, cfg.seed)?;
    model.teacher_params = model.params.clone();
    let opt = OptState::fresh(cfg.optimizer, &model);
    run(model, opt, 0, dataset, cfg, config_hash, on_event)
}

/// Continue a run from a checkpoint. The stored config hash must match
/// unless `force` is set.
pub fn train_resumed<F>(
    ckpt: &Checkpoint,
    dataset: &[PairedSample],
    sched: NoiseSchedule,
    net_cfg: UNetConfig,
    cfg: &TrainConfig,
    config_hash: u64,
    force: bool,
    on_event: F,
) -> Result<TrainOutput>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    cfg.validate()?;
    if ckpt.config_hash != config_hash && !force {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint has {:#018x}, config resolves to {:#018x} \
             (pass force to resume anyway)",
            ckpt.config_hash, config_hash
        )));
    }
    if ckpt.iteration > cfg.step_cfg.total_iters {
        return Err(Error::Checkpoint(format!(
            "checkpoint is at iteration {} but the run only has {}",
            ckpt.iteration, cfg.step_cfg.total_iters
        )));
    }
    let params = ckpt.student_parameters()?;
    let teacher = ckpt.teacher_parameters()?;
    let model = ConsistencyModel::from_parts(net_cfg, sched, params, teacher)?;
    let (kind, opt) = OptState::from_ckpt(&ckpt.optimizer)?;
    if kind != cfg.optimizer {
        return Err(Error::Checkpoint(
            "checkpoint optimizer kind does not match config".into(),
        ));
    }
    run(model, opt, ckpt.iteration, dataset, cfg, config_hash, on_event)
}

fn snapshot(
    model: &ConsistencyModel<f32>,
    opt: &OptState,
    next_iter: u64,
    cfg: &TrainConfig,
    config_hash: u64,
) -> Checkpoint {
    Checkpoint {
        config_hash,
        iteration: next_iter,
        seed: cfg.seed,
        params: parameters_to_arrays(&model.params),
        optimizer: opt.to_ckpt(model),
        teacher: cfg
            .ema_decay
            .map(|_| parameters_to_arrays(&model.teacher_params)),
    }
}

fn run<F>(
    mut model: ConsistencyModel<f32>,
    mut opt: OptState,
    start_iter: u64,
    dataset: &[PairedSample],
    cfg: &TrainConfig,
    config_hash: u64,
    mut on_event: F,
) -> Result<TrainOutput>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    let (c, h, w) = validate_dataset(dataset, &model.net_cfg)?;
    let shape = [c, h, w];
    let huber_c = cfg.huber_c.unwrap_or_else(|| default_huber_c(c * h * w));
    let total = cfg.step_cfg.total_iters;
    let start = Instant::now();

    let mut levels: Vec<f64> = Vec::new();
    let mut levels_m = 0usize;
    let mut records = Vec::new();
    let mut window_loss = 0.0f64;
    let mut window_count = 0u64;

    for k in start_iter..total {
        let m_levels = cfg.step_cfg.steps_at(k)?;
        if m_levels != levels_m {
            levels = model.sched.discretize(m_levels)?;
            levels_m = m_levels;
        }

        let mut batch_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_BATCH, k));
        let indices: Vec<usize> = (0..cfg.batch)
            .map(|_| batch_rng.gen_range(0..dataset.len()))
            .collect();
        let item_seeds: Vec<u64> = (0..cfg.batch)
            .map(|i| stream_seed(cfg.seed, STREAM_SAMPLE, k * cfg.batch as u64 + i as u64))
            .collect();

        let model_ref = &model;
        let levels_ref = &levels;
        let results: Vec<Result<(f64, Vec<Arc<[f32]>>, usize)>> =
            parallel::map_range(cfg.batch, cfg.parallelism, |i| {
                let pair = &dataset[indices[i]];
                let mut rng = ChaCha8Rng::seed_from_u64(item_seeds[i]);
                let n = rng.gen_range(1..=m_levels - 1);
                let z = Tensor::<f32>::randn(&shape, &mut rng);
                let out = cct_loss(
                    model_ref, &pair.r, &pair.v, n, levels_ref, &z, huber_c, true,
                )?;
                Ok((out.loss, out.grads.expect("grads requested"), n))
            });

        let mut mean_loss = 0.0f64;
        let mut ns = Vec::with_capacity(cfg.batch);
        let mut grad_acc: Vec<Vec<f32>> = model
            .params
            .iter()
            .map(|(_, t)| vec![0.0f32; t.numel()])
            .collect();
        let inv_batch = 1.0f32 / cfg.batch as f32;
        for res in results {
            let (loss, grads, n) = res?;
            mean_loss += loss;
            ns.push(n);
            for (acc, g) in grad_acc.iter_mut().zip(grads.iter()) {
                for (a, &gv) in acc.iter_mut().zip(g.iter()) {
                    *a += gv * inv_batch;
                }
            }
        }
        mean_loss /= cfg.batch as f64;

        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: k,
                loss: mean_loss,
                ns,
                levels: levels.clone(),
            });
        }

        opt.apply(&mut model, &grad_acc, cfg.lr);

        match cfg.ema_decay {
            None => model.teacher_params = model.params.clone(),
            Some(mu) => {
                let mu = mu as f32;
                for j in 0..model.params.len() {
                    let (_, student) = model.params.at(j);
                    let student = student.data().to_vec();
                    let (_, teacher) = model.teacher_params.at_mut(j);
                    let mut data = teacher.to_vec();
                    for (t, s) in data.iter_mut().zip(&student) {
                        *t = mu * *t + (1.0 - mu) * *s;
                    }
                    teacher.replace_data(data).expect("same length");
                }
            }
        }

        window_loss += mean_loss;
        window_count += 1;
        let last = k + 1 == total;
        if (k + 1) % cfg.log_interval == 0 || last {
            let record = LogRecord {
                iteration: k,
                steps_m: m_levels,
                mean_loss: window_loss / window_count as f64,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            on_event(TrainEvent::Log(&record))?;
            records.push(record);
            window_loss = 0.0;
            window_count = 0;
        }
        if let Some(ci) = cfg.checkpoint_interval {
            if (k + 1) % ci == 0 && !last {
                let ck = snapshot(&model, &opt, k + 1, cfg, config_hash);
                on_event(TrainEvent::Checkpoint(&ck))?;
            }
        }
    }

    let final_checkpoint = snapshot(&model, &opt, total, cfg, config_hash);
    Ok(TrainOutput {
        model,
        final_checkpoint,
        records,
    })
}
