//! Mini-batch training with Adam and evaluation of a model on prepared
//! instances.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::QaExample;
use crate::error::{Error, Result};
use crate::eval::{score, Metrics, Predictions, Report};
use crate::model::{Instance, Model};
use crate::numerics::{NumericsError, ParamRegistry, Tape, Tensor};

/// Early-stopping target on dev metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub answer_em: f64,
    pub sp_f1: f64,
}

impl Target {
    pub fn reached(&self, m: &Metrics) -> bool {
        m.ans.em >= self.answer_em && m.sp.f1 >= self.sp_f1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Worker threads for per-example work; 0 uses every available core.
    pub jobs: usize,
    /// Stop once dev metrics reach this target.
    pub target: Option<Target>,
    /// Stop after the epoch during which this many seconds have elapsed.
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            epochs: 20,
            clip_norm: 1.0,
            seed: 7,
            jobs: 0,
            target: None,
            time_budget_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamRegistry, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamRegistry, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

/// Deterministic seed for one example's dropout masks.
pub fn example_seed(seed: u64, epoch: usize, step: usize, slot: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [epoch as u64, step as u64, slot as u64] {
        h = (h ^ x).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Summed loss and gradients of a batch; examples run in parallel and are
/// reduced in batch order.
pub fn batch_gradients(model: &Model, batch: &[&Instance], seeds: Option<&[u64]>) -> Result<(f64, Vec<Tensor>)> {
    let per: Vec<Result<(f64, Vec<Tensor>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(k, inst)| {
            let mut rng = seeds.map(|s| ChaCha8Rng::seed_from_u64(s[k]));
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let loss = model.loss(&mut tape, &p, inst, rng.as_mut())?;
            let value = tape.value(loss.total).item();
            let mut grads = tape.backward(loss.total)?;
            Ok((value, p.collect(&tape, &mut grads)))
        })
        .collect();
    let mut total = 0.0;
    let mut sum = model.params.zeros_like();
    for r in per {
        let (loss, grads) = r?;
        total += loss;
        for (s, g) in sum.iter_mut().zip(&grads) {
            for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok((total, sum))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub first_batch_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<Metrics>,
    pub seconds: f64,
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_joint_f1: f64,
    /// First epoch at which the target was met.
    pub reached_target: Option<usize>,
    pub seconds: f64,
}

/// Dev instances with their gold examples.
#[derive(Clone, Copy)]
pub struct DevSet<'a> {
    pub instances: &'a [Instance],
    pub examples: &'a [QaExample],
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Trains `model` in place. With a dev set, the parameters of the best epoch
/// by joint F1 are kept (and written to `best_path` when given); otherwise
/// the final parameters are kept.
pub fn train(
    model: &mut Model,
    train_set: &[Instance],
    dev: Option<DevSet<'_>>,
    cfg: &TrainConfig,
    best_path: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let pool = pool(cfg.jobs)?;
    let clock = Instant::now();
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut report = TrainReport { best_joint_f1: f64::NEG_INFINITY, ..TrainReport::default() };
    let mut best_params: Option<ParamRegistry> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(example_seed(cfg.seed, epoch, usize::MAX, 0));
        order.shuffle(&mut shuffle);
        let (mut sum, mut count, mut first) = (0.0, 0, f64::NAN);
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|k| example_seed(cfg.seed, epoch, step, k)).collect();
            let ids = || batch.iter().map(|b| b.id.as_str()).collect::<Vec<_>>().join(", ");
            let (loss, mut grads) = match pool.install(|| batch_gradients(model, &batch, Some(&seeds))) {
                Err(Error::Numerics(NumericsError::NonFinite { op })) => {
                    return Err(Error::Diverged(format!("non-finite value in `{op}` at epoch {epoch}, step {step}; batch [{}]", ids())))
                }
                r => r?,
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}, step {step}; batch [{}]", ids())));
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.params, &grads);
            if step == 0 {
                first = loss * inv;
            }
            sum += loss;
            count += batch.len();
            steps += 1;
        }
        let dev_metrics = match dev {
            Some(d) => Some(pool.install(|| evaluate(model, d.instances, d.examples))?.0.overall),
            None => None,
        };
        let mut best = false;
        if let Some(m) = &dev_metrics {
            if m.joint.f1 > report.best_joint_f1 {
                report.best_joint_f1 = m.joint.f1;
                report.best_epoch = Some(epoch);
                best_params = Some(model.params.clone());
                best = true;
                if let Some(path) = best_path {
                    model.save(path)?;
                }
            }
            if report.reached_target.is_none() && cfg.target.is_some_and(|t| t.reached(m)) {
                report.reached_target = Some(epoch);
            }
        }
        let log = EpochLog {
            epoch,
            steps,
            train_loss: sum / count as f64,
            first_batch_loss: first,
            dev: dev_metrics,
            seconds: clock.elapsed().as_secs_f64(),
            best,
        };
        on_epoch(&log);
        report.epochs.push(log);
        let out_of_time = cfg.time_budget_secs.is_some_and(|b| clock.elapsed().as_secs_f64() >= b);
        if report.reached_target.is_some() || out_of_time {
            break;
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    } else if let Some(path) = best_path {
        model.save(path)?;
    }
    report.seconds = clock.elapsed().as_secs_f64();
    Ok(report)
}

/// Predicts every instance and scores against `examples` (matched by id).
pub fn evaluate(model: &Model, instances: &[Instance], examples: &[QaExample]) -> Result<(Report, Predictions)> {
    let decoded: Vec<_> = instances.par_iter().map(|inst| model.predict(inst)).collect::<Result<_>>()?;
    let mut pred = Predictions::default();
    for (inst, d) in instances.iter().zip(decoded) {
        pred.answer.insert(inst.id.clone(), d.answer.as_str().to_string());
        pred.sp.insert(inst.id.clone(), d.supporting_facts.into_iter().collect());
    }
    Ok((score(&pred, examples), pred))
}

/// Runs `f` on a pool with `jobs` threads.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(pool(jobs)?.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::row(&[3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut g = vec![Tensor::row(&[0.3, 0.4])];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut reg = ParamRegistry::new();
        reg.register("x", Tensor::row(&[1.0, -1.0])).unwrap();
        let mut adam = Adam::new(&reg, 0.1);
        adam.step(&mut reg, &[Tensor::row(&[2.0, -0.5])]);
        let x = reg.tensors()[0].data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn seeds_differ() {
        let a = example_seed(7, 1, 0, 0);
        assert_ne!(a, example_seed(7, 1, 0, 1));
        assert_ne!(a, example_seed(7, 1, 1, 0));
        assert_ne!(a, example_seed(7, 2, 0, 0));
        assert_eq!(a, example_seed(7, 1, 0, 0));
    }
}
