//! Toy training on a fixed set of synthetic scenes and AP evaluation on a
//! held-out set.

use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::detect::{assign_targets, loss_total_var, mean_average_precision, nms, LossValues, TargetAssignment};
use crate::error::{Error, Result, StageContext};
use crate::hsi_io::{gen_synthetic_cube, SceneAnnotation};
use crate::model::{PreparedInput, SdcmModel};
use crate::nn::{Binder, Parameters};
use crate::tensor::Tensor;

const TRAIN_SALT: u64 = 0x7261_696e;
const EVAL_SALT: u64 = 0x6576_616c;
const BATCH_SALT: u64 = 0x6261_7463;

pub struct Scene {
    pub seed: u64,
    pub input: PreparedInput,
    pub annotation: SceneAnnotation,
    pub assignment: TargetAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Generates and preprocesses `count` scenes with `1..=max_objects`
/// objects each. Train and eval scenes come from different seed streams.
pub fn make_scenes(cfg: &RunConfig, split: Split, count: usize) -> Result<Vec<Scene>> {
    let salt = match split {
        Split::Train => TRAIN_SALT,
        Split::Eval => EVAL_SALT,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
    let grid = (cfg.scene.height >> 3, cfg.scene.width >> 3);
    (0..count)
        .map(|_| {
            let seed: u64 = rng.random::<u64>() >> 1;
            let mut spec = cfg.scene.clone();
            spec.objects = rng.random_range(1..=cfg.max_objects);
            let (cube, annotation) = gen_synthetic_cube(seed, &spec).stage("hsi_io")?;
            let input = crate::model::prepare_input(&cube, cfg)?;
            let assignment = assign_targets(&annotation, grid).stage("detect")?;
            Ok(Scene { seed, input, annotation, assignment })
        })
        .collect()
}

/// Loss and parameter gradients of one scene.
pub fn scene_loss(model: &SdcmModel, scene: &Scene) -> Result<(LossValues, Vec<Tensor>)> {
    let tape = Tape::new();
    let b = Binder::new(&tape);
    let out = model.forward_var(&b, &scene.input)?;
    let parts = loss_total_var(&b, out.raw, &scene.assignment, model.head.num_classes).stage("detect")?;
    let grads = tape.backward(parts.total)?;
    let g = model.named_params().into_iter().map(|(_, t)| b.grad(&grads, t)).collect();
    Ok((parts.values(), g))
}

/// Mean loss and mean gradient over `scenes`. Scenes are spread over
/// threads; partial results are summed in scene order so the outcome does
/// not depend on scheduling.
pub fn batch_loss(model: &SdcmModel, scenes: &[Scene]) -> Result<(LossValues, Vec<Tensor>)> {
    batch_loss_refs(model, &scenes.iter().collect::<Vec<_>>())
}

fn batch_loss_refs(model: &SdcmModel, scenes: &[&Scene]) -> Result<(LossValues, Vec<Tensor>)> {
    let results = parallel_map(scenes, |sc| scene_loss(model, sc));
    let n = scenes.len() as f64;
    let mut total = LossValues { cls: 0.0, boxes: 0.0, conf: 0.0, total: 0.0 };
    let mut grads: Option<Vec<Tensor>> = None;
    for r in results {
        let (l, g) = r?;
        total.cls += l.cls / n;
        total.boxes += l.boxes / n;
        total.conf += l.conf / n;
        total.total += l.total / n;
        match grads.as_mut() {
            None => grads = Some(g.into_iter().map(|t| t.map(|v| v / n)).collect()),
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(&g) {
                    a.axpy(1.0 / n, t);
                }
            }
        }
    }
    Ok((total, grads.unwrap_or_default()))
}

/// Adam with the usual moment decay rates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_conf: f64,
    pub loss_box: f64,
    pub loss_total: f64,
}

impl LossRow {
    pub const CSV_HEADER: &'static str = "step,loss_cls,loss_conf,loss_box,loss_total";

    fn new(step: usize, l: LossValues) -> Self {
        Self { step, loss_cls: l.cls, loss_conf: l.conf, loss_box: l.boxes, loss_total: l.total }
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.loss_cls, self.loss_conf, self.loss_box, self.loss_total)
    }
}

pub struct TrainOutcome {
    pub model: SdcmModel,
    /// Rows for steps `0..=steps`; row `s` is the loss after `s` updates.
    pub curve: Vec<LossRow>,
}

/// Trains a fresh model for `cfg.steps` Adam steps on minibatches drawn
/// from a fixed pool of scenes, calling `on_row` after every logged loss.
///
/// The logged loss is measured on a fixed monitor batch (the first
/// `batch_size` pool scenes), so it moves only when the parameters do.
pub fn train_toy(cfg: &RunConfig, mut on_row: impl FnMut(&LossRow)) -> Result<TrainOutcome> {
    let mut model = SdcmModel::new(cfg)?;
    let pool = make_scenes(cfg, Split::Train, cfg.train_scenes)?;
    let monitor = &pool[..cfg.batch_size];
    let mut order = BatchOrder::new(cfg.seed, pool.len(), cfg.batch_size);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    let full_batch = cfg.batch_size == pool.len();
    for step in 0..=cfg.steps {
        let (loss, monitor_grads) = if full_batch && step < cfg.steps {
            let (l, g) = batch_loss(&model, &pool)?;
            (l, Some(g))
        } else {
            (batch_values(&model, monitor)?, None)
        };
        if !loss.total.is_finite() {
            return Err(Error::Training(diagnostic(step, &loss, &model, monitor_grads.as_deref())));
        }
        let row = LossRow::new(step, loss);
        on_row(&row);
        curve.push(row);
        if step == cfg.steps {
            break;
        }
        let grads = match monitor_grads {
            Some(g) => g,
            None => {
                let batch: Vec<&Scene> = order.next_batch().iter().map(|&i| &pool[i]).collect();
                let (loss, grads) = batch_loss_refs(&model, &batch)?;
                if !loss.total.is_finite() {
                    return Err(Error::Training(diagnostic(step, &loss, &model, Some(&grads))));
                }
                grads
            }
        };
        adam.update(model.params_mut(), &grads);
    }
    Ok(TrainOutcome { model, curve })
}

/// Epoch-wise shuffled minibatch indices from a seeded generator.
struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchOrder {
    fn new(seed: u64, n: usize, batch: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BATCH_SALT);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        Self { rng, perm, pos: 0, batch }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.perm[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

fn diagnostic(step: usize, loss: &LossValues, model: &SdcmModel, grads: Option<&[Tensor]>) -> String {
    let mut s = format!(
        "non-finite loss at step {step} (cls {}, box {}, conf {})",
        loss.cls, loss.boxes, loss.conf
    );
    for (i, (name, p)) in model.named_params().into_iter().enumerate() {
        s.push_str(&format!("\n  {name}: |w|max {:.3e}", p.max_abs()));
        if let Some(g) = grads.and_then(|g| g.get(i)) {
            s.push_str(&format!(", |g|max {:.3e}", g.max_abs()));
        }
    }
    s
}

/// Mean loss over `scenes` without gradients.
pub fn batch_values(model: &SdcmModel, scenes: &[Scene]) -> Result<LossValues> {
    let n = scenes.len() as f64;
    let mut total = LossValues { cls: 0.0, boxes: 0.0, conf: 0.0, total: 0.0 };
    for l in parallel_map(scenes, |s| scene_values(model, s)) {
        let l = l?;
        total.cls += l.cls / n;
        total.boxes += l.boxes / n;
        total.conf += l.conf / n;
        total.total += l.total / n;
    }
    Ok(total)
}

pub fn scene_values(model: &SdcmModel, scene: &Scene) -> Result<LossValues> {
    let tape = Tape::new();
    let b = Binder::new(&tape);
    let out = model.forward_var(&b, &scene.input)?;
    Ok(loss_total_var(&b, out.raw, &scene.assignment, model.head.num_classes).stage("detect")?.values())
}

/// Maps `f` over `items` on scoped threads, keeping input order.
fn parallel_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Mean AP at IoU 0.5 of the suppressed detections on `scenes`.
pub fn evaluate_ap(model: &SdcmModel, scenes: &[Scene]) -> Result<f64> {
    let mut pairs = Vec::with_capacity(scenes.len());
    for s in scenes {
        let (dets, _) = model.forward(&s.input)?;
        pairs.push((nms(&dets, model.config.nms_iou)?, s.annotation.clone()));
    }
    Ok(mean_average_precision(&pairs, model.head.num_classes, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig { steps: 2, train_scenes: 4, batch_size: 2, ..RunConfig::default() }
    }

    #[test]
    fn zero_learning_rate_is_flat() {
        let cfg = RunConfig { learning_rate: 0.0, ..tiny() };
        let out = train_toy(&cfg, |_| {}).unwrap();
        assert_eq!(out.curve.len(), 3);
        assert!(out.curve.iter().all(|r| r.loss_total == out.curve[0].loss_total));
    }

    #[test]
    fn batch_is_mean_of_scenes() {
        let cfg = tiny();
        let model = SdcmModel::new(&cfg).unwrap();
        let scenes = make_scenes(&cfg, Split::Train, 2).unwrap();
        let (l, _) = batch_loss(&model, &scenes).unwrap();
        let a = scene_loss(&model, &scenes[0]).unwrap().0.total;
        let b = scene_loss(&model, &scenes[1]).unwrap().0.total;
        assert!((l.total - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::new([2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new([2], vec![0.3, -2.0]).unwrap();
        let mut adam = Adam::new(0.1);
        adam.update(vec![&mut p], &[g]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }
}
