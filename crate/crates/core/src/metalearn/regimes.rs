use serde::{Deserialize, Serialize};

use crate::corpus::{features_matrix, Example, TaskDataset};
use crate::episodes::{build_episode, EpisodeSpec, Scenario, TaskQueue, Temperature};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::numerics::{AdamWState, Rng};

use super::learners::{
    argmax, head_loss, head_predictions, maml_step, proto_classify, proto_episode_accuracy, proto_episode_loss,
    prototypes, reptile_inner, reptile_outer,
};
use super::{BatchConfig, Learner, MetricRow, ReptileConfig, RunMetrics, TrainConfig};

const EVAL_STREAM: u64 = 0x5eed_e7a1;

/// Inputs of a training run.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub queue: &'a TaskQueue,
    /// Held-out datasets behind the accuracy column.
    pub dev: &'a [TaskDataset],
    /// Query source for mixed-query episodes.
    pub target: Option<&'a TaskDataset>,
}

/// Shuffled pass over one dataset, reshuffled on wrap-around.
struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
}

impl BatchCursor {
    fn new(len: usize, rng: &mut Rng) -> BatchCursor {
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        BatchCursor { order, pos: 0 }
    }

    fn next(&mut self, ds: &TaskDataset, size: usize, rng: &mut Rng) -> Vec<Example> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(ds.examples[self.order[self.pos]].clone());
            self.pos += 1;
        }
        out
    }
}

fn diverged(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Diverged { iteration, what },
        other => other,
    }
}

fn check_heads(model: &Model, datasets: &[TaskDataset]) -> Result<()> {
    for d in datasets {
        let classes = model.head_classes(&d.task)?;
        if classes != d.num_labels() {
            return Err(Error::LabelMismatch(format!(
                "head `{}` has {classes} classes, dataset `{}` has {} labels",
                d.task,
                d.name,
                d.num_labels()
            )));
        }
    }
    Ok(())
}

/// Runs `config.iterations` learner updates on tasks drawn from the queue.
/// A metric row is recorded every `eval_interval` iterations. Any non-finite
/// loss or parameter aborts with [`Error::Diverged`].
pub fn train(model: &mut Model, data: TrainData<'_>, config: &TrainConfig, rng: &mut Rng) -> Result<RunMetrics> {
    config.validate()?;
    check_heads(model, data.queue.datasets())?;
    check_heads(model, data.dev)?;
    let eval_rng = rng.fork(EVAL_STREAM);
    let spec = config.episode_spec();
    let mut metrics = RunMetrics::new(config.learner.name());

    let mut optimizer = match &config.learner {
        Learner::Protonet(c) => Some(AdamWState::new(model.num_parameters(), c.optimizer)),
        Learner::NonEpisodic(c) => Some(AdamWState::new(model.num_parameters(), c.optimizer)),
        _ => None,
    };
    let mut cursors: Vec<BatchCursor> = match &config.learner {
        Learner::NonEpisodic(_) => data.queue.datasets().iter().map(|d| BatchCursor::new(d.size(), rng)).collect(),
        _ => Vec::new(),
    };

    let mut window = 0.0;
    let mut window_len = 0usize;
    for t in 1..=config.iterations {
        let loss = match &config.learner {
            Learner::Reptile(c) => {
                let beta = if c.decay_outer_step {
                    c.outer_step * (1.0 - (t - 1) as f64 / config.iterations as f64)
                } else {
                    c.outer_step
                };
                let spec = spec.as_ref().expect("episodic learner");
                reptile_update(model, data, c, spec, beta, rng).map_err(diverged(t))?
            }
            Learner::Maml(c) => {
                let spec = spec.as_ref().expect("episodic learner");
                let episodes = (0..c.meta_batch)
                    .map(|_| {
                        let ds = data.queue.sample_task(rng);
                        build_episode(&[ds], spec, data.target, rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                maml_step(model, &episodes, c, rng).map_err(diverged(t))?
            }
            Learner::Protonet(c) => {
                let spec = spec.as_ref().expect("episodic learner");
                let ds = data.queue.sample_task(rng);
                let ep = build_episode(&[ds], spec, data.target, rng)?;
                let pl = proto_episode_loss(model, &ep, c.lambda_dce, c.lambda_ce, Mode::Train, rng)
                    .map_err(diverged(t))?;
                let head = (c.lambda_ce > 0.0).then_some(ep.task.as_str());
                let state = optimizer.as_mut().expect("optimizer");
                apply_step(model, state, &pl.grad.into_vec(), head).map_err(diverged(t))?;
                pl.loss
            }
            Learner::NonEpisodic(c) => {
                let i = data.queue.sample_index(rng);
                let ds = &data.queue.datasets()[i];
                let batch = cursors[i].next(ds, c.batch_size, rng);
                let (loss, grad) = head_loss(model, &batch, &ds.task, Mode::Train, rng).map_err(diverged(t))?;
                let state = optimizer.as_mut().expect("optimizer");
                apply_step(model, state, &grad.into_vec(), Some(&ds.task)).map_err(diverged(t))?;
                loss
            }
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: t, what: "loss" });
        }
        if !model.flatten().is_finite() {
            return Err(Error::Diverged { iteration: t, what: "parameters" });
        }
        window += loss;
        window_len += 1;
        if t % config.eval_interval == 0 {
            let accuracy = dev_accuracy(model, data.dev, config, &eval_rng)?;
            metrics.rows.push(MetricRow {
                iteration: t,
                epoch: config.epoch_of(t),
                loss: window / window_len as f64,
                accuracy,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(metrics)
}

fn apply_step(model: &mut Model, state: &mut AdamWState, grad: &[f64], head: Option<&str>) -> Result<()> {
    let ranges = model.trainable_ranges(head)?;
    let mut params = model.flatten().into_vec();
    state.step_ranges(&mut params, grad, &ranges)?;
    model.unflatten(&params.into())
}

fn reptile_update(
    model: &mut Model,
    data: TrainData<'_>,
    c: &ReptileConfig,
    spec: &EpisodeSpec,
    beta: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let theta = model.flatten();
    let mut adapted = Vec::with_capacity(c.queue_length);
    let mut loss = 0.0;
    for _ in 0..c.queue_length {
        let ds = data.queue.sample_task(rng);
        let ep = build_episode(&[ds], spec, data.target, rng)?;
        let run = reptile_inner(model, &ep.support, &ds.task, c.inner_steps, &c.inner, rng)?;
        loss += run.losses[0];
        adapted.push(run.params);
    }
    model.unflatten(&reptile_outer(&theta, &adapted, beta)?)?;
    Ok(loss / c.queue_length as f64)
}

/// Prototypical learners score dev episodes (the same ones at every row);
/// the others score pooled head accuracy over all dev examples.
fn dev_accuracy(model: &Model, dev: &[TaskDataset], config: &TrainConfig, eval_rng: &Rng) -> Result<Option<f64>> {
    if dev.is_empty() {
        return Ok(None);
    }
    match &config.learner {
        Learner::Protonet(c) => {
            let spec = EpisodeSpec {
                way: c.way,
                shot: c.shot,
                query_per_class: c.query_per_class,
                scenario: Scenario::AuxOnly,
                target_fraction: 0.0,
            };
            let mut rng = eval_rng.clone();
            let n = config.eval_episodes.max(1);
            let mut total = 0.0;
            for i in 0..n {
                let ep = build_episode(&[&dev[i % dev.len()]], &spec, None, &mut rng)?;
                total += proto_episode_accuracy(model, &ep)?;
            }
            Ok(Some(total / n as f64))
        }
        _ => {
            let mut hits = 0usize;
            let mut count = 0usize;
            for d in dev {
                let preds = head_predictions(model, &d.examples, &d.task)?;
                hits += preds.iter().zip(&d.examples).filter(|(p, e)| **p == e.label).count();
                count += d.size();
            }
            Ok(Some(hits as f64 / count.max(1) as f64))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Episodic,
    NonEpisodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub steps: usize,
    pub eval_interval: usize,
    /// Used by non-episodic mode.
    pub batch: BatchConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::NonEpisodic,
            steps: 200,
            eval_interval: 50,
            batch: BatchConfig::default(),
        }
    }
}

/// Fine-tunes on one target dataset, registering its head if absent.
///
/// Episodic mode reuses the meta-training learner on target episodes:
/// ProtoNet steps for ProtoNet, one first-order MAML meta-step per episode
/// for MAML, and for Reptile the inner loop itself (outer step 1, one task
/// per update). Non-episodic mode runs AdamW mini-batches on the head loss.
pub fn finetune(
    model: &mut Model,
    target: &TaskDataset,
    learner: &Learner,
    config: &FinetuneConfig,
    dev: &[TaskDataset],
    rng: &mut Rng,
) -> Result<RunMetrics> {
    if !model.has_head(&target.task) {
        model.register_head(&target.task, target.num_labels(), rng)?;
    }
    let learner = match (config.mode, learner) {
        (FinetuneMode::NonEpisodic, _) => Learner::NonEpisodic(config.batch.clone()),
        (FinetuneMode::Episodic, Learner::Reptile(c)) => Learner::Reptile(ReptileConfig {
            outer_step: 1.0,
            decay_outer_step: false,
            queue_length: 1,
            ..c.clone()
        }),
        (FinetuneMode::Episodic, Learner::Maml(c)) => Learner::Maml(super::MamlConfig { meta_batch: 1, ..c.clone() }),
        (FinetuneMode::Episodic, Learner::Protonet(c)) => Learner::Protonet(c.clone()),
        (FinetuneMode::Episodic, Learner::NonEpisodic(_)) => {
            return Err(Error::InvalidConfig("episodic fine-tuning needs an episodic learner".into()))
        }
    };
    let queue = TaskQueue::new(vec![target.clone()], Temperature::Finite(1.0))?;
    let train_config = TrainConfig {
        learner,
        iterations: config.steps,
        epochs: 1,
        eval_interval: config.eval_interval,
        ..TrainConfig::default()
    };
    train(model, TrainData { queue: &queue, dev, target: None }, &train_config, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    /// Argmax of the task head.
    Head,
    /// Nearest prototype, prototypes built from a labeled source dataset.
    Prototype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub label_names: Vec<String>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Eval-mode accuracy and confusion matrix on `test`.
pub fn evaluate(
    model: &Model,
    test: &TaskDataset,
    method: EvalMethod,
    prototype_source: Option<&TaskDataset>,
) -> Result<Evaluation> {
    if test.examples.is_empty() {
        return Err(Error::EmptyInput("test dataset"));
    }
    let predictions = match method {
        EvalMethod::Head => head_predictions(model, &test.examples, &test.task)?,
        EvalMethod::Prototype => {
            let source = prototype_source
                .ok_or_else(|| Error::InvalidConfig("prototype evaluation needs a prototype source".into()))?;
            if source.label_names != test.label_names {
                return Err(Error::LabelMismatch(format!(
                    "prototype source `{}` and test `{}` use different labels",
                    source.name, test.name
                )));
            }
            let s = model.forward_eval(&source.features()?, None)?;
            let mu = prototypes(s.encoding(), &source.labels(), source.num_labels())?;
            let q = model.forward_eval(&features_matrix(&test.examples)?, None)?;
            q.encoding()
                .iter_rows()
                .map(|row| proto_classify(row, &mu).map(|p| argmax(&p)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let k = test.num_labels();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut hits = 0;
    for (p, e) in predictions.iter().zip(&test.examples) {
        confusion[e.label][*p] += 1;
        hits += usize::from(*p == e.label);
    }
    Ok(Evaluation {
        accuracy: hits as f64 / test.size() as f64,
        label_names: test.label_names.clone(),
        confusion,
        predictions,
    })
}
