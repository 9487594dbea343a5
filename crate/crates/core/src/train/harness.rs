//! Training loop, per-task evaluation and router-only transfer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{capture_snapshots, AllocationSnapshot};
use crate::autodiff::{Tape, Tensor, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::layer::{Router, Trainable};
use crate::model::{Model, ModelMode};
use crate::rng::{self, Purpose};
use crate::train::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::train::suite::{generate_suite, Sample, SyntheticTaskSuite, TaskData};

pub const TRANSFER_PROTOCOL: &str = "router-only";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: usize,
    pub mean_train_loss: f64,
    pub eval: Vec<TaskEval>,
    pub mean_eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub suite_checksum: u64,
    pub trainable_params: usize,
    pub total_steps: usize,
    /// Batch loss at every optimizer step.
    pub train_loss: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub final_eval: Vec<TaskEval>,
    pub mean_eval_loss: f64,
    pub snapshots: Vec<AllocationSnapshot>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub model: Model,
    pub suite: SyntheticTaskSuite,
}

/// Schedule and parameter selection for one call to [`fit`].
#[derive(Clone, Copy, Debug)]
pub struct FitPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    /// Seeds shuffling and allocation noise.
    pub seed: u64,
    pub select: Trainable,
}

impl FitPlan {
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// Mean squared error of `pred` against `target` on the tape.
pub fn mse_on(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let y = tape.constant(target.clone());
    let diff = tape.sub(pred, y)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Mean per-sample MSE over `batch` in train mode, with gradients for `select`.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Sample],
    seed: u64,
    step: usize,
    select: Trainable,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, select);
    let mut total: Option<Var> = None;
    for (i, s) in batch.iter().enumerate() {
        let x = tape.constant(s.x.clone());
        let mode = ModelMode::Train { seed, step, sample: i };
        let (out, _) = model.forward_on(&mut tape, &vars, x, mode, Some(s.task))?;
        let l = mse_on(&mut tape, out, &s.y)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::contract("empty batch"))?;
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Divergence { step, loss: value });
    }
    tape.backward(loss)?;
    let grads = Model::trainable_vars(&vars)
        .into_iter()
        .map(|v| tape.grad(v).cloned())
        .collect();
    Ok((value, grads))
}

/// Trains the selected parameters of `model` on every train sample of `tasks`.
///
/// Samples are reshuffled each epoch. `on_epoch(model, epoch, step)` runs after
/// each epoch. Returns the batch loss of every step.
pub fn fit(
    model: &mut Model,
    tasks: &[TaskData],
    plan: &FitPlan,
    mut on_epoch: impl FnMut(&Model, usize, usize) -> Result<()>,
) -> Result<Vec<f64>> {
    let samples: Vec<&Sample> = tasks.iter().flat_map(|t| &t.train).collect();
    let mut state = {
        let params = model.trainable_mut(plan.select);
        OptimizerState::for_params(plan.adamw, &params)
    };
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..plan.epochs {
        let mut rng = rng::stream(plan.seed, Purpose::Shuffle, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch, plan.seed, state.step, plan.select)?;
            let mut params = model.trainable_mut(plan.select);
            adamw_step(&mut params, &grads, &mut state)?;
            losses.push(loss);
        }
        on_epoch(model, epoch, state.step)?;
    }
    Ok(losses)
}

/// Eval-mode MSE averaged over each task's eval samples.
pub fn evaluate(model: &Model, tasks: &[TaskData]) -> Result<Vec<TaskEval>> {
    tasks
        .iter()
        .map(|t| {
            let mut total = 0.0;
            for s in &t.eval {
                let pred = model.predict(&s.x, Some(t.id))?;
                let diff = pred.sub(&s.y)?;
                total += diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
            }
            Ok(TaskEval {
                task: t.id,
                loss: total / t.eval.len() as f64,
            })
        })
        .collect()
}

pub fn mean_loss(evals: &[TaskEval]) -> f64 {
    evals.iter().map(|e| e.loss).sum::<f64>() / evals.len() as f64
}

/// Generates the suite, trains the configured architecture and evaluates it.
pub fn train_run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let suite = generate_suite(config.suite_params())?;
    let mut model = Model::init(config.model_spec(), &suite.base, config.seed)?;
    let total_steps = config.optimizer.epochs * config.steps_per_epoch();
    let plan = FitPlan {
        epochs: config.optimizer.epochs,
        batch_size: config.optimizer.batch_size,
        adamw: config.adamw(total_steps),
        seed: config.seed,
        select: Trainable::ALL,
    };

    let mut snapshots = capture_snapshots(&model, &suite, 0)?;
    let mut epochs = Vec::with_capacity(plan.epochs);
    let train_loss = fit(&mut model, &suite.tasks, &plan, |m, epoch, step| {
        let eval = evaluate(m, &suite.tasks)?;
        epochs.push(EpochRecord {
            epoch,
            step,
            mean_train_loss: 0.0,
            mean_eval_loss: mean_loss(&eval),
            eval,
        });
        snapshots.extend(capture_snapshots(m, &suite, step)?);
        Ok(())
    })?;
    for (rec, chunk) in epochs.iter_mut().zip(train_loss.chunks(config.steps_per_epoch())) {
        rec.mean_train_loss = chunk.iter().sum::<f64>() / chunk.len() as f64;
    }

    let final_eval = evaluate(&model, &suite.tasks)?;
    let report = RunReport {
        config: config.clone(),
        suite_checksum: suite.checksum(),
        trainable_params: model.trainable_param_count(),
        total_steps,
        train_loss,
        epochs,
        mean_eval_loss: mean_loss(&final_eval),
        final_eval,
        snapshots,
    };
    Ok(RunOutcome { report, model, suite })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl TransferSettings {
    pub fn from_config(config: &RunConfig, epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: config.optimizer.batch_size,
            lr_max: config.optimizer.lr_max,
            warmup_ratio: config.optimizer.warmup_ratio,
            seed: config.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub protocol: String,
    pub n_shot: usize,
    pub adapted_params: usize,
    pub before: Vec<TaskEval>,
    pub after: Vec<TaskEval>,
    pub mean_before: f64,
    pub mean_after: f64,
}

/// Freezes base and skills, fine-tunes only routing parameters on the few-shot
/// train samples of `new_suite`, then scores its eval samples.
///
/// New task ids must lie beyond the ids the model was trained on. A task-id router
/// gains zero-initialized rows for them. Architectures without trainable routing
/// are evaluated unchanged.
pub fn evaluate_transfer(model: &Model, new_suite: &SyntheticTaskSuite, settings: &TransferSettings) -> Result<(Model, TransferReport)> {
    let trained = model.spec.real_tasks;
    if let Some(t) = new_suite.tasks.iter().find(|t| t.id < trained) {
        return Err(Error::contract(format!(
            "transfer task id {} overlaps the {trained} training tasks",
            t.id
        )));
    }
    if new_suite.base.len() != model.layers.len() || new_suite.base.iter().zip(&model.layers).any(|(b, l)| *b != l.w0) {
        return Err(Error::contract("transfer suite was generated over a different base"));
    }
    let mut adapted = model.clone();
    let needed = new_suite.tasks.iter().map(|t| t.id + 1).max().unwrap_or(0);
    for layer in &mut adapted.layers {
        if let Router::TaskId(r) = &mut layer.router {
            let (rows, cols) = (r.table.rows(), r.table.cols());
            if needed > rows {
                let mut data = r.table.data().to_vec();
                data.resize(needed * cols, 0.0);
                r.table = Tensor::matrix(needed, cols, data)?;
            }
        }
    }
    if adapted.spec.arch == crate::model::Architecture::TaskId {
        adapted.spec.real_tasks = adapted.spec.real_tasks.max(needed);
    }

    let before = evaluate(&adapted, &new_suite.tasks)?;
    let n_shot = new_suite.tasks.iter().map(|t| t.train.len()).min().unwrap_or(0);
    let adapted_params: usize = adapted.trainable_mut(Trainable::ROUTER_ONLY).iter().map(|t| t.len()).sum();
    if n_shot > 0 && adapted_params > 0 && settings.epochs > 0 {
        let samples: usize = new_suite.tasks.iter().map(|t| t.train.len()).sum();
        let plan = FitPlan {
            epochs: settings.epochs,
            batch_size: settings.batch_size,
            adamw: AdamWConfig {
                lr_max: settings.lr_max,
                warmup_ratio: settings.warmup_ratio,
                ..AdamWConfig::new(settings.epochs * samples.div_ceil(settings.batch_size))
            },
            seed: settings.seed,
            select: Trainable::ROUTER_ONLY,
        };
        fit(&mut adapted, &new_suite.tasks, &plan, |_, _, _| Ok(()))?;
    }
    let after = evaluate(&adapted, &new_suite.tasks)?;
    let report = TransferReport {
        protocol: TRANSFER_PROTOCOL.into(),
        n_shot,
        adapted_params,
        mean_before: mean_loss(&before),
        mean_after: mean_loss(&after),
        before,
        after,
    };
    Ok((adapted, report))
}
