//! End-to-end training behavior of the harness.

mod common;

use common::*;
use orchmoe::autodiff::{Tape, Tensor};
use orchmoe::checkpoint::Checkpoint;
use orchmoe::config::RunConfig;
use orchmoe::layer::{Mode, Router, Trainable};
use orchmoe::model::{Architecture, Model};
use orchmoe::rng::{self, Purpose};
use orchmoe::train::harness::{
    batch_gradients, evaluate, fit, mean_loss, mse_on, train_run, evaluate_transfer, FitPlan, TransferSettings,
};
use orchmoe::train::optim::{adamw_step, AdamWConfig, OptimizerState};
use orchmoe::train::suite::{generate_suite, Sample, TaskData};
use rand::seq::SliceRandom;

fn single_task_config() -> RunConfig {
    let mut c = small_config();
    c.router.tasks = 1;
    c.router.skills = 1;
    c.router.rank = 4;
    c.suite.real_tasks = 1;
    c.suite.groups = 1;
    c.suite.n_train = 64;
    c.suite.noise_std = 0.0;
    c
}

/// Tasks whose eval split is their train split.
fn on_train(tasks: &[TaskData]) -> Vec<TaskData> {
    tasks.iter().map(|t| TaskData { eval: t.train.clone(), ..t.clone() }).collect()
}

fn plan_for(c: &RunConfig, select: Trainable) -> FitPlan {
    FitPlan {
        epochs: c.optimizer.epochs,
        batch_size: c.optimizer.batch_size,
        adamw: c.adamw(c.optimizer.epochs * c.steps_per_epoch()),
        seed: c.seed,
        select,
    }
}

#[test]
fn single_task_converges_within_500_steps() {
    let mut c = single_task_config();
    c.optimizer.epochs = 31;
    assert!(c.optimizer.epochs * c.steps_per_epoch() <= 500);
    let suite = generate_suite(c.suite_params()).unwrap();
    let mut model = Model::init(c.model_spec(), &suite.base, c.seed).unwrap();
    let train = on_train(&suite.tasks);
    let initial = mean_loss(&evaluate(&model, &train).unwrap());
    fit(&mut model, &suite.tasks, &plan_for(&c, Trainable::ALL), |_, _, _| Ok(())).unwrap();
    let last = mean_loss(&evaluate(&model, &train).unwrap());
    assert!(last < 0.1 * initial, "initial {initial}, final {last}");
}

#[test]
fn noiseless_single_group_is_representable() {
    let mut c = single_task_config();
    c.optimizer.epochs = 150;
    let out = train_run(&c).unwrap();
    assert!(out.report.mean_eval_loss < 1e-4, "{}", out.report.mean_eval_loss);
}

/// Merged-LoRA training written directly against dense weights.
fn dense_merged_run(c: &RunConfig, w0: &Tensor, gates: &[f64], init: Vec<Tensor>, samples: &[&Sample]) -> Vec<f64> {
    let mut params = init;
    let total = c.optimizer.epochs * c.steps_per_epoch();
    let mut state = OptimizerState::new(c.adamw(total), &params.iter().map(Tensor::len).collect::<Vec<_>>());
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..c.optimizer.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(c.seed, Purpose::Shuffle, epoch as u64));
        for chunk in order.chunks(c.optimizer.batch_size) {
            let mut tape = Tape::new();
            let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
            let mut w = tape.constant(w0.clone());
            for (j, g) in gates.iter().enumerate() {
                let delta = tape.matmul(vars[2 * j], vars[2 * j + 1]).unwrap();
                let scaled = tape.scale(delta, *g);
                w = tape.add(w, scaled).unwrap();
            }
            let mut sum = None;
            for &i in chunk {
                let x = tape.constant(samples[i].x.clone());
                let y = tape.matmul_nt(x, w).unwrap();
                let l = mse_on(&mut tape, y, &samples[i].y).unwrap();
                sum = Some(match sum {
                    None => l,
                    Some(s) => tape.add(s, l).unwrap(),
                });
            }
            let loss = tape.scale(sum.unwrap(), 1.0 / chunk.len() as f64);
            losses.push(tape.value(loss).data()[0]);
            tape.backward(loss).unwrap();
            let grads: Vec<_> = vars.iter().map(|v| tape.grad(*v).cloned()).collect();
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            adamw_step(&mut refs, &grads, &mut state).unwrap();
        }
    }
    losses
}

#[test]
fn fixed_gates_reduce_to_merged_lora_training() {
    let mut c = small_config();
    c.architecture = Architecture::Shared;
    c.optimizer.epochs = 3;
    let suite = generate_suite(c.suite_params()).unwrap();
    let mut model = Model::init(c.model_spec(), &suite.base, c.seed).unwrap();
    let gates = [0.7, 0.3];
    model.layers[0].router = Router::Fixed(Tensor::vector(gates.to_vec()));
    let init: Vec<Tensor> = model.layers[0]
        .skills
        .iter()
        .flat_map(|s| [s.down.clone(), s.up.clone()])
        .collect();

    let harness = fit(&mut model, &suite.tasks, &plan_for(&c, Trainable::ALL), |_, _, _| Ok(())).unwrap();
    let samples: Vec<&Sample> = suite.tasks.iter().flat_map(|t| &t.train).collect();
    let direct = dense_merged_run(&c, &suite.base[0], &gates, init, &samples);

    assert_eq!(harness.len(), direct.len());
    let worst = harness.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "max loss gap {worst}");
}

#[test]
fn identical_configs_give_identical_bytes() {
    let c = small_config();
    let a = train_run(&c).unwrap();
    let b = train_run(&c).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    let step = a.report.total_steps;
    assert_eq!(
        Checkpoint::from_model(&c, &a.model, step).to_bytes(),
        Checkpoint::from_model(&c, &b.model, step).to_bytes()
    );
}

#[test]
fn probe_step_matches_finite_difference_step() {
    let mut c = small_config();
    c.architecture = Architecture::Shared;
    c.router.rank = 2;
    let suite = generate_suite(c.suite_params()).unwrap();
    let mut model = Model::init(c.model_spec(), &suite.base, c.seed).unwrap();
    let mut g = rng(11);
    for s in &mut model.layers[0].skills {
        s.up = uniform(&mut g, s.up.rows(), s.up.cols(), -0.5, 0.5);
    }
    let Router::Shared(r) = &mut model.layers[0].router else { unreachable!() };
    r.weights = Tensor::vector(vec![0.4, -0.3]);
    assert_eq!(model.trainable_mut(Trainable::ROUTER_ONLY).iter().map(|t| t.len()).sum::<usize>(), 2);

    let batch: Vec<&Sample> = suite.tasks.iter().flat_map(|t| t.train.iter().take(2)).collect();
    let (_, grads) = batch_gradients(&model, &batch, c.seed, 0, Trainable::ROUTER_ONLY).unwrap();
    let analytic = grads[0].clone().unwrap();

    let h = 1e-5;
    let mut fd = vec![0.0; 2];
    for (i, slot) in fd.iter_mut().enumerate() {
        let at = |delta: f64| {
            let mut m = model.clone();
            let mut p = m.trainable_mut(Trainable::ROUTER_ONLY);
            let mut data = p[0].data().to_vec();
            data[i] += delta;
            *p[0] = Tensor::vector(data);
            batch_gradients(&m, &batch, c.seed, 0, Trainable::ROUTER_ONLY).unwrap().0
        };
        *slot = (at(h) - at(-h)) / (2.0 * h);
    }

    let adamw = AdamWConfig { warmup_ratio: 0.0, lr_max: 1e-2, weight_decay: 0.1, ..AdamWConfig::new(10) };
    let step_with = |grad: Tensor| {
        let mut m = model.clone();
        let mut p = m.trainable_mut(Trainable::ROUTER_ONLY);
        let mut state = OptimizerState::for_params(adamw, &p);
        let before = p[0].clone();
        adamw_step(&mut p, &[Some(grad)], &mut state).unwrap();
        p[0].sub(&before).unwrap()
    };
    let a = step_with(analytic);
    let b = step_with(Tensor::vector(fd));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() / y.abs().max(1e-12) < 1e-3, "{x} vs {y}");
    }
}

#[test]
fn base_weights_survive_training_bitwise() {
    let mut c = small_config();
    c.optimizer.epochs = 17;
    assert!(c.optimizer.epochs * c.steps_per_epoch() >= 100);
    let suite = generate_suite(c.suite_params()).unwrap();
    let mut model = Model::init(c.model_spec(), &suite.base, c.seed).unwrap();
    let bits = |m: &Model| -> Vec<u64> { m.layers.iter().flat_map(|l| l.w0.data().iter().map(|v| v.to_bits())).collect() };
    let before = bits(&model);
    fit(&mut model, &suite.tasks, &plan_for(&c, Trainable::ALL), |_, _, _| Ok(())).unwrap();
    assert_eq!(before, bits(&model));
    assert!(model.layers[0].skills.iter().any(|s| s.up.data().iter().any(|v| *v != 0.0)));
}

#[test]
fn saved_checkpoint_predicts_identically() {
    let c = small_config();
    let out = train_run(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::from_model(&c, &out.model, out.report.total_steps).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
    for s in out.suite.tasks.iter().flat_map(|t| &t.eval) {
        let a = out.model.predict(&s.x, Some(s.task)).unwrap();
        let b = back.predict(&s.x, Some(s.task)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn replayed_task_transfers_within_ten_percent() {
    let c = RunConfig::desk_default();
    let out = train_run(&c).unwrap();
    let source = [0, 4, 8];
    let replay = out.suite.replayed_tasks(&source, 16, 512, 99).unwrap();
    let (_, report) = evaluate_transfer(&out.model, &replay, &TransferSettings::from_config(&c, 10)).unwrap();
    for (src, after) in source.iter().zip(&report.after) {
        let trained = out.report.final_eval[*src].loss;
        assert!(after.loss <= 1.1 * trained, "task {src}: {} vs {trained}", after.loss);
    }
}

#[test]
fn shared_gate_rises_under_a_loss_that_favors_it() {
    let mut c = small_config();
    c.architecture = Architecture::Shared;
    c.router.skills = 4;
    let suite = generate_suite(c.suite_params()).unwrap();
    let mut model = Model::init(c.model_spec(), &suite.base, c.seed).unwrap();
    let x = suite.tasks[0].train[0].x.clone();
    let gate2 = |m: &Model| m.inspect(&x, None).unwrap()[0].gates.data()[2];
    let before = gate2(&model);
    assert!((before - 0.25).abs() < 1e-15);

    let layer = &model.layers[0];
    let mut tape = Tape::new();
    let vars = layer.bind(&mut tape, Trainable::ROUTER_ONLY);
    let xv = tape.constant(x.clone());
    let o = layer.forward_on(&mut tape, &vars, xv, Mode::Eval, None).unwrap();
    let mask = tape.constant(Tensor::vector(vec![0.0, 0.0, -1.0, 0.0]));
    let picked = tape.mul(o.gates, mask).unwrap();
    let loss = tape.sum(picked);
    tape.backward(loss).unwrap();
    let grads: Vec<_> = vars.trainable().iter().map(|v| tape.grad(*v).cloned()).collect();

    let adamw = AdamWConfig { warmup_ratio: 0.0, ..AdamWConfig::new(1) };
    let mut params = model.trainable_mut(Trainable::ROUTER_ONLY);
    let mut state = OptimizerState::for_params(adamw, &params);
    adamw_step(&mut params, &grads, &mut state).unwrap();
    assert!(gate2(&model) > before);
}

#[test]
fn task_id_rows_split_after_two_distinct_tasks() {
    let mut c = small_config();
    c.architecture = Architecture::TaskId;
    c.router.skills = 2;
    c.suite.real_tasks = 2;
    c.suite.groups = 2;
    c.suite.n_train = 32;
    c.optimizer.epochs = 20;
    let out = train_run(&c).unwrap();
    let Router::TaskId(r) = &out.model.layers[0].router else { unreachable!() };
    let argmax = |row: &[f64]| (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    assert_ne!(argmax(r.table.row(0)), argmax(r.table.row(1)), "{:?}", r.table);
}
