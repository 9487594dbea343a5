//! Registered finite-difference checks for every differentiable op and the full layer.
//!
//! Each check builds a graph from its input tensors, reduces the output with a fixed
//! random projection `Σ out ⊙ R`, and compares tape gradients against central
//! differences for every input.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_grad, max_relative_error, Fault, Tape, Tensor, Var};
use crate::baselines::{shared_gates_on, task_id_gates_on, topk_gates_on};
use crate::error::{Error, Result};
use crate::layer::{Mode, OrchMoeLayer, Trainable};
use crate::lora::lora_forward_on;
use crate::model::{Architecture, Model, ModelMode, ModelSpec};
use crate::rng::{self, Purpose};
use crate::skill_router::{sample_allocation_on, NoiseStream};
use crate::task_router::{attention_mix_on, route_on};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const SEED: u64 = 0x6772_6164;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Places `inputs` on a tape, returning the output and the handle of each input.
type Build<'a> = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)> + 'a>;

struct Check<'a> {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build<'a>,
}

fn params(tape: &mut Tape, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| tape.param(t.clone())).collect()
}

/// Check over plain op inputs: every input becomes a parameter.
fn op<'a>(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a,
) -> Check<'a> {
    Check {
        name,
        inputs,
        build: Box::new(move |tape, xs| {
            let vars = params(tape, xs);
            Ok((f(tape, &vars)?, vars))
        }),
    }
}

fn projected(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

fn run(check: &Check<'_>, fault: Option<Fault>, sub: u64) -> Result<f64> {
    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let (out, vars) = (check.build)(&mut tape, &check.inputs)?;
    let mut rng = rng::stream(SEED, Purpose::Noise, sub);
    let r = Tensor::uniform(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let loss = projected(&mut tape, out, &r)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .cloned()
            .ok_or_else(|| Error::contract(format!("{}: input {i} received no gradient", check.name)))?;
        let numeric = finite_diff_grad(
            |t| {
                let mut xs = check.inputs.clone();
                xs[i] = t.clone();
                let mut probe = Tape::new();
                let (o, _) = (check.build)(&mut probe, &xs)?;
                let l = projected(&mut probe, o, &r)?;
                Ok(probe.value(l).data()[0])
            },
            &check.inputs[i],
            STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn orch_layer<R: Rng + ?Sized>(rng: &mut R) -> Result<OrchMoeLayer> {
    let (d, tasks, skills, rank) = (6, 3, 3, 2);
    let mut layer = OrchMoeLayer::init_orch(Tensor::randn(&[d, d], 0.4, rng), skills, rank, tasks, rng)?;
    for t in layer.trainable_mut(Trainable::ALL) {
        *t = Tensor::randn(t.shape(), 0.5, rng);
    }
    Ok(layer)
}

/// Layer check whose inputs are the trainable tensors followed by the tokens.
fn layer_check<'a>(name: &'static str, layer: OrchMoeLayer, x: Tensor, mode: Mode<'a>) -> Check<'a> {
    let mut inputs: Vec<Tensor> = layer.clone().trainable_mut(Trainable::ALL).into_iter().map(|t| t.clone()).collect();
    inputs.push(x);
    Check {
        name,
        inputs,
        build: Box::new(move |tape, xs| {
            let mut l = layer.clone();
            for (slot, v) in l.trainable_mut(Trainable::ALL).into_iter().zip(xs) {
                *slot = v.clone();
            }
            let lv = l.bind(tape, Trainable::ALL);
            let x = tape.param(xs.last().expect("tokens").clone());
            let out = l.forward_on(tape, &lv, x, mode, Some(0))?;
            let mut vars = lv.trainable();
            vars.push(x);
            Ok((out.out, vars))
        }),
    }
}

fn registry<'a>(noise: &'a Tensor) -> Result<Vec<Check<'a>>> {
    let mut rng = rng::stream(SEED, Purpose::Init, 0);
    let mut m = |r: usize, c: usize| Tensor::randn(&[r, c], 1.0, &mut rng);
    let (a, b, c) = (m(3, 4), m(4, 2), m(3, 4));
    let (row, wide, gates) = (m(1, 4), m(2, 5), m(3, 3));
    let (sq, tokens, proj) = (m(3, 3), m(4, 5), m(5, 4));
    let (ld, lu, w0) = (m(5, 2), m(2, 5), m(5, 5));
    let (w_task, bias, table) = (m(5, 3), m(1, 3), m(3, 4));
    let shared = m(1, 4);
    let alloc = m(3, 3);
    let alloc_noise = m(3, 3);
    let offset = m(3, 4);
    // well separated so no finite-difference probe crosses a selection boundary
    let spread = Tensor::from_rows(&[vec![0.1, 2.0, -1.3, 0.9, 3.1], vec![-0.4, 1.7, 2.6, -2.0, 0.5]])?;
    let model_x = m(3, 4);
    let layer_x = m(4, 6);
    let mut lrng = rng::stream(SEED, Purpose::Init, 1);
    let layer = orch_layer(&mut lrng)?;
    let frozen_layer = layer.clone();
    let model = {
        let spec = ModelSpec {
            arch: Architecture::Orchmoe,
            d: 4,
            depth: 2,
            tasks: 2,
            skills: 2,
            rank: 2,
            k: 1,
            real_tasks: 2,
        };
        let base = vec![m(4, 4), m(4, 4)];
        let mut model = Model::init(spec, &base, 3)?;
        let mut prng = rng::stream(SEED, Purpose::Init, 2);
        for t in model.trainable_mut(Trainable::ALL) {
            *t = Tensor::randn(t.shape(), 0.5, &mut prng);
        }
        model
    };
    let model_inputs: Vec<Tensor> = {
        let mut mm = model.clone();
        let mut v: Vec<Tensor> = mm.trainable_mut(Trainable::ALL).into_iter().map(|t| t.clone()).collect();
        v.push(model_x);
        v
    };

    Ok(vec![
        op("matmul", vec![a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1])),
        op("matmul_nt", vec![a.clone(), c.clone()], |t, v| t.matmul_nt(v[0], v[1])),
        op("add", vec![a.clone(), c.clone()], |t, v| t.add(v[0], v[1])),
        op("sub", vec![a.clone(), c.clone()], |t, v| t.sub(v[0], v[1])),
        op("mul", vec![a.clone(), c.clone()], |t, v| t.mul(v[0], v[1])),
        op("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7))),
        op("add_const", vec![a.clone()], move |t, v| t.add_const(v[0], &offset)),
        op("add_row", vec![a.clone(), row], |t, v| t.add_row(v[0], v[1])),
        op("sum", vec![a.clone()], |t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)
        }),
        op("mean", vec![a.clone()], |t, v| {
            let s = t.mean(v[0]);
            t.mul(s, s)
        }),
        op("mean_rows", vec![a.clone()], |t, v| t.mean_rows(v[0])),
        op("softmax_rows", vec![wide.clone()], |t, v| t.softmax_rows(v[0])),
        op("sigmoid", vec![wide], |t, v| Ok(t.sigmoid(v[0]))),
        op("scale_rows", vec![sq.clone(), gates.clone()], |t, v| t.scale_rows(v[0], v[1], 1)),
        op("scale_rows_broadcast", vec![sq, gates.clone()], |t, v| {
            let g = t.select_row(v[1], 2)?;
            t.scale_rows(v[0], g, 0)
        }),
        op("topk_softmax_rows", vec![spread], |t, v| t.topk_softmax_rows(v[0], 3)),
        op("select_row", vec![a.clone()], |t, v| t.select_row(v[0], 1)),
        op("lora_forward", vec![tokens.clone(), w0, ld, lu], |t, v| lora_forward_on(t, v[0], v[1], v[2], v[3])),
        op("attention_mix", vec![tokens.clone()], |t, v| attention_mix_on(t, v[0])),
        op("task_router", vec![tokens.clone(), w_task, bias], |t, v| Ok(route_on(t, v[0], v[1], v[2])?.1)),
        op("skill_allocation_sample", vec![alloc], move |t, v| sample_allocation_on(t, v[0], &alloc_noise)),
        op("shared_gates", vec![shared], |t, v| shared_gates_on(t, v[0])),
        op("task_id_gates", vec![table], |t, v| task_id_gates_on(t, v[0], 2)),
        op("topk_gates", vec![tokens, proj], |t, v| topk_gates_on(t, v[0], v[1], 2)),
        layer_check("orch_layer_eval", layer, layer_x.clone(), Mode::Eval),
        layer_check("orch_layer_frozen_noise", frozen_layer, layer_x, Mode::FrozenNoise(noise)),
        Check {
            name: "model_train_depth2",
            inputs: model_inputs,
            build: Box::new(move |tape, xs| {
                let mut mm = model.clone();
                for (slot, v) in mm.trainable_mut(Trainable::ALL).into_iter().zip(xs) {
                    *slot = v.clone();
                }
                let lv = mm.bind(tape, Trainable::ALL);
                let x = tape.param(xs.last().expect("tokens").clone());
                let mode = ModelMode::Train { seed: 11, step: 4, sample: 1 };
                let (out, _) = mm.forward_on(tape, &lv, x, mode, None)?;
                let mut vars = Model::trainable_vars(&lv);
                vars.push(x);
                Ok((out, vars))
            }),
        },
    ])
}

/// Frozen noise logits for the `T×S` allocation of the registered layer.
fn layer_noise() -> Tensor {
    NoiseStream::new(SEED, 0, 7, 2).noise_logits(3, 3)
}

/// Runs every registered check. A fault, when given, is injected into each tape.
pub fn run_all(fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let noise = layer_noise();
    let checks = registry(&noise)?;
    let mut out = Vec::with_capacity(checks.len());
    for (i, c) in checks.iter().enumerate() {
        let err = run(c, fault, i as u64)?;
        out.push(CheckResult {
            name: c.name.to_string(),
            max_rel_err: err,
            passed: err < TOLERANCE,
        });
    }
    Ok(out)
}

/// Names of the registered checks, in run order.
pub fn check_names() -> Vec<&'static str> {
    let noise = layer_noise();
    let checks = registry(&noise).expect("registry builds");
    checks.iter().map(|c| c.name).collect()
}
