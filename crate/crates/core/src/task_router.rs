//! Per-sample abstract-task weights from token inputs.
//!
//! `X̂ = softmax(X·Xᵀ/√d_k)·X + X`, mean-pooled over tokens, then an affine head
//! `W_taskᵀ·x̄ + bias` and a softmax over the `T` abstract tasks.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRouterParams {
    /// `d_k × T`
    pub w_task: Tensor,
    /// `[T]`
    pub bias: Tensor,
}

impl TaskRouterParams {
    /// `W_task ~ N(0, 1/d_k)`, zero bias.
    pub fn init<R: Rng + ?Sized>(d_k: usize, tasks: usize, rng: &mut R) -> Result<Self> {
        if d_k == 0 || tasks == 0 {
            return Err(Error::contract(format!(
                "task router needs d_k >= 1 and T >= 1, got d_k = {d_k}, T = {tasks}"
            )));
        }
        Ok(Self {
            w_task: Tensor::randn(&[d_k, tasks], (1.0 / d_k as f64).sqrt(), rng),
            bias: Tensor::zeros(&[tasks]),
        })
    }

    pub fn new(w_task: Tensor, bias: Tensor) -> Result<Self> {
        let (_, t) = w_task.dims2()?;
        if w_task.shape().len() != 2 || bias.shape() != [t] {
            return Err(Error::Dimension {
                op: "task_router",
                lhs: w_task.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self { w_task, bias })
    }

    pub fn hidden(&self) -> usize {
        self.w_task.rows()
    }

    pub fn tasks(&self) -> usize {
        self.w_task.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_task.len() + self.bias.len()
    }
}

/// Parameter-free self-attention mix with residual.
pub fn attention_mix_on(tape: &mut Tape, x: Var) -> Result<Var> {
    let d_k = tape.value(x).cols();
    let scores = tape.matmul_nt(x, x)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let attn = tape.softmax_rows(scaled)?;
    let mixed = tape.matmul(attn, x)?;
    tape.add(mixed, x)
}

/// Mean-pool over tokens, then `x̄ · W_task + bias`, as a `1×T` row.
pub fn task_logits_on(tape: &mut Tape, x_hat: Var, w_task: Var, bias: Var) -> Result<Var> {
    let pooled = tape.mean_rows(x_hat)?;
    let lin = tape.matmul(pooled, w_task)?;
    tape.add_row(lin, bias)
}

pub fn task_weights_on(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.softmax_rows(logits)
}

/// Logits and weights for one sample, both `1×T`.
pub fn route_on(tape: &mut Tape, x: Var, w_task: Var, bias: Var) -> Result<(Var, Var)> {
    let x_hat = attention_mix_on(tape, x)?;
    let logits = task_logits_on(tape, x_hat, w_task, bias)?;
    let weights = task_weights_on(tape, logits)?;
    Ok((logits, weights))
}

pub fn attention_mix(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = attention_mix_on(&mut tape, xv)?;
    Ok(tape.value(out).clone())
}

/// `[T]` logits for a mixed token matrix.
pub fn task_logits(x_hat: &Tensor, params: &TaskRouterParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x_hat.clone());
    let w = tape.constant(params.w_task.clone());
    let b = tape.constant(params.bias.clone());
    let out = task_logits_on(&mut tape, xv, w, b)?;
    tape.value(out).reshape(&[params.tasks()])
}

/// Softmax over `[T]` logits.
pub fn task_weights(logits: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = task_weights_on(&mut tape, l)?;
    tape.value(out).reshape(logits.shape())
}
