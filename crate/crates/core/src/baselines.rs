//! Comparison routing regimes over the same skill bank.
//!
//! All gates are softmax-normalized so that, at matched parameter counts, the
//! regimes differ only in what the routing depends on.

use rand::Rng;

use crate::autodiff::{top_k_indices, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Input-independent learnable gates shared by every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedRouter {
    /// `[S]`
    pub weights: Tensor,
}

/// One gate row per ground-truth task id.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskIdRouter {
    /// `T_real × S`
    pub table: Tensor,
}

/// Per-token single-layer projection with top-k sparsification.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKRouter {
    /// `d × S`
    pub proj: Tensor,
    pub k: usize,
}

impl SharedRouter {
    pub fn new(skills: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[skills]),
        }
    }

    pub fn skills(&self) -> usize {
        self.weights.len()
    }
}

impl TaskIdRouter {
    pub fn new(real_tasks: usize, skills: usize) -> Self {
        Self {
            table: Tensor::zeros(&[real_tasks, skills]),
        }
    }

    pub fn real_tasks(&self) -> usize {
        self.table.rows()
    }
}

impl TopKRouter {
    pub fn init<R: Rng + ?Sized>(d: usize, skills: usize, k: usize, rng: &mut R) -> Result<Self> {
        check_k(k, skills)?;
        Ok(Self {
            proj: Tensor::randn(&[d, skills], (1.0 / d as f64).sqrt(), rng),
            k,
        })
    }

    pub fn new(proj: Tensor, k: usize) -> Result<Self> {
        check_k(k, proj.cols())?;
        Ok(Self { proj, k })
    }

    pub fn skills(&self) -> usize {
        self.proj.cols()
    }
}

fn check_k(k: usize, skills: usize) -> Result<()> {
    if k == 0 || k > skills {
        return Err(Error::contract(format!("top-k needs 1 <= k <= S = {skills}, got k = {k}")));
    }
    Ok(())
}

pub fn shared_gates_on(tape: &mut Tape, weights: Var) -> Result<Var> {
    tape.softmax_rows(weights)
}

pub fn task_id_gates_on(tape: &mut Tape, table: Var, task_id: usize) -> Result<Var> {
    let row = tape.select_row(table, task_id)?;
    tape.softmax_rows(row)
}

/// `n×S` gates for an `n×d` token matrix.
pub fn topk_gates_on(tape: &mut Tape, x: Var, proj: Var, k: usize) -> Result<Var> {
    let logits = tape.matmul(x, proj)?;
    tape.topk_softmax_rows(logits, k)
}

pub fn shared_route(router: &SharedRouter) -> Tensor {
    let mut tape = Tape::new();
    let w = tape.constant(router.weights.clone());
    let g = shared_gates_on(&mut tape, w).expect("vector input");
    tape.value(g).clone()
}

pub fn task_id_route(router: &TaskIdRouter, task_id: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(router.table.clone());
    let g = task_id_gates_on(&mut tape, t, task_id)?;
    tape.value(g).reshape(&[router.table.cols()])
}

pub fn topk_route(router: &TopKRouter, token: &Tensor) -> Result<Tensor> {
    check_k(router.k, router.skills())?;
    let logits = token.reshape(&[1, token.len()])?.matmul(&router.proj)?;
    topk_from_logits(logits.data(), router.k)
}

/// Keep the `k` largest logits (lowest index wins ties), softmax over them, zero elsewhere.
pub fn topk_from_logits(logits: &[f64], k: usize) -> Result<Tensor> {
    check_k(k, logits.len())?;
    let kept = top_k_indices(logits, k);
    let max = kept.iter().map(|&j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = kept.iter().map(|&j| (logits[j] - max).exp()).sum();
    let mut out = vec![0.0; logits.len()];
    for &j in &kept {
        out[j] = (logits[j] - max).exp() / total;
    }
    Ok(Tensor::vector(out))
}
