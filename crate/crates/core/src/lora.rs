//! Low-rank adapters: `ΔW = down · up` with `down: d×r`, `up: r×d`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One skill module.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub down: Tensor,
    pub up: Tensor,
}

impl LoraAdapter {
    /// `down ~ N(0, 1/d)`, `up = 0`: the update starts at exactly zero.
    pub fn init(d: usize, r: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(d, r, &mut rng)
    }

    pub fn init_with<R: rand::Rng + ?Sized>(d: usize, r: usize, rng: &mut R) -> Result<Self> {
        if r == 0 || r >= d {
            return Err(Error::contract(format!("adapter rank must satisfy 1 <= r < d, got r = {r}, d = {d}")));
        }
        Ok(Self {
            down: Tensor::randn(&[d, r], (1.0 / d as f64).sqrt(), rng),
            up: Tensor::zeros(&[r, d]),
        })
    }

    pub fn from_factors(down: Tensor, up: Tensor) -> Result<Self> {
        let (d, r) = down.dims2()?;
        let (r2, d2) = up.dims2()?;
        if r != r2 || d != d2 || down.shape().len() != 2 || up.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "lora_factors",
                lhs: down.shape().to_vec(),
                rhs: up.shape().to_vec(),
            });
        }
        if r >= d {
            return Err(Error::contract(format!("adapter rank must satisfy r < d, got r = {r}, d = {d}")));
        }
        Ok(Self { down, up })
    }

    pub fn dim(&self) -> usize {
        self.down.rows()
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim() * self.rank()
    }

    /// Dense `d×d` update. Only for analysis and oracles; forward passes never build it.
    pub fn delta(&self) -> Tensor {
        self.down.matmul(&self.up).expect("factor shapes validated at construction")
    }
}

/// `x·w0ᵀ + (x·upᵀ)·downᵀ`, equal to `x·(w0 + ΔW)ᵀ`.
pub fn lora_forward(x: &Tensor, w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w0v = tape.constant(w0.clone());
    let down = tape.constant(adapter.down.clone());
    let up = tape.constant(adapter.up.clone());
    let out = lora_forward_on(&mut tape, xv, w0v, down, up)?;
    Ok(tape.value(out).clone())
}

/// Tape form of [`lora_forward`].
pub fn lora_forward_on(tape: &mut Tape, x: Var, w0: Var, down: Var, up: Var) -> Result<Var> {
    let base = tape.matmul_nt(x, w0)?;
    let low = low_rank_apply(tape, x, down, up)?;
    tape.add(base, low)
}

/// `(x·upᵀ)·downᵀ`: two skinny products, `O(n·r·d)`.
pub fn low_rank_apply(tape: &mut Tape, x: Var, down: Var, up: Var) -> Result<Var> {
    let h = tape.matmul_nt(x, up)?;
    tape.matmul_nt(h, down)
}

/// Dense `ΔW = Σᵢ wᵢ · downᵢ · upᵢ`.
pub fn merge_adapters(adapters: &[LoraAdapter], weights: &[f64]) -> Result<Tensor> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::contract("merge_adapters needs at least one adapter"))?;
    if adapters.len() != weights.len() {
        return Err(Error::Dimension {
            op: "merge_adapters",
            lhs: vec![adapters.len()],
            rhs: vec![weights.len()],
        });
    }
    let d = first.dim();
    let mut acc = Tensor::zeros(&[d, d]);
    for (a, &w) in adapters.iter().zip(weights) {
        if a.dim() != d {
            return Err(Error::Dimension {
                op: "merge_adapters",
                lhs: vec![d, d],
                rhs: vec![a.dim(), a.dim()],
            });
        }
        acc = acc.add(&a.delta().scale(w))?;
    }
    Ok(acc)
}
