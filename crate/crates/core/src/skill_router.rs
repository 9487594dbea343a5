//! Task→skill allocation logits relaxed to `(0, 1)` with Gumbel-sigmoid noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels::sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform draws are clamped to `[U_CLAMP, 1 − U_CLAMP]` before taking their logit.
pub const U_CLAMP: f64 = 1e-7;

/// Learnable `T×S` allocation logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SkillAllocation {
    pub logits: Tensor,
}

impl SkillAllocation {
    pub fn new(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 2 {
            return Err(Error::contract(format!("allocation logits must be T×S, got {:?}", logits.shape())));
        }
        Ok(Self { logits })
    }

    /// Logits drawn from `N(0, std²)`.
    pub fn init<R: Rng + ?Sized>(tasks: usize, skills: usize, std: f64, rng: &mut R) -> Self {
        Self {
            logits: Tensor::randn(&[tasks, skills], std, rng),
        }
    }

    pub fn tasks(&self) -> usize {
        self.logits.rows()
    }

    pub fn skills(&self) -> usize {
        self.logits.cols()
    }

    pub fn param_count(&self) -> usize {
        self.logits.len()
    }
}

/// `σ(log[σ(w)·u / ((1 − σ(w))·(1 − u))])`.
///
/// The log-odds of `σ(w)` is evaluated as `log σ(w) − log(1 − σ(w))` with both terms
/// computed through softplus so the expression stays finite for large `|w|`.
pub fn gumbel_sigmoid(w: f64, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::contract(format!("gumbel_sigmoid needs u in (0, 1), got {u}")));
    }
    if !w.is_finite() {
        return Err(Error::contract(format!("gumbel_sigmoid needs a finite logit, got {w}")));
    }
    let log_p = -softplus(-w);
    let log_q = -softplus(w);
    Ok(sigmoid(log_p + u.ln() - log_q - (1.0 - u).ln()))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(u / (1 − u))` after clamping `u`.
pub fn noise_logit(u: f64) -> f64 {
    let u = u.clamp(U_CLAMP, 1.0 - U_CLAMP);
    (u / (1.0 - u)).ln()
}

/// Counter-addressed uniform noise for one `(layer, step, sample)` triple.
///
/// Entry `(t, s)` always reads the same position of the stream, so draws do not
/// depend on evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
    pub layer: u16,
    pub step: u32,
    pub sample: u16,
}

impl NoiseStream {
    pub fn new(seed: u64, layer: usize, step: usize, sample: usize) -> Self {
        Self {
            seed,
            layer: layer as u16,
            step: step as u32,
            sample: sample as u16,
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6e6f_6973_655f_7331);
        rng.set_stream(((self.step as u64) << 32) | ((self.sample as u64) << 16) | self.layer as u64);
        rng
    }

    /// Uniform draw in `[0, 1)` for entry `index`.
    pub fn uniform_at(&self, index: usize) -> f64 {
        let mut rng = self.rng();
        rng.set_word_pos(2 * index as u128);
        rng.random::<f64>()
    }

    /// `T×S` matrix of `logit(u)` values.
    pub fn noise_logits(&self, tasks: usize, skills: usize) -> Tensor {
        let mut rng = self.rng();
        let data = (0..tasks * skills)
            .map(|i| {
                rng.set_word_pos(2 * i as u128);
                noise_logit(rng.random::<f64>())
            })
            .collect();
        Tensor::new(vec![tasks, skills], data).expect("positive dims")
    }
}

/// Relaxed sample `σ(logits + logit(u))` on the tape; gradients reach the logits.
pub fn sample_allocation_on(tape: &mut Tape, logits: Var, noise_logits: &Tensor) -> Result<Var> {
    let shifted = tape.add_const(logits, noise_logits)?;
    Ok(tape.sigmoid(shifted))
}

pub fn eval_allocation_on(tape: &mut Tape, logits: Var) -> Var {
    tape.sigmoid(logits)
}

pub fn sample_allocation(alloc: &SkillAllocation, stream: &NoiseStream) -> Tensor {
    let noise = stream.noise_logits(alloc.tasks(), alloc.skills());
    let shifted = alloc.logits.add(&noise).expect("same shape");
    shifted.map(sigmoid)
}

/// Deterministic `σ(logits)`.
pub fn eval_allocation(alloc: &SkillAllocation) -> Tensor {
    alloc.logits.map(sigmoid)
}

/// `1` where `σ(logit) > 0.5`, else `0`. For visualization only.
pub fn hard_allocation(alloc: &SkillAllocation) -> Tensor {
    alloc.logits.map(|w| if sigmoid(w) > 0.5 { 1.0 } else { 0.0 })
}
