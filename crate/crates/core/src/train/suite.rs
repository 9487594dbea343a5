//! Synthetic multi-task regression with planted group structure.
//!
//! Every task `t` in group `g` maps tokens through per-layer teachers
//! `w0_l + G_{g,l} + P_{t,l}`: the frozen base, a shared low-rank group map and a
//! small task-specific low-rank perturbation. The first token of every sample is
//! the task's prompt, a `±1` vector equal to its group's prompt with a few
//! coordinates flipped; the remaining tokens are uniform in `[-1, 1]`. The prompt
//! is the only way a router without task ids can tell tasks apart.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const GROUP_RANK: usize = 2;
pub const GROUP_SCALE: f64 = 1.0;
pub const PERTURB_RANK: usize = 1;
pub const PERTURB_SCALE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteParams {
    pub real_tasks: usize,
    pub groups: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub d: usize,
    pub n_tokens: usize,
    pub depth: usize,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `n_tokens × d`
    pub x: Tensor,
    pub y: Tensor,
    pub task: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub id: usize,
    pub group: usize,
    pub prompt: Vec<f64>,
    /// Effective per-layer weights.
    pub teachers: Vec<Tensor>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSuite {
    pub params: SuiteParams,
    /// Frozen per-layer base weights shared by teachers and models.
    pub base: Vec<Tensor>,
    /// `group_maps[g][l]`
    pub group_maps: Vec<Vec<Tensor>>,
    pub group_prompts: Vec<Vec<f64>>,
    pub tasks: Vec<TaskData>,
}

impl SuiteParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.real_tasks == 0 {
            return fail("suite.real_tasks must be >= 1".into());
        }
        if self.groups == 0 || self.groups > self.real_tasks {
            return fail(format!(
                "suite.groups must satisfy 1 <= G <= real_tasks = {}, got {}",
                self.real_tasks, self.groups
            ));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return fail("suite.n_train and suite.n_eval must be >= 1".into());
        }
        if self.d <= GROUP_RANK + PERTURB_RANK || self.n_tokens == 0 || self.depth == 0 {
            return fail(format!(
                "model dims must satisfy d > {}, n_tokens >= 1, depth >= 1",
                GROUP_RANK + PERTURB_RANK
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("suite.noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// `scale · U·Vᵀ / √(rank·d)` with standard normal `U, V`, so that `‖M·x‖² ≈ scale²·‖x‖²/d`.
fn low_rank_map(d: usize, rank: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let u = Tensor::randn(&[d, rank], 1.0, rng);
    let v = Tensor::randn(&[d, rank], 1.0, rng);
    let m = u.matmul(&v.transpose().expect("matrix")).expect("shapes agree");
    m.scale(scale / ((rank * d) as f64).sqrt())
}

fn flip_prompt(base: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p = base.to_vec();
    let flips = (base.len() / 8).max(1);
    let mut idx: Vec<usize> = (0..base.len()).collect();
    idx.shuffle(rng);
    for &i in &idx[..flips] {
        p[i] = -p[i];
    }
    p
}

fn teacher_apply(teachers: &[Tensor], x: &Tensor) -> Tensor {
    teachers.iter().fold(x.clone(), |h, w| {
        h.matmul(&w.transpose().expect("matrix")).expect("shapes agree")
    })
}

fn draw_samples(
    task: usize,
    prompt: &[f64],
    teachers: &[Tensor],
    count: usize,
    p: &SuiteParams,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let noise = Normal::new(0.0, p.noise_std.max(0.0)).expect("valid std");
    (0..count)
        .map(|_| {
            let mut data = prompt.to_vec();
            data.extend((0..(p.n_tokens - 1) * p.d).map(|_| rng.random_range(-1.0..1.0)));
            let x = Tensor::matrix(p.n_tokens, p.d, data).expect("sized");
            let mut y = teacher_apply(teachers, &x);
            if p.noise_std > 0.0 {
                for v in y.data_mut() {
                    *v += noise.sample(rng);
                }
            }
            Sample { x, y, task }
        })
        .collect()
}

/// Deterministic suite; group of task `t` is `t mod G`.
pub fn generate_suite(p: SuiteParams) -> Result<SyntheticTaskSuite> {
    p.validate()?;
    let mut rng = rng::stream(p.seed, Purpose::Suite, 0);
    let base: Vec<Tensor> = (0..p.depth)
        .map(|_| Tensor::randn(&[p.d, p.d], (1.0 / p.d as f64).sqrt(), &mut rng))
        .collect();
    let group_maps: Vec<Vec<Tensor>> = (0..p.groups)
        .map(|_| {
            (0..p.depth)
                .map(|_| low_rank_map(p.d, GROUP_RANK, GROUP_SCALE, &mut rng))
                .collect()
        })
        .collect();
    let group_prompts: Vec<Vec<f64>> = (0..p.groups)
        .map(|_| {
            (0..p.d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let mut suite = SyntheticTaskSuite {
        params: p,
        base,
        group_maps,
        group_prompts,
        tasks: Vec::new(),
    };
    suite.tasks = (0..p.real_tasks)
        .map(|t| {
            let mut trng = rng::stream(p.seed, Purpose::Suite, 1 + t as u64);
            suite.make_task(t, t % p.groups, p.n_train, p.n_eval, &mut trng)
        })
        .collect();
    Ok(suite)
}

impl SyntheticTaskSuite {
    fn make_task(
        &self,
        id: usize,
        group: usize,
        n_train: usize,
        n_eval: usize,
        rng: &mut ChaCha8Rng,
    ) -> TaskData {
        let p = &self.params;
        let teachers: Vec<Tensor> = (0..p.depth)
            .map(|l| {
                let pert = low_rank_map(p.d, PERTURB_RANK, PERTURB_SCALE, rng);
                self.base[l]
                    .add(&self.group_maps[group][l])
                    .and_then(|w| w.add(&pert))
                    .expect("same shape")
            })
            .collect();
        let prompt = flip_prompt(&self.group_prompts[group], rng);
        let train = draw_samples(id, &prompt, &teachers, n_train, p, rng);
        let eval = draw_samples(id, &prompt, &teachers, n_eval, p, rng);
        TaskData {
            id,
            group,
            prompt,
            teachers,
            train,
            eval,
        }
    }

    pub fn groups_of_tasks(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.group).collect()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.id).collect()
    }

    /// New tasks drawn in the existing groups, with ids continuing after this suite's.
    ///
    /// `n_shot` samples per task are available for adaptation, `n_eval` for scoring.
    pub fn unseen_tasks(&self, count: usize, n_shot: usize, n_eval: usize, seed: u64) -> Result<SyntheticTaskSuite> {
        if count == 0 || n_eval == 0 {
            return Err(Error::contract("unseen suite needs at least one task and one eval sample"));
        }
        let first = self.tasks.iter().map(|t| t.id + 1).max().unwrap_or(0);
        let mut out = self.clone();
        out.params.n_train = n_shot;
        out.params.n_eval = n_eval;
        out.tasks = (0..count)
            .map(|i| {
                let id = first + i;
                let mut rng = rng::stream(seed, Purpose::Transfer, id as u64);
                out.make_task(id, id % self.params.groups, n_shot, n_eval, &mut rng)
            })
            .collect();
        Ok(out)
    }

    /// Fresh samples for existing teachers, relabeled with new ids after this suite's.
    pub fn replayed_tasks(&self, source: &[usize], n_shot: usize, n_eval: usize, seed: u64) -> Result<SyntheticTaskSuite> {
        let first = self.tasks.iter().map(|t| t.id + 1).max().unwrap_or(0);
        let mut out = self.clone();
        out.params.n_train = n_shot;
        out.params.n_eval = n_eval;
        out.tasks = source
            .iter()
            .enumerate()
            .map(|(i, &src)| {
                let t = self
                    .tasks
                    .iter()
                    .find(|t| t.id == src)
                    .ok_or(Error::Lookup { id: src, len: self.tasks.len() })?;
                let id = first + i;
                let mut rng = rng::stream(seed, Purpose::Transfer, id as u64);
                Ok(TaskData {
                    id,
                    group: t.group,
                    prompt: t.prompt.clone(),
                    teachers: t.teachers.clone(),
                    train: draw_samples(id, &t.prompt, &t.teachers, n_shot, &self.params, &mut rng),
                    eval: draw_samples(id, &t.prompt, &t.teachers, n_eval, &self.params, &mut rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(out)
    }

    /// Order-sensitive FNV-1a digest over every generated number.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for w in &self.base {
            w.data().iter().for_each(|&v| feed(v));
        }
        for t in &self.tasks {
            t.teachers.iter().flat_map(|w| w.data()).for_each(|&v| feed(v));
            for s in t.train.iter().chain(&t.eval) {
                s.x.data().iter().chain(s.y.data()).for_each(|&v| feed(v));
            }
        }
        h
    }
}
