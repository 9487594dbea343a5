//! The adapted projection: a frozen base weight plus a bank of low-rank skills
//! whose contributions are gated by a router.
//!
//! With the task/skill router, the gate of skill `j` for a sample is
//! `s_j = Σ_i w_i · Ŵ_ij`, where `w` are the sample's abstract-task weights and `Ŵ`
//! the relaxed allocation. Output is `x·w0ᵀ + Σ_j s_j · (x·up_jᵀ)·down_jᵀ`.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::baselines::{self, SharedRouter, TaskIdRouter, TopKRouter};
use crate::error::{Error, Result};
use crate::lora::{self, LoraAdapter};
use crate::skill_router::{self, NoiseStream, SkillAllocation};
use crate::task_router::{self, TaskRouterParams};

/// Standard deviation of the initial allocation logits.
pub const ALLOCATION_INIT_STD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Router {
    /// Attention task router feeding a Gumbel-sigmoid skill allocation.
    Orch {
        task: TaskRouterParams,
        skill: SkillAllocation,
    },
    Shared(SharedRouter),
    TaskId(TaskIdRouter),
    TopK(TopKRouter),
    /// Constant gates, one per skill. Not trainable.
    Fixed(Tensor),
}

impl Router {
    pub fn param_count(&self) -> usize {
        match self {
            Router::Orch { task, skill } => task.param_count() + skill.param_count(),
            Router::Shared(r) => r.weights.len(),
            Router::TaskId(r) => r.table.len(),
            Router::TopK(r) => r.proj.len(),
            Router::Fixed(_) => 0,
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Router::Orch { task, skill } => vec![
                ("task_router.w_task", &task.w_task),
                ("task_router.bias", &task.bias),
                ("skill_router.logits", &skill.logits),
            ],
            Router::Shared(r) => vec![("shared.weights", &r.weights)],
            Router::TaskId(r) => vec![("task_id.table", &r.table)],
            Router::TopK(r) => vec![("topk.proj", &r.proj)],
            Router::Fixed(g) => vec![("fixed.gates", g)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Router::Orch { task, skill } => vec![&mut task.w_task, &mut task.bias, &mut skill.logits],
            Router::Shared(r) => vec![&mut r.weights],
            Router::TaskId(r) => vec![&mut r.table],
            Router::TopK(r) => vec![&mut r.proj],
            Router::Fixed(g) => vec![g],
        }
    }

    fn trainable(&self) -> bool {
        !matches!(self, Router::Fixed(_))
    }
}

/// Role of a parameter tensor within a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    Skill,
    Router,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub skills: bool,
    pub router: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        skills: true,
        router: true,
    };
    pub const ROUTER_ONLY: Trainable = Trainable {
        skills: false,
        router: true,
    };
    pub const SKILLS_ONLY: Trainable = Trainable {
        skills: true,
        router: false,
    };

    fn includes(self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Base => false,
            ParamKind::Skill => self.skills,
            ParamKind::Router => self.router,
        }
    }
}

/// How the skill allocation is realized in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    /// Deterministic `σ(logits)`.
    Eval,
    /// Fresh relaxed sample. `None` is a contract error.
    Train(Option<NoiseStream>),
    /// Relaxed sample with a caller-supplied `T×S` matrix of noise logits.
    FrozenNoise(&'a Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrchMoeLayer {
    /// Frozen `d×d` base projection.
    pub w0: Tensor,
    pub skills: Vec<LoraAdapter>,
    pub router: Router,
}

/// Tape handles for one layer's tensors, in [`OrchMoeLayer::named_params`] order.
#[derive(Clone, Debug)]
pub struct LayerVars {
    vars: Vec<Var>,
    kinds: Vec<ParamKind>,
    requires_grad: Vec<bool>,
}

impl LayerVars {
    pub fn w0(&self) -> Var {
        self.vars[0]
    }

    fn skill(&self, j: usize) -> (Var, Var) {
        (self.vars[1 + 2 * j], self.vars[2 + 2 * j])
    }

    fn router(&self, i: usize) -> Var {
        let skills = self.kinds.iter().filter(|k| **k == ParamKind::Skill).count();
        self.vars[1 + skills + i]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    /// Handles that were bound with gradients enabled, in parameter order.
    pub fn trainable(&self) -> Vec<Var> {
        self.vars
            .iter()
            .zip(&self.requires_grad)
            .filter(|(_, rg)| **rg)
            .map(|(v, _)| *v)
            .collect()
    }
}

/// Values produced by one layer forward.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub out: Var,
    /// `1×S` per-sample gates, or `n×S` per-token gates for top-k routing.
    pub gates: Var,
    pub task_logits: Option<Var>,
    pub task_weights: Option<Var>,
}

impl OrchMoeLayer {
    /// Layer with the task/skill router.
    pub fn init_orch<R: Rng + ?Sized>(
        w0: Tensor,
        skills: usize,
        rank: usize,
        tasks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = check_base(&w0)?;
        if skills == 0 {
            return Err(Error::contract("a layer needs at least one skill"));
        }
        let adapters = (0..skills)
            .map(|_| LoraAdapter::init_with(d, rank, rng))
            .collect::<Result<Vec<_>>>()?;
        let task = TaskRouterParams::init(d, tasks, rng)?;
        let skill = SkillAllocation::init(tasks, skills, ALLOCATION_INIT_STD, rng);
        Self::new(w0, adapters, Router::Orch { task, skill })
    }

    pub fn new(w0: Tensor, skills: Vec<LoraAdapter>, router: Router) -> Result<Self> {
        let d = check_base(&w0)?;
        if skills.is_empty() {
            return Err(Error::contract("a layer needs at least one skill"));
        }
        if let Some(bad) = skills.iter().find(|a| a.dim() != d) {
            return Err(Error::Dimension {
                op: "layer_skills",
                lhs: vec![d, d],
                rhs: vec![bad.dim(), bad.dim()],
            });
        }
        let s = skills.len();
        let router_skills = match &router {
            Router::Orch { task, skill } => {
                if task.hidden() != d || skill.tasks() != task.tasks() {
                    return Err(Error::Dimension {
                        op: "orch_router",
                        lhs: task.w_task.shape().to_vec(),
                        rhs: skill.logits.shape().to_vec(),
                    });
                }
                skill.skills()
            }
            Router::Shared(r) => r.skills(),
            Router::TaskId(r) => r.table.cols(),
            Router::TopK(r) => {
                if r.proj.rows() != d {
                    return Err(Error::Dimension {
                        op: "topk_router",
                        lhs: vec![d],
                        rhs: r.proj.shape().to_vec(),
                    });
                }
                r.skills()
            }
            Router::Fixed(g) => g.len(),
        };
        if router_skills != s {
            return Err(Error::Dimension {
                op: "router_skills",
                lhs: vec![s],
                rhs: vec![router_skills],
            });
        }
        Ok(Self { w0, skills, router })
    }

    pub fn dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn num_skills(&self) -> usize {
        self.skills.len()
    }

    /// Every tensor of the layer with its name and role, base weight first.
    pub fn named_params(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = vec![("w0".to_string(), ParamKind::Base, &self.w0)];
        for (j, a) in self.skills.iter().enumerate() {
            out.push((format!("skill{j}.down"), ParamKind::Skill, &a.down));
            out.push((format!("skill{j}.up"), ParamKind::Skill, &a.up));
        }
        let kind = if self.router.trainable() {
            ParamKind::Router
        } else {
            ParamKind::Base
        };
        for (name, t) in self.router.named() {
            out.push((name.to_string(), kind, t));
        }
        out
    }

    /// Mutable tensors in [`named_params`](Self::named_params) order.
    pub fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut Tensor)> {
        let router_kind = if self.router.trainable() {
            ParamKind::Router
        } else {
            ParamKind::Base
        };
        let mut out = vec![(ParamKind::Base, &mut self.w0)];
        for a in &mut self.skills {
            out.push((ParamKind::Skill, &mut a.down));
            out.push((ParamKind::Skill, &mut a.up));
        }
        for t in self.router.tensors_mut() {
            out.push((router_kind, t));
        }
        out
    }

    /// Mutable tensors selected by `sel`, in the same order as [`LayerVars::trainable`].
    pub fn trainable_mut(&mut self, sel: Trainable) -> Vec<&mut Tensor> {
        self.tensors_mut()
            .into_iter()
            .filter(|(k, _)| sel.includes(*k))
            .map(|(_, t)| t)
            .collect()
    }

    /// `S·2rd` for the skill bank plus the router's own parameters.
    pub fn trainable_param_count(&self) -> usize {
        self.skills.iter().map(LoraAdapter::param_count).sum::<usize>() + self.router.param_count()
    }

    /// Places every tensor on `tape`. The base weight is always a constant.
    pub fn bind(&self, tape: &mut Tape, sel: Trainable) -> LayerVars {
        let mut vars = Vec::new();
        let mut kinds = Vec::new();
        let mut requires_grad = Vec::new();
        for (_, kind, t) in self.named_params() {
            let rg = sel.includes(kind);
            vars.push(tape.leaf(t.clone(), rg));
            kinds.push(kind);
            requires_grad.push(rg);
        }
        LayerVars {
            vars,
            kinds,
            requires_grad,
        }
    }

    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &LayerVars,
        x: Var,
        mode: Mode<'_>,
        task_id: Option<usize>,
    ) -> Result<LayerOutput> {
        let d = self.dim();
        let (n, dx) = tape.value(x).dims2()?;
        if dx != d || tape.value(x).shape().len() != 2 {
            return Err(Error::Dimension {
                op: "layer_forward",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![d, d],
            });
        }
        if n == 0 {
            return Err(Error::contract("layer input has no tokens"));
        }

        let mut task_logits = None;
        let mut task_weights = None;
        let gates = match &self.router {
            Router::Orch { skill, .. } => {
                let (logits, weights) =
                    task_router::route_on(tape, x, vars.router(0), vars.router(1))?;
                task_logits = Some(logits);
                task_weights = Some(weights);
                let alloc_logits = vars.router(2);
                let alloc = match mode {
                    Mode::Eval => skill_router::eval_allocation_on(tape, alloc_logits),
                    Mode::Train(Some(stream)) => {
                        let noise = stream.noise_logits(skill.tasks(), skill.skills());
                        skill_router::sample_allocation_on(tape, alloc_logits, &noise)?
                    }
                    Mode::Train(None) => {
                        return Err(Error::contract("train-mode forward needs a noise stream"))
                    }
                    Mode::FrozenNoise(noise) => {
                        skill_router::sample_allocation_on(tape, alloc_logits, noise)?
                    }
                };
                tape.matmul(weights, alloc)?
            }
            Router::Shared(_) => baselines::shared_gates_on(tape, vars.router(0))?,
            Router::TaskId(r) => {
                let id = task_id
                    .ok_or_else(|| Error::contract("task-id routing needs the sample's task id"))?;
                if id >= r.real_tasks() {
                    return Err(Error::Lookup {
                        id,
                        len: r.real_tasks(),
                    });
                }
                baselines::task_id_gates_on(tape, vars.router(0), id)?
            }
            Router::TopK(r) => baselines::topk_gates_on(tape, x, vars.router(0), r.k)?,
            Router::Fixed(_) => vars.router(0),
        };

        let mut out = tape.matmul_nt(x, vars.w0())?;
        for j in 0..self.skills.len() {
            let (down, up) = vars.skill(j);
            let y = lora::low_rank_apply(tape, x, down, up)?;
            let gated = tape.scale_rows(y, gates, j)?;
            out = tape.add(out, gated)?;
        }
        Ok(LayerOutput {
            out,
            gates,
            task_logits,
            task_weights,
        })
    }

    /// Forward without gradient tracking.
    pub fn forward(&self, x: &Tensor, mode: Mode<'_>, task_id: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, Trainable { skills: false, router: false });
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &vars, xv, mode, task_id)?;
        Ok(tape.value(out.out).clone())
    }

    /// Skill gates for one sample without gradient tracking.
    pub fn gates(&self, x: &Tensor, mode: Mode<'_>, task_id: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, Trainable { skills: false, router: false });
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &vars, xv, mode, task_id)?;
        Ok(tape.value(out.gates).clone())
    }
}

fn check_base(w0: &Tensor) -> Result<usize> {
    match w0.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(Error::contract(format!("base weight must be square, got {s:?}"))),
    }
}

/// `S·2rd + d·T + T + T·S`.
pub fn orch_param_count(d: usize, rank: usize, skills: usize, tasks: usize) -> usize {
    skills * 2 * rank * d + d * tasks + tasks + tasks * skills
}
