//! A stack of adapted projections and the architectures compared by the harness.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::baselines::{SharedRouter, TaskIdRouter, TopKRouter};
use crate::error::{Error, Result};
use crate::layer::{LayerOutput, LayerVars, Mode, OrchMoeLayer, Router, Trainable};
use crate::lora::LoraAdapter;
use crate::rng::{self, Purpose};
use crate::skill_router::NoiseStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Attention task router plus Gumbel-sigmoid skill allocation.
    Orchmoe,
    /// A single adapter with a constant unit gate.
    Lora,
    /// Per-token top-k routing over the skill bank.
    MoeLoraTopk,
    /// One learnable gate row per ground-truth task id.
    TaskId,
    /// One learnable gate vector for all inputs.
    Shared,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Orchmoe,
        Architecture::Lora,
        Architecture::MoeLoraTopk,
        Architecture::TaskId,
        Architecture::Shared,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Orchmoe => "orchmoe",
            Architecture::Lora => "lora",
            Architecture::MoeLoraTopk => "moe-lora-topk",
            Architecture::TaskId => "task-id",
            Architecture::Shared => "shared",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of a model, independent of its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub d: usize,
    pub depth: usize,
    /// Abstract task count `T` (task/skill router only).
    pub tasks: usize,
    pub skills: usize,
    pub rank: usize,
    /// Experts kept per token (top-k router only).
    pub k: usize,
    /// Ground-truth task count (task-id router only).
    pub real_tasks: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d < 2 {
            return bad(format!("model.d must be >= 2, got {}", self.d));
        }
        if self.depth == 0 {
            return bad("model.depth must be >= 1".into());
        }
        if self.rank == 0 || self.rank >= self.d {
            return bad(format!("router.rank must satisfy 1 <= r < d = {}, got {}", self.d, self.rank));
        }
        if self.skills == 0 {
            return bad("router.skills must be >= 1".into());
        }
        match self.arch {
            Architecture::Orchmoe if self.tasks == 0 => bad("router.tasks must be >= 1".into()),
            Architecture::Lora if self.skills != 1 => {
                bad(format!("architecture lora uses exactly one adapter, got router.skills = {}", self.skills))
            }
            Architecture::MoeLoraTopk if self.k == 0 || self.k > self.skills => bad(format!(
                "router.k must satisfy 1 <= k <= skills = {}, got {}",
                self.skills, self.k
            )),
            Architecture::TaskId if self.real_tasks == 0 => bad("suite.real_tasks must be >= 1".into()),
            _ => Ok(()),
        }
    }

    pub fn router_params_per_layer(&self) -> usize {
        match self.arch {
            Architecture::Orchmoe => self.d * self.tasks + self.tasks + self.tasks * self.skills,
            Architecture::Lora => 0,
            Architecture::MoeLoraTopk => self.d * self.skills,
            Architecture::TaskId => self.real_tasks * self.skills,
            Architecture::Shared => self.skills,
        }
    }

    /// Trainable parameters across all layers.
    pub fn trainable_param_count(&self) -> usize {
        self.depth * (self.skills * 2 * self.rank * self.d + self.router_params_per_layer())
    }
}

/// Relative gap between two parameter counts, measured against `reference`.
pub fn param_gap(count: usize, reference: usize) -> f64 {
    (count as f64 - reference as f64).abs() / reference.max(1) as f64
}

/// Picks skill count and rank for `arch` so its trainable parameters come within
/// `tolerance` of `target`'s.
///
/// Among skill counts up to `2·target.skills` (one for `lora`) that can land within
/// `tolerance`, the one nearest `target.skills` wins, with its best rank. Without any
/// such count the smallest gap wins.
pub fn match_params(target: &ModelSpec, arch: Architecture, tolerance: f64) -> ModelSpec {
    let goal = target.trainable_param_count();
    let candidate = |skills: usize, rank: usize| ModelSpec {
        arch,
        skills,
        rank,
        k: target.k.min(skills).max(1),
        ..*target
    };
    if arch == target.arch {
        return *target;
    }
    let gap = |s: &ModelSpec| param_gap(s.trainable_param_count(), goal);
    let skill_range: Vec<usize> = match arch {
        Architecture::Lora => vec![1],
        _ => (1..=2 * target.skills.max(1)).collect(),
    };
    let best: Vec<ModelSpec> = skill_range
        .into_iter()
        .map(|skills| {
            (1..target.d)
                .map(|r| candidate(skills, r))
                .min_by(|a, b| gap(a).total_cmp(&gap(b)))
                .expect("d >= 2")
        })
        .collect();
    best.iter()
        .filter(|s| gap(s) <= tolerance)
        .min_by_key(|s| s.skills.abs_diff(target.skills))
        .or_else(|| best.iter().min_by(|a, b| gap(a).total_cmp(&gap(b))))
        .copied()
        .expect("non-empty search")
}

/// How allocation noise is drawn across a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Eval,
    Train { seed: u64, step: usize, sample: usize },
}

impl ModelMode {
    fn layer_mode(self, layer: usize) -> Mode<'static> {
        match self {
            ModelMode::Eval => Mode::Eval,
            ModelMode::Train { seed, step, sample } => {
                Mode::Train(Some(NoiseStream::new(seed, layer, step, sample)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<OrchMoeLayer>,
}

impl Model {
    /// Fresh adapters and routers on top of frozen `base` weights, one per layer.
    pub fn init(spec: ModelSpec, base: &[Tensor], seed: u64) -> Result<Self> {
        spec.validate()?;
        if base.len() != spec.depth {
            return Err(Error::contract(format!(
                "model depth {} needs {} base weights, got {}",
                spec.depth,
                spec.depth,
                base.len()
            )));
        }
        let layers = base
            .iter()
            .enumerate()
            .map(|(l, w0)| {
                if w0.shape() != [spec.d, spec.d] {
                    return Err(Error::Dimension {
                        op: "model_base",
                        lhs: vec![spec.d, spec.d],
                        rhs: w0.shape().to_vec(),
                    });
                }
                let mut rng = rng::stream(seed, Purpose::Init, l as u64);
                if spec.arch == Architecture::Orchmoe {
                    return OrchMoeLayer::init_orch(w0.clone(), spec.skills, spec.rank, spec.tasks, &mut rng);
                }
                let skills = (0..spec.skills)
                    .map(|_| LoraAdapter::init_with(spec.d, spec.rank, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let router = match spec.arch {
                    Architecture::Orchmoe => unreachable!(),
                    Architecture::Lora => Router::Fixed(Tensor::filled(&[1], 1.0)),
                    Architecture::MoeLoraTopk => {
                        Router::TopK(TopKRouter::init(spec.d, spec.skills, spec.k, &mut rng)?)
                    }
                    Architecture::TaskId => Router::TaskId(TaskIdRouter::new(spec.real_tasks, spec.skills)),
                    Architecture::Shared => Router::Shared(SharedRouter::new(spec.skills)),
                };
                OrchMoeLayer::new(w0.clone(), skills, router)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, layers })
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers.iter().map(OrchMoeLayer::trainable_param_count).sum()
    }

    pub fn bind(&self, tape: &mut Tape, sel: Trainable) -> Vec<LayerVars> {
        self.layers.iter().map(|l| l.bind(tape, sel)).collect()
    }

    /// Trainable handles across layers, matching [`trainable_mut`](Self::trainable_mut).
    pub fn trainable_vars(vars: &[LayerVars]) -> Vec<Var> {
        vars.iter().flat_map(LayerVars::trainable).collect()
    }

    pub fn trainable_mut(&mut self, sel: Trainable) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.trainable_mut(sel)).collect()
    }

    /// All tensors with `layer{l}.`-prefixed names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| {
                layer
                    .named_params()
                    .into_iter()
                    .map(move |(name, _, t)| (format!("layer{l}.{name}"), t))
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut().into_iter().map(|(_, t)| t))
            .collect()
    }

    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &[LayerVars],
        x: Var,
        mode: ModelMode,
        task_id: Option<usize>,
    ) -> Result<(Var, Vec<LayerOutput>)> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (l, (layer, lv)) in self.layers.iter().zip(vars).enumerate() {
            let o = layer.forward_on(tape, lv, h, mode.layer_mode(l), task_id)?;
            h = o.out;
            outs.push(o);
        }
        Ok((h, outs))
    }

    /// Eval-mode prediction without gradient tracking.
    pub fn predict(&self, x: &Tensor, task_id: Option<usize>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, Trainable { skills: false, router: false });
        let xv = tape.constant(x.clone());
        let (out, _) = self.forward_on(&mut tape, &vars, xv, ModelMode::Eval, task_id)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode forward returning per-layer `(gates, task logits, task weights)`.
    pub fn inspect(&self, x: &Tensor, task_id: Option<usize>) -> Result<Vec<RoutingTrace>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, Trainable { skills: false, router: false });
        let xv = tape.constant(x.clone());
        let (_, outs) = self.forward_on(&mut tape, &vars, xv, ModelMode::Eval, task_id)?;
        Ok(outs
            .iter()
            .map(|o| RoutingTrace {
                gates: tape.value(o.gates).clone(),
                task_logits: o.task_logits.map(|v| tape.value(v).clone()),
                task_weights: o.task_weights.map(|v| tape.value(v).clone()),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    pub gates: Tensor,
    pub task_logits: Option<Tensor>,
    pub task_weights: Option<Tensor>,
}
