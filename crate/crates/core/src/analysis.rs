//! Allocation-matrix analysis: row normalization, task clustering, and
//! plot-ready exports.
//!
//! Clustering is agglomerative with average linkage on Euclidean distance between
//! row-normalized skill vectors; matrices from several layers are normalized and
//! then averaged entrywise. Both choices are recorded in exported metadata.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::layer::Router;
use crate::model::Model;
use crate::skill_router::eval_allocation;
use crate::train::suite::SyntheticTaskSuite;

pub const LINKAGE: &str = "average";
pub const METRIC: &str = "euclidean";
pub const LAYER_AGGREGATION: &str = "mean";

/// Allocation state of one layer at one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationSnapshot {
    pub layer: usize,
    pub step: usize,
    /// `tasks × skills` row-major `σ(logits)`.
    pub matrix: Vec<f64>,
    pub tasks: usize,
    pub skills: usize,
    pub real_tasks: usize,
    /// `real_tasks × tasks`: mean normalized task weights per ground-truth task.
    pub task_weight_stats: Vec<f64>,
    /// `real_tasks × tasks`: mean raw task logits per ground-truth task.
    pub task_logit_stats: Vec<f64>,
}

/// On-disk snapshot schema: `{layer, step, matrix, tasks, skills}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotFile {
    pub layer: usize,
    pub step: usize,
    pub matrix: Vec<f64>,
    pub tasks: usize,
    pub skills: usize,
}

impl AllocationSnapshot {
    pub fn matrix_tensor(&self) -> Tensor {
        Tensor::matrix(self.tasks, self.skills, self.matrix.clone()).expect("sized at capture")
    }

    pub fn file(&self) -> SnapshotFile {
        SnapshotFile {
            layer: self.layer,
            step: self.step,
            matrix: self.matrix.clone(),
            tasks: self.tasks,
            skills: self.skills,
        }
    }
}

impl SnapshotFile {
    pub fn matrix_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.tasks, self.skills, self.matrix.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "csv" => Ok(ExportFormat::Csv),
            other => Err(Error::Config(format!("format must be json or csv, got {other}"))),
        }
    }
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Json => "json",
            ExportFormat::Csv => "csv",
        }
    }
}

/// Captures every task/skill-routed layer of `model`, with task-weight statistics
/// over each ground-truth task's eval samples.
pub fn capture_snapshots(model: &Model, suite: &SyntheticTaskSuite, step: usize) -> Result<Vec<AllocationSnapshot>> {
    let mut out = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let Router::Orch { task, skill } = &layer.router else {
            continue;
        };
        let t = task.tasks();
        let real = suite.tasks.len();
        let mut weights = vec![0.0; real * t];
        let mut logits = vec![0.0; real * t];
        for (ti, data) in suite.tasks.iter().enumerate() {
            for s in &data.eval {
                let trace = &model.inspect(&s.x, Some(data.id))?[l];
                let w = trace.task_weights.as_ref().expect("orch layer");
                let z = trace.task_logits.as_ref().expect("orch layer");
                for i in 0..t {
                    weights[ti * t + i] += w.data()[i] / data.eval.len() as f64;
                    logits[ti * t + i] += z.data()[i] / data.eval.len() as f64;
                }
            }
        }
        out.push(AllocationSnapshot {
            layer: l,
            step,
            matrix: eval_allocation(skill).into_data(),
            tasks: t,
            skills: skill.skills(),
            real_tasks: real,
            task_weight_stats: weights,
            task_logit_stats: logits,
        });
    }
    Ok(out)
}

/// Per-layer `real_tasks × S` matrices of mean eval-mode skill gates for each
/// ground-truth task. Works for every router type.
pub fn task_skill_usage(model: &Model, suite: &SyntheticTaskSuite) -> Result<Vec<Tensor>> {
    let depth = model.layers.len();
    let real = suite.tasks.len();
    let mut usage: Vec<Vec<f64>> = model
        .layers
        .iter()
        .map(|l| vec![0.0; real * l.num_skills()])
        .collect();
    for (ti, data) in suite.tasks.iter().enumerate() {
        for s in &data.eval {
            let traces = model.inspect(&s.x, Some(data.id))?;
            for (l, tr) in traces.iter().enumerate() {
                let sk = model.layers[l].num_skills();
                let (rows, _) = tr.gates.dims2()?;
                for j in 0..sk {
                    let mean_gate = (0..rows).map(|r| tr.gates.at(r, j)).sum::<f64>() / rows as f64;
                    usage[l][ti * sk + j] += mean_gate / data.eval.len() as f64;
                }
            }
        }
    }
    (0..depth)
        .map(|l| Tensor::matrix(real, model.layers[l].num_skills(), usage[l].clone()))
        .collect()
}

/// Divides each row by its sum.
pub fn normalize_rows(matrix: &Tensor) -> Result<Tensor> {
    let (r, c) = matrix.dims2()?;
    if let Some(v) = matrix.data().iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::contract(format!("normalize_rows needs finite nonnegative entries, found {v}")));
    }
    let mut out = matrix.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let s: f64 = row.iter().sum();
        if s == 0.0 {
            return Err(Error::DegenerateRow(i));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(r, c, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DendrogramNode {
    Leaf {
        leaf: usize,
    },
    Internal {
        left: Box<DendrogramNode>,
        right: Box<DendrogramNode>,
        height: f64,
        count: usize,
    },
}

impl DendrogramNode {
    pub fn count(&self) -> usize {
        match self {
            DendrogramNode::Leaf { .. } => 1,
            DendrogramNode::Internal { count, .. } => *count,
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        match self {
            DendrogramNode::Leaf { leaf } => vec![*leaf],
            DendrogramNode::Internal { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }

    pub fn height(&self) -> f64 {
        match self {
            DendrogramNode::Leaf { .. } => 0.0,
            DendrogramNode::Internal { height, .. } => *height,
        }
    }
}

/// One agglomeration step; cluster ids below `n` are leaves, `n + i` is merge `i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
    pub root: DendrogramNode,
}

#[derive(Serialize)]
struct DendrogramFile<'a> {
    linkage: &'a str,
    metric: &'a str,
    layer_aggregation: &'a str,
    leaves: usize,
    /// Flat labels from the largest-gap cut.
    clusters: Vec<usize>,
    root: &'a DendrogramNode,
}

impl Dendrogram {
    /// Flat cluster labels after cutting at the largest gap between consecutive merge
    /// heights, with height `0` before the first merge. The first largest gap wins.
    /// Labels are numbered in order of each cluster's lowest leaf.
    pub fn cut_largest_gap(&self) -> Vec<usize> {
        let mut best = (0, f64::NEG_INFINITY);
        let mut prev = 0.0;
        for (i, m) in self.merges.iter().enumerate() {
            let gap = m.height - prev;
            if gap > best.1 {
                best = (i, gap);
            }
            prev = m.height;
        }
        let applied = if self.merges.is_empty() { 0 } else { best.0 };
        self.labels_after(applied)
    }

    /// Flat labels after applying the first `merges` agglomerations.
    pub fn labels_after(&self, merges: usize) -> Vec<usize> {
        let n = self.leaves;
        let mut parent: Vec<usize> = (0..n + self.merges.len()).collect();
        for (i, m) in self.merges.iter().take(merges).enumerate() {
            parent[m.a] = n + i;
            parent[m.b] = n + i;
        }
        let root = |mut x: usize| {
            while parent[x] != x {
                x = parent[x];
            }
            x
        };
        let roots: Vec<usize> = (0..n).map(root).collect();
        let mut seen: Vec<usize> = Vec::new();
        roots
            .iter()
            .map(|r| match seen.iter().position(|s| s == r) {
                Some(p) => p,
                None => {
                    seen.push(*r);
                    seen.len() - 1
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DendrogramFile {
            linkage: LINKAGE,
            metric: METRIC,
            layer_aggregation: LAYER_AGGREGATION,
            leaves: self.leaves,
            clusters: self.cut_largest_gap(),
            root: &self.root,
        })
        .expect("dendrogram serializes")
    }
}

/// Row-normalizes each layer's matrix, averages them, and clusters the rows.
pub fn cluster_tasks(layers: &[Tensor]) -> Result<Dendrogram> {
    let first = layers
        .first()
        .ok_or_else(|| Error::contract("cluster_tasks needs at least one matrix"))?;
    let mut avg = Tensor::zeros(first.shape());
    for m in layers {
        avg = avg.add(&normalize_rows(m)?)?;
    }
    let avg = avg.scale(1.0 / layers.len() as f64);
    let (n, c) = avg.dims2()?;

    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    (0..c)
                        .map(|k| (avg.at(i, k) - avg.at(j, k)).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();

    // (cluster id, member leaves, subtree); kept sorted by id
    let mut active: Vec<(usize, Vec<usize>, DendrogramNode)> =
        (0..n).map(|i| (i, vec![i], DendrogramNode::Leaf { leaf: i })).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut floor = 0.0f64;
    while active.len() > 1 {
        let mut best = (0, 1, f64::INFINITY);
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let (ma, mb) = (&active[a].1, &active[b].1);
                let total: f64 = ma.iter().flat_map(|&i| mb.iter().map(move |&j| (i, j))).map(|(i, j)| dist[i][j]).sum();
                let d = total / (ma.len() * mb.len()) as f64;
                if d < best.2 {
                    best = (a, b, d);
                }
            }
        }
        let (a, b, d) = best;
        // average linkage is monotone; the max only absorbs rounding
        let height = d.max(floor);
        floor = height;
        let (id_b, mem_b, node_b) = active.remove(b);
        let (id_a, mem_a, node_a) = active.remove(a);
        let mut members = mem_a;
        members.extend(mem_b);
        let size = members.len();
        merges.push(Merge {
            a: id_a,
            b: id_b,
            height,
            size,
        });
        active.push((
            n + merges.len() - 1,
            members,
            DendrogramNode::Internal {
                left: Box::new(node_a),
                right: Box::new(node_b),
                height,
                count: size,
            },
        ));
    }
    let root = active.pop().expect("n >= 1").2;
    Ok(Dendrogram { leaves: n, merges, root })
}

/// True when two labelings describe the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len()
        && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

pub fn snapshot_csv(file: &SnapshotFile) -> String {
    let mut out = String::from("task");
    for j in 0..file.skills {
        let _ = write!(out, ",skill_{j}");
    }
    out.push('\n');
    for t in 0..file.tasks {
        let _ = write!(out, "{t}");
        for j in 0..file.skills {
            let _ = write!(out, ",{:.16e}", file.matrix[t * file.skills + j]);
        }
        out.push('\n');
    }
    out
}

/// Parses the CSV body back into a `tasks × skills` matrix.
pub fn parse_snapshot_csv(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format {
        offset: 0,
        msg: "empty csv".into(),
    })?;
    let skills = header.split(',').count() - 1;
    let mut rows = Vec::new();
    let mut offset = header.len() + 1;
    for line in lines {
        let vals = line
            .split(',')
            .skip(1)
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::Format {
                    offset,
                    msg: format!("bad number {v:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != skills {
            return Err(Error::Format {
                offset,
                msg: format!("expected {skills} values, got {}", vals.len()),
            });
        }
        rows.push(vals);
        offset += line.len() + 1;
    }
    Tensor::from_rows(&rows)
}

pub fn export_snapshot(file: &SnapshotFile, path: &Path, format: ExportFormat) -> Result<()> {
    let text = match format {
        ExportFormat::Json => serde_json::to_string_pretty(file).expect("snapshot serializes"),
        ExportFormat::Csv => snapshot_csv(file),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import_snapshot_json(path: &Path) -> Result<SnapshotFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: e.column(),
        msg: format!("{}: {e}", path.display()),
    })
}
