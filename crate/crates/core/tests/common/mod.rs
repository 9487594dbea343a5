#![allow(dead_code)]

use nalgebra::DMatrix;
use orchmoe::autodiff::Tensor;
use orchmoe::config::RunConfig;
use orchmoe::baselines::{SharedRouter, TaskIdRouter, TopKRouter};
use orchmoe::layer::{OrchMoeLayer, Router, Trainable};
use orchmoe::lora::LoraAdapter;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Row-major `Vec<Vec<f64>>` view.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j]).collect()).collect()
}

pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Literal double-sum composition: `x·w0ᵀ + Σ_i Σ_j w_i·σ(W)_ij · x·(down_j·up_j)ᵀ`,
/// with task weights from attention mix, mean pooling, affine head and softmax.
pub fn orch_oracle(layer: &OrchMoeLayer, x: &Tensor) -> Vec<Vec<f64>> {
    let Router::Orch { task, skill } = &layer.router else {
        panic!("oracle needs the task/skill router");
    };
    let xr = rows(x);
    let (n, d) = (xr.len(), xr[0].len());
    // attention mix with residual
    let mut scores = naive_matmul(&xr, &transpose(&xr));
    for row in &mut scores {
        for v in row.iter_mut() {
            *v /= (d as f64).sqrt();
        }
        *row = softmax(row);
    }
    let mixed = naive_matmul(&scores, &xr);
    let x_hat: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|k| mixed[i][k] + xr[i][k]).collect()).collect();
    let pooled: Vec<f64> = (0..d).map(|k| x_hat.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
    let wt = rows(&task.w_task);
    let t_count = wt[0].len();
    let logits: Vec<f64> = (0..t_count)
        .map(|t| (0..d).map(|k| pooled[k] * wt[k][t]).sum::<f64>() + task.bias.data()[t])
        .collect();
    let w = softmax(&logits);
    let alloc = rows(&skill.logits);

    let base = naive_matmul(&xr, &transpose(&rows(&layer.w0)));
    let mut out = base;
    for (i, wi) in w.iter().enumerate() {
        for (j, a) in layer.skills.iter().enumerate() {
            let delta = naive_matmul(&rows(&a.down), &rows(&a.up));
            let contrib = naive_matmul(&xr, &transpose(&delta));
            let g = wi * sigmoid(alloc[i][j]);
            for r in 0..n {
                for c in 0..d {
                    out[r][c] += g * contrib[r][c];
                }
            }
        }
    }
    out
}

/// `x·w0ᵀ + Σ_j g[row][j] · x·ΔW_jᵀ` with per-row (or shared single-row) gates.
pub fn gated_oracle(layer: &OrchMoeLayer, x: &Tensor, gates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let xr = rows(x);
    let mut out = naive_matmul(&xr, &transpose(&rows(&layer.w0)));
    for (j, a) in layer.skills.iter().enumerate() {
        let delta = naive_matmul(&rows(&a.down), &rows(&a.up));
        let contrib = naive_matmul(&xr, &transpose(&delta));
        for r in 0..xr.len() {
            let g = if gates.len() == 1 { gates[0][j] } else { gates[r][j] };
            for c in 0..xr[0].len() {
                out[r][c] += g * contrib[r][c];
            }
        }
    }
    out
}

pub fn singular_values(t: &Tensor) -> Vec<f64> {
    let (r, c) = t.dims2().unwrap();
    let m = DMatrix::from_row_slice(r, c, t.data());
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// A small fast config for training tests.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig::desk_default();
    c.model.d = 8;
    c.model.n_tokens = 3;
    c.router.tasks = 3;
    c.router.skills = 2;
    c.router.rank = 2;
    c.suite.real_tasks = 3;
    c.suite.groups = 2;
    c.suite.n_train = 8;
    c.suite.n_eval = 4;
    c.optimizer.epochs = 2;
    c
}

pub fn adapter(g: &mut ChaCha8Rng, d: usize, r: usize) -> LoraAdapter {
    LoraAdapter::from_factors(uniform(g, d, r, -1.0, 1.0), uniform(g, r, d, -1.0, 1.0)).unwrap()
}

/// Layer with every trainable tensor drawn uniformly from [-1, 1].
pub fn random_layer(seed: u64, d: usize, router: &str, t: usize, s: usize, r: usize, k: usize) -> OrchMoeLayer {
    let mut g = rng(seed);
    let w0 = uniform(&mut g, d, d, -1.0, 1.0);
    let skills: Vec<LoraAdapter> = (0..s).map(|_| adapter(&mut g, d, r)).collect();
    let router = match router {
        "orch" => {
            let layer = OrchMoeLayer::init_orch(w0.clone(), s, r, t, &mut g).unwrap();
            layer.router
        }
        "shared" => Router::Shared(SharedRouter::new(s)),
        "task-id" => Router::TaskId(TaskIdRouter::new(t, s)),
        _ => Router::TopK(TopKRouter::init(d, s, k, &mut g).unwrap()),
    };
    let mut layer = OrchMoeLayer::new(w0, skills, router).unwrap();
    for p in layer.trainable_mut(Trainable { skills: false, router: true }) {
        let shape = p.shape().to_vec();
        *p = Tensor::new(shape, (0..p.len()).map(|_| g.random_range(-1.0..1.0)).collect()).unwrap();
    }
    layer
}
