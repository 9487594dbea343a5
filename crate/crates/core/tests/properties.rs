//! Property tests over random shapes and values.

mod common;

use common::*;
use orchmoe::analysis::{cluster_tasks, normalize_rows, same_partition};
use orchmoe::autodiff::{finite_diff_grad, max_relative_error, Tape, Tensor};
use orchmoe::baselines::topk_from_logits;
use orchmoe::checkpoint::Checkpoint;
use orchmoe::config::RunConfig;
use orchmoe::layer::{Mode, OrchMoeLayer, Router, Trainable};
use orchmoe::lora::{lora_forward, merge_adapters, LoraAdapter};
use orchmoe::model::Model;
use orchmoe::skill_router::gumbel_sigmoid;
use orchmoe::task_router::{attention_mix, task_logits, task_weights, TaskRouterParams};
use orchmoe::train::optim::{lr_at, AdamWConfig};
use orchmoe::train::suite::generate_suite;
use proptest::prelude::*;
use rand::Rng;

fn tensor(seed: u64, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    uniform(&mut rng(seed), r, c, lo, hi)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_sum_to_one(seed: u64, r in 1usize..8, c in 1usize..12, scale in 0.1f64..50.0) {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(seed, r, c, -scale, scale));
        let s = tape.softmax_rows(x).unwrap();
        for i in 0..r {
            let row = tape.value(s).row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_oracle(seed: u64, m in 1usize..=16, k in 1usize..=16, n in 1usize..=16) {
        let a = tensor(seed, m, k, -2.0, 2.0);
        let b = tensor(seed ^ 1, k, n, -2.0, 2.0);
        let got = a.matmul(&b).unwrap();
        prop_assert!(max_abs(&rows(&got), &naive_matmul(&rows(&a), &rows(&b))) < 1e-12);
    }

    #[test]
    fn composed_ops_match_finite_differences(seed: u64, m in 1usize..4, k in 1usize..4, n in 2usize..5) {
        let x = tensor(seed, m, k, -2.0, 2.0);
        let w = tensor(seed ^ 2, k, n, -2.0, 2.0);
        let r = tensor(seed ^ 3, m, n, -1.0, 1.0);
        let build = |x: &Tensor, tape: &mut Tape| {
            let xv = tape.param(x.clone());
            let wv = tape.constant(w.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let sm = tape.softmax_rows(h).unwrap();
            let sg = tape.sigmoid(h);
            let prod = tape.mul(sm, sg).unwrap();
            let rv = tape.constant(r.clone());
            let p = tape.mul(prod, rv).unwrap();
            (tape.sum(p), xv)
        };
        let mut tape = Tape::new();
        let (loss, xv) = build(&x, &mut tape);
        tape.backward(loss).unwrap();
        let num = finite_diff_grad(|t| {
            let mut tp = Tape::new();
            let (l, _) = build(t, &mut tp);
            Ok(tp.value(l).data()[0])
        }, &x, 1e-5).unwrap();
        prop_assert!(max_relative_error(tape.grad(xv).unwrap(), &num) < 1e-4);
    }

    #[test]
    fn factored_lora_equals_dense(seed: u64, d in 2usize..9, n in 1usize..5, r_frac in 0.0f64..1.0) {
        let r = 1 + ((d - 2) as f64 * r_frac) as usize;
        let mut g = rng(seed);
        let a = adapter(&mut g, d, r);
        let x = uniform(&mut g, n, d, -1.0, 1.0);
        let w0 = uniform(&mut g, d, d, -1.0, 1.0);
        let got = lora_forward(&x, &w0, &a).unwrap();
        let want = naive_matmul(&rows(&x), &transpose(&rows(&w0.add(&a.delta()).unwrap())));
        prop_assert!(max_abs(&rows(&got), &want) < 1e-12);
    }

    #[test]
    fn merge_is_linear_and_rank_bounded(seed: u64, count in 1usize..4, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let d = 8;
        let mut g = rng(seed);
        let ranks: Vec<usize> = (0..count).map(|_| g.random_range(1..3)).collect();
        let adapters: Vec<LoraAdapter> = ranks.iter().map(|&r| adapter(&mut g, d, r)).collect();
        let u: Vec<f64> = (0..count).map(|_| g.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..count).map(|_| g.random_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = merge_adapters(&adapters, &mix).unwrap();
        let rhs = merge_adapters(&adapters, &u).unwrap().scale(alpha)
            .add(&merge_adapters(&adapters, &v).unwrap().scale(beta)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let total: usize = ranks.iter().sum();
        let sv = singular_values(&lhs);
        prop_assert!(sv[total..].iter().all(|s| *s < 1e-9), "{:?}", sv);
    }

    #[test]
    fn single_token_attention_doubles(seed: u64, d in 1usize..10, alpha in -3.0f64..3.0) {
        let x = tensor(seed, 1, d, -1.0, 1.0).scale(alpha);
        prop_assert_eq!(attention_mix(&x).unwrap(), x.scale(2.0));
    }

    #[test]
    fn task_weights_form_a_distribution(seed: u64, t in 1usize..10, scale in 0.1f64..40.0) {
        let logits = Tensor::vector(tensor(seed, 1, t, -scale, scale).into_data());
        let w = task_weights(&logits).unwrap();
        prop_assert!((w.sum() - 1.0).abs() < 1e-12);
        prop_assert!(w.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn token_order_does_not_change_task_logits(seed: u64, n in 1usize..7, d in 1usize..7, t in 1usize..5) {
        let x = tensor(seed, n, d, -1.0, 1.0);
        let p = TaskRouterParams::new(tensor(seed ^ 4, d, t, -1.0, 1.0), Tensor::vector(tensor(seed ^ 5, 1, t, -1.0, 1.0).into_data())).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut g = rng(seed ^ 6);
        for i in (1..n).rev() {
            perm.swap(i, g.random_range(0..=i));
        }
        let shuffled = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = task_logits(&attention_mix(&x).unwrap(), &p).unwrap();
        let b = task_logits(&attention_mix(&shuffled).unwrap(), &p).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn gumbel_sigmoid_is_monotone(w in -10.0f64..10.0, dw in 1e-3f64..2.0, u in 0.01f64..0.98, du in 1e-3f64..0.01) {
        let base = gumbel_sigmoid(w, u).unwrap();
        prop_assert!(gumbel_sigmoid(w + dw, u).unwrap() > base);
        prop_assert!(gumbel_sigmoid(w, u + du).unwrap() > base);
    }

    #[test]
    fn gumbel_sigmoid_gradient_matches_finite_differences(w in -6.0f64..6.0, u in 0.01f64..0.99) {
        let mut tape = Tape::new();
        let wv = tape.param(Tensor::vector(vec![w]));
        let noise = Tensor::vector(vec![(u / (1.0 - u)).ln()]);
        let z = tape.add_const(wv, &noise).unwrap();
        let s = tape.sigmoid(z);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        let num = finite_diff_grad(|t| gumbel_sigmoid(t.data()[0], u), &Tensor::vector(vec![w]), 1e-5).unwrap();
        prop_assert!(max_relative_error(tape.grad(wv).unwrap(), &num) < 1e-4);
    }

    #[test]
    fn eval_forward_matches_double_loop(seed: u64, d in 2usize..=8, n in 1usize..=8, t in 1usize..=8, s in 1usize..=8) {
        let r = 1 + (seed as usize) % (d - 1);
        let layer = random_layer(seed, d, "orch", t, s, r, 1);
        let x = tensor(seed ^ 7, n, d, -1.0, 1.0);
        let got = layer.forward(&x, Mode::Eval, None).unwrap();
        prop_assert!(max_abs(&rows(&got), &orch_oracle(&layer, &x)) < 1e-12);
    }

    #[test]
    fn unit_gates_equal_merged_lora(seed: u64, d in 2usize..=8, n in 1usize..=5, s in 1usize..=4) {
        let mut g = rng(seed);
        let w0 = uniform(&mut g, d, d, -1.0, 1.0);
        let skills: Vec<LoraAdapter> = (0..s).map(|_| adapter(&mut g, d, 1)).collect();
        let merged = merge_adapters(&skills, &vec![1.0; s]).unwrap();
        let layer = OrchMoeLayer::new(w0.clone(), skills, Router::Fixed(Tensor::filled(&[s], 1.0))).unwrap();
        let x = uniform(&mut g, n, d, -1.0, 1.0);
        let got = layer.forward(&x, Mode::Eval, None).unwrap();
        let want = naive_matmul(&rows(&x), &transpose(&rows(&w0.add(&merged).unwrap())));
        prop_assert!(max_abs(&rows(&got), &want) < 1e-12);
    }

    #[test]
    fn baseline_gates_are_distributions_with_promised_support(seed: u64, d in 2usize..=8, s in 1usize..=6, k_frac in 0.0f64..1.0) {
        let k = 1 + ((s - 1) as f64 * k_frac) as usize;
        let x = tensor(seed ^ 8, 3, d, -1.0, 1.0);
        for (name, support) in [("shared", s), ("task-id", s), ("topk", k)] {
            let layer = random_layer(seed, d, name, 2, s, 1, k);
            let gates = layer.gates(&x, Mode::Eval, Some(1)).unwrap();
            let (gr, gc) = gates.dims2().unwrap();
            prop_assert_eq!(gc, s);
            for i in 0..gr {
                let row = gates.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert_eq!(row.iter().filter(|v| **v > 0.0).count(), support);
            }
            let out = layer.forward(&x, Mode::Eval, Some(1)).unwrap();
            prop_assert!(max_abs(&rows(&out), &gated_oracle(&layer, &x, &rows(&gates))) < 1e-12);
        }
    }

    #[test]
    fn topk_permutes_with_distinct_logits(seed: u64, s in 2usize..8, k_frac in 0.0f64..1.0) {
        let k = 1 + ((s - 1) as f64 * k_frac) as usize;
        let mut g = rng(seed);
        let mut logits: Vec<f64> = (0..s).map(|i| i as f64 + g.random_range(0.0..0.5)).collect();
        for i in (1..s).rev() {
            logits.swap(i, g.random_range(0..=i));
        }
        let mut perm: Vec<usize> = (0..s).collect();
        for i in (1..s).rev() {
            perm.swap(i, g.random_range(0..=i));
        }
        let gates = topk_from_logits(&logits, k).unwrap();
        let permuted: Vec<f64> = perm.iter().map(|&p| logits[p]).collect();
        let pg = topk_from_logits(&permuted, k).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((pg.data()[i] - gates.data()[p]).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_is_idempotent_and_scale_free(seed: u64, r in 1usize..6, c in 1usize..6, k in 0.01f64..100.0) {
        let m = tensor(seed, r, c, 0.01, 1.0);
        let n = normalize_rows(&m).unwrap();
        prop_assert!(normalize_rows(&n).unwrap().max_abs_diff(&n) < 1e-12);
        prop_assert!(normalize_rows(&m.scale(k)).unwrap().max_abs_diff(&n) < 1e-12);
        for i in 0..r {
            prop_assert!((n.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clustering_ignores_row_scale_and_column_order(seed: u64, t in 1usize..9, s in 2usize..6) {
        let mut g = rng(seed);
        let m = uniform(&mut g, t, s, 0.01, 1.0);
        let base = cluster_tasks(std::slice::from_ref(&m)).unwrap();

        let scales: Vec<f64> = (0..t).map(|_| g.random_range(0.1..10.0)).collect();
        let scaled = Tensor::from_rows(&(0..t).map(|i| m.row(i).iter().map(|v| v * scales[i]).collect()).collect::<Vec<_>>()).unwrap();
        let mut cols: Vec<usize> = (0..s).collect();
        for i in (1..s).rev() {
            cols.swap(i, g.random_range(0..=i));
        }
        let permuted = Tensor::from_rows(&(0..t).map(|i| cols.iter().map(|&j| m.at(i, j)).collect()).collect::<Vec<_>>()).unwrap();

        for other in [scaled, permuted] {
            let d = cluster_tasks(&[other]).unwrap();
            prop_assert_eq!(d.merges.len(), base.merges.len());
            for (a, b) in d.merges.iter().zip(&base.merges) {
                prop_assert!((a.height - b.height).abs() < 1e-9);
            }
            for cut in 0..=base.merges.len() {
                prop_assert!(same_partition(&d.labels_after(cut), &base.labels_after(cut)));
            }
        }
        let h: Vec<f64> = base.merges.iter().map(|m| m.height).collect();
        prop_assert!(h.windows(2).all(|w| w[0] <= w[1]));
        let mut leaves = base.root.leaves();
        leaves.sort();
        prop_assert_eq!(leaves, (0..t).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_stays_in_range(total in 1usize..5000, ratio in 0.0f64..0.5, frac in 0.0f64..1.0) {
        let mut c = AdamWConfig::new(total);
        c.warmup_ratio = ratio;
        let step = (total as f64 * frac) as usize;
        let lr = lr_at(step, &c);
        prop_assert!((0.0..=c.lr_max * (1.0 + 1e-12)).contains(&lr));
        let warm = ratio * total as f64;
        if (step as f64) + 1.0 < warm {
            prop_assert!(lr_at(step + 1, &c) >= lr);
        } else if step as f64 >= warm {
            prop_assert!(lr_at(step + 1, &c) <= lr);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0u64..1000, arch_ix in 0usize..5) {
        let mut c = RunConfig::desk_default();
        c.model.d = 6;
        c.model.depth = 2;
        c.router.rank = 2;
        c.architecture = orchmoe::model::Architecture::ALL[arch_ix];
        if c.architecture == orchmoe::model::Architecture::Lora {
            c.router.skills = 1;
        }
        c.seed = seed;
        let suite = generate_suite(c.suite_params()).unwrap();
        let mut model = Model::init(c.model_spec(), &suite.base, seed).unwrap();
        let mut g = rng(seed);
        for t in model.trainable_mut(Trainable::ALL) {
            let shape = t.shape().to_vec();
            *t = Tensor::new(shape, (0..t.len()).map(|_| g.random_range(-1.0..1.0)).collect()).unwrap();
        }
        let bytes = Checkpoint::from_model(&c, &model, 3).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap().to_model().unwrap();
        for s in suite.tasks.iter().flat_map(|t| &t.eval).take(6) {
            let a = model.predict(&s.x, Some(s.task)).unwrap();
            let b = back.predict(&s.x, Some(s.task)).unwrap();
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
    }
}
