//! Finite-difference checks of every differentiable op, in f64.

use fewshot::tensor::gradcheck::{param_grad_check, Coordinates};
use fewshot::tensor::{ParamId, ParamStore, Similarity, Tape, Tensor, Var};
use fewshot::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0) * scale)
}

/// Contract an arbitrary output with fixed random weights so every output
/// coordinate contributes to the checked scalar.
fn contract(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = randn(&mut rng, tape.shape(y), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check<F>(what: &str, mut build: F) -> f64
where
    F: FnMut(
        &mut ChaCha8Rng,
    ) -> (
        ParamStore<f64>,
        Box<dyn Fn(&mut Tape<'_, f64>, &[ParamId]) -> Result<Var>>,
    ),
{
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, f) = build(&mut rng);
        let ids: Vec<ParamId> = store.param_ids().collect();
        let report = param_grad_check(
            &store,
            |t| {
                let y = f(t, &ids)?;
                contract(t, y, seed)
            },
            EPS,
            Coordinates::All,
        )
        .unwrap();
        let err = report.max_rel_err();
        assert!(err <= TOL, "{what} seed {seed}: {:?}", report.worst());
        worst = worst.max(err);
    }
    worst
}

fn detail(worst: f64) -> String {
    format!("{INSTANCES} instances, max rel err {worst:.1e} (tol {TOL:.0e})")
}

fn store_of(tensors: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in tensors {
        s.add_param(name, t, true).unwrap();
    }
    s
}

fn bind(t: &mut Tape<'_, f64>, ids: &[ParamId]) -> Vec<Var> {
    ids.iter().map(|&id| t.param(id)).collect()
}

pub fn add_with_broadcast() -> String {
    detail(check("add", |rng| {
        let s = store_of(vec![
            ("a", randn(rng, &[3, 4], 1.0)),
            ("b", randn(rng, &[4], 1.0)),
        ]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                t.add(v[0], v[1])
            }),
        )
    }))
}

pub fn mul_elementwise() -> String {
    detail(check("mul", |rng| {
        let s = store_of(vec![
            ("a", randn(rng, &[2, 5], 1.0)),
            ("b", randn(rng, &[2, 5], 1.0)),
        ]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                t.mul(v[0], v[1])
            }),
        )
    }))
}

pub fn mul_scalar_var() -> String {
    detail(check("mul_scalar", |rng| {
        let s = store_of(vec![
            ("a", randn(rng, &[3, 3], 1.0)),
            ("s", randn(rng, &[1], 2.0)),
        ]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                let e = t.exp(v[1]);
                t.mul_scalar(v[0], e)
            }),
        )
    }))
}

pub fn scale_and_mean() -> String {
    detail(check("scale", |rng| {
        let s = store_of(vec![("a", randn(rng, &[4, 2], 1.0))]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                let y = t.scale(v[0], -2.5);
                let m = t.mean(y);
                let z = t.mul(y, y)?;
                let m2 = t.mean(z);
                t.add(m, m2)
            }),
        )
    }))
}

pub fn matmul_rect() -> String {
    detail(check("matmul", |rng| {
        let s = store_of(vec![
            ("a", randn(rng, &[3, 4], 1.0)),
            ("b", randn(rng, &[4, 5], 1.0)),
        ]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                t.matmul(v[0], v[1])
            }),
        )
    }))
}

pub fn linear_with_bias() -> String {
    detail(check("linear", |rng| {
        let s = store_of(vec![
            ("x", randn(rng, &[3, 4], 1.0)),
            ("w", randn(rng, &[2, 4], 1.0)),
            ("b", randn(rng, &[2], 1.0)),
        ]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                t.linear(v[0], v[1], Some(v[2]))
            }),
        )
    }))
}

pub fn concat_both_axes() -> String {
    detail(check("concat", |rng| {
        let s = store_of(vec![
            ("a", randn(rng, &[2, 3], 1.0)),
            ("b", randn(rng, &[2, 2], 1.0)),
        ]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                let c1 = t.concat(&[v[0], v[1]], 1)?;
                let c0 = t.concat(&[c1, c1], 0)?;
                Ok(t.relu(c0))
            }),
        )
    }))
}

pub fn relu_exp_log() -> String {
    detail(check("pointwise", |rng| {
        let s = store_of(vec![("a", randn(rng, &[6], 2.0))]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                let r = t.relu(v[0]);
                let e = t.exp(v[0]);
                let l = t.log(e);
                let y = t.add(r, l)?;
                t.mul(y, e)
            }),
        )
    }))
}

pub fn max_axis_rows_and_columns() -> String {
    detail(check("max_axis", |rng| {
        let s = store_of(vec![("a", randn(rng, &[4, 5], 1.0))]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                let m1 = t.max_axis(v[0], 1)?;
                let m0 = t.max_axis(v[0], 0)?;
                let a = t.sum(m1);
                let b = t.sum(m0);
                t.add(a, b)
            }),
        )
    }))
}

pub fn reshape_flatten_select() -> String {
    detail(check("reshape", |rng| {
        let s = store_of(vec![("a", randn(rng, &[2, 3, 2, 2], 1.0))]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                let f = t.flatten(v[0])?;
                let r = t.reshape(f, &[4, 6])?;
                t.select_rows(r, &[3, 0, 0, 2])
            }),
        )
    }))
}

pub fn group_mean_prototypes() -> String {
    detail(check("group_mean", |rng| {
        let s = store_of(vec![("a", randn(rng, &[6, 3], 1.0))]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                t.group_mean(v[0], &[0, 1, 2, 0, 1, 0], 3)
            }),
        )
    }))
}

pub fn softmax_rows() -> String {
    detail(check("softmax", |rng| {
        let s = store_of(vec![("a", randn(rng, &[3, 5], 3.0))]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                t.softmax(v[0])
            }),
        )
    }))
}

pub fn softmax_cross_entropy_loss() -> String {
    detail(check("cross_entropy", |rng| {
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        let s = store_of(vec![("a", randn(rng, &[4, 5], 3.0))]);
        (
            s,
            Box::new(move |t, ids| {
                let v = bind(t, ids);
                t.softmax_cross_entropy(v[0], &targets)
            }),
        )
    }))
}

pub fn cosine_similarity_scores() -> String {
    detail(check("cosine", |rng| {
        let s = store_of(vec![
            ("f", randn(rng, &[3, 6], 1.0)),
            ("w", randn(rng, &[4, 6], 1.0)),
        ]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                t.similarity(v[0], v[1], Similarity::Cosine)
            }),
        )
    }))
}

pub fn negative_squared_distance_scores() -> String {
    detail(check("neg_sq_dist", |rng| {
        let s = store_of(vec![
            ("q", randn(rng, &[3, 6], 1.0)),
            ("p", randn(rng, &[4, 6], 1.0)),
        ]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                t.similarity(v[0], v[1], Similarity::NegSqEuclidean)
            }),
        )
    }))
}

pub fn conv2d_all_geometries() -> String {
    let mut worst = 0.0f64;
    for (stride, pad, hw) in [(1, 1, 5), (1, 0, 5), (2, 1, 5), (2, 0, 7)] {
        worst = worst.max(check("conv2d", |rng| {
            let s = store_of(vec![
                ("x", randn(rng, &[2, 2, hw, hw], 1.0)),
                ("w", randn(rng, &[3, 2, 3, 3], 0.5)),
                ("b", randn(rng, &[3], 0.5)),
            ]);
            (
                s,
                Box::new(move |t, ids| {
                    let v = bind(t, ids);
                    t.conv2d(v[0], v[1], v[2], stride, pad)
                }),
            )
        }));
    }
    detail(worst)
}

pub fn batch_norm_train_mode() -> String {
    detail(check("batch_norm_train", |rng| {
        let s = store_of(vec![
            ("x", randn(rng, &[3, 2, 2, 2], 2.0)),
            ("g", randn(rng, &[2], 1.0)),
            ("b", randn(rng, &[2], 1.0)),
        ]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                Ok(t.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0)
            }),
        )
    }))
}

pub fn batch_norm_train_mode_rank2() -> String {
    detail(check("batch_norm_rank2", |rng| {
        let s = store_of(vec![
            ("x", randn(rng, &[5, 3], 2.0)),
            ("g", randn(rng, &[3], 1.0)),
            ("b", randn(rng, &[3], 1.0)),
        ]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                Ok(t.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0)
            }),
        )
    }))
}

pub fn batch_norm_eval_mode() -> String {
    detail(check("batch_norm_eval", |rng| {
        let mean: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..2).map(|_| rng.gen_range(0.5..2.0)).collect();
        let s = store_of(vec![
            ("x", randn(rng, &[2, 2, 3, 3], 2.0)),
            ("g", randn(rng, &[2], 1.0)),
            ("b", randn(rng, &[2], 1.0)),
        ]);
        (
            s,
            Box::new(move |t, ids| {
                let v = bind(t, ids);
                Ok(t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?.0)
            }),
        )
    }))
}

pub fn max_pool_strict_and_floor() -> String {
    let mut worst = 0.0f64;
    for (floor, hw) in [(false, 4), (true, 5)] {
        worst = worst.max(check("max_pool", |rng| {
            let s = store_of(vec![("x", randn(rng, &[2, 2, hw, hw], 1.0))]);
            (
                s,
                Box::new(move |t, ids| {
                    let v = bind(t, ids);
                    t.max_pool2x2(v[0], floor)
                }),
            )
        }));
    }
    detail(worst)
}

pub fn global_average_pool() -> String {
    detail(check("gap", |rng| {
        let s = store_of(vec![("x", randn(rng, &[2, 3, 3, 2], 1.0))]);
        (
            s,
            Box::new(|t, ids| {
                let v = bind(t, ids);
                t.global_avg_pool(v[0])
            }),
        )
    }))
}

pub fn small_network_end_to_end() -> String {
    detail(check("network", |rng| {
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let s = store_of(vec![
            ("x", randn(rng, &[4, 1, 4, 4], 1.0)),
            ("w", randn(rng, &[2, 1, 3, 3], 0.5)),
            ("b", randn(rng, &[2], 0.1)),
            ("g", randn(rng, &[2], 1.0)),
            ("s", randn(rng, &[2], 0.1)),
            ("cls", randn(rng, &[3, 8], 1.0)),
            ("log_gamma", Tensor::scalar(rng.gen_range(0.0..2.0))),
        ]);
        (
            s,
            Box::new(move |t, ids| {
                let v = bind(t, ids);
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                let (y, _) = t.batch_norm(y, v[3], v[4], None, 1e-5)?;
                let y = t.relu(y);
                let y = t.max_pool2x2(y, false)?;
                let f = t.flatten(y)?;
                let c = t.cosine_similarity(f, v[5])?;
                let gamma = t.exp(v[6]);
                let z = t.mul_scalar(c, gamma)?;
                t.softmax_cross_entropy(z, &targets)
            }),
        )
    }))
}

checks![
    add_with_broadcast,
    mul_elementwise,
    mul_scalar_var,
    scale_and_mean,
    matmul_rect,
    linear_with_bias,
    concat_both_axes,
    relu_exp_log,
    max_axis_rows_and_columns,
    reshape_flatten_select,
    group_mean_prototypes,
    softmax_rows,
    softmax_cross_entropy_loss,
    cosine_similarity_scores,
    negative_squared_distance_scores,
    conv2d_all_geometries,
    batch_norm_train_mode,
    batch_norm_train_mode_rank2,
    batch_norm_eval_mode,
    max_pool_strict_and_floor,
    global_average_pool,
    small_network_end_to_end,
];
