//! Scoring, statistics and optimizer results against independent oracles.

use fewshot::data::{make_synthetic, SynthSpec};
use fewshot::evaluation::{eval_protocol, EvalProtocol};
use fewshot::models::{argmax_rows, compute_prototypes, pn_scores, Architecture, Model};
use fewshot::tensor::optim::{Sgd, SgdConfig};
use fewshot::tensor::{ParamStore, Similarity, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, d], |_| rng.gen_range(-3.0..3.0))
}

/// Class means computed one coordinate at a time.
pub fn mean_oracle(f: &Tensor<f64>, labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let d = f.shape()[1];
    (0..classes)
        .map(|c| {
            (0..d)
                .map(|k| {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for (i, &l) in labels.iter().enumerate() {
                        if l == c {
                            sum += f.data()[i * d + k];
                            count += 1.0;
                        }
                    }
                    sum / count
                })
                .collect()
        })
        .collect()
}

pub fn prototypes_match_coordinate_means() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n_way = rng.gen_range(2..8);
        let k = rng.gen_range(1..6);
        let d = rng.gen_range(1..40);
        let mut labels: Vec<usize> = (0..n_way * k).map(|i| i / k).collect();
        labels.rotate_left(rng.gen_range(0..n_way * k));
        let f = features(&mut rng, n_way * k, d);
        let p = compute_prototypes(&f, &labels, n_way).unwrap();
        let oracle = mean_oracle(&f, &labels, n_way);
        for c in 0..n_way {
            for k in 0..d {
                worst = worst.max((p.data()[c * d + k] - oracle[c][k]).abs());
            }
        }
    }
    assert!(worst <= 1e-6, "{worst}");
    format!("200 episodes, max abs diff {worst:.1e} (tol 1e-6)")
}

fn nearest(q: &[f64], protos: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, p) in protos.iter().enumerate() {
        let mut dist = 0.0;
        for k in 0..q.len() {
            dist += (q[k] - p[k]) * (q[k] - p[k]);
        }
        if dist < best_d {
            best_d = dist;
            best = j;
        }
    }
    best
}

pub fn pn_argmax_is_the_nearest_prototype() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut queries = 0;
    for _ in 0..1000 {
        let n_way = 5;
        let k = rng.gen_range(1..6);
        let m = 15;
        let d = rng.gen_range(4..32);
        let labels: Vec<usize> = (0..n_way * k).map(|i| i / k).collect();
        let support = features(&mut rng, n_way * k, d);
        let query = features(&mut rng, n_way * m, d);
        let protos = compute_prototypes(&support, &labels, n_way).unwrap();
        let predicted =
            argmax_rows(&pn_scores(&query, &protos, Similarity::NegSqEuclidean).unwrap());
        let oracle_protos = mean_oracle(&support, &labels, n_way);
        for (i, &p) in predicted.iter().enumerate() {
            assert_eq!(p, nearest(query.row(i), &oracle_protos));
            queries += 1;
        }
    }
    format!("1000 episodes, {queries} queries, all match")
}

pub fn eval_statistics_match_an_independent_recomputation() -> String {
    let ds = make_synthetic(&SynthSpec {
        base: 4,
        validation: 2,
        novel: 8,
        per_class: 20,
        size: 32,
        seed: 21,
    })
    .unwrap();
    let mut arch = Architecture::extractor([8; 4], 3, 32);
    arch.classifier_classes = Some(4);
    let model = Model::<f32>::new(arch, 4).unwrap();
    let protocol = EvalProtocol {
        episodes: 300,
        base_seed: 7,
        ..Default::default()
    };
    let r = eval_protocol(&model, &ds, &protocol, "abc", 1).unwrap();
    assert_eq!(r.episode_acc.len(), 300);
    // Welford's running moments.
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for &a in &r.episode_acc {
        n += 1.0;
        let delta = a - mean;
        mean += delta / n;
        m2 += delta * (a - mean);
    }
    let ci = 1.96 * (m2 / (n - 1.0)).sqrt() / n.sqrt();
    let (dm, dc) = ((r.mean - mean).abs(), (r.ci95 - ci).abs());
    assert!(
        dm <= 1e-12 && dc <= 1e-12,
        "mean off by {dm}, ci off by {dc}"
    );
    assert!(r.ci95_defined);
    assert_eq!(r.checkpoint_sha256, "abc");
    assert!(r.episode_acc.iter().all(|a| (0.0..=1.0).contains(a)));
    format!("300 episodes, mean diff {dm:.1e}, ci diff {dc:.1e} (tol 1e-12)")
}

/// With a constant gradient `g` and no decay, two steps move a parameter
/// by `lr * g * (2 + momentum)`.
pub fn sgd_two_steps_match_the_closed_form() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (lr, momentum) = if case == 0 {
            (1.0, 0.9)
        } else {
            (rng.gen_range(1e-3..1.0), rng.gen_range(0.0..0.99))
        };
        let start = features(&mut rng, 3, 4);
        let grad = features(&mut rng, 3, 4);
        let mut s = ParamStore::<f64>::new();
        let id = s.add_param("p", start.clone(), true).unwrap();
        let mut opt = Sgd::new(
            &s,
            SgdConfig {
                momentum,
                weight_decay: 0.0,
            },
        );
        for _ in 0..2 {
            s.param_mut(id).grad = grad.clone();
            opt.step(&mut s, lr);
        }
        for ((v, v0), g) in s
            .param(id)
            .value
            .data()
            .iter()
            .zip(start.data())
            .zip(grad.data())
        {
            let want = v0 - lr * g * (2.0 + momentum);
            worst = worst.max((v - want).abs() / want.abs().max(1.0));
        }
    }
    assert!(worst <= 1e-7, "{worst}");
    format!("200 cases, max rel err {worst:.1e} (tol 1e-7)")
}

checks![
    prototypes_match_coordinate_means,
    pn_argmax_is_the_nearest_prototype,
    eval_statistics_match_an_independent_recomputation,
    sgd_two_steps_match_the_closed_form,
];
