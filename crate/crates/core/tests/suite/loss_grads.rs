//! Finite-difference checks of the composite losses through whole networks.

use fewshot::models::{random_images, Architecture, Model};
use fewshot::tensor::gradcheck::{param_grad_check, Coordinates};
use fewshot::tensor::{Similarity, Tape, Tensor};
use fewshot::training::{
    loss_cc, loss_location, loss_pn, loss_rotation, total_step_loss, FewShotBatch, Method, SslTask,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;
const EPS_NEAR_KINK: f64 = 1e-8;
const PER_TENSOR: usize = 12;

fn tiny_arch() -> Architecture {
    Architecture {
        widths: [3, 4, 3, 4],
        in_channels: 2,
        image_size: 16,
        classifier_classes: Some(3),
        rotation_head: Some([2, 3]),
        location_hidden: Some(5),
        patch_aux_classes: Some(3),
    }
}

/// Model with every parameter redrawn, so that no head starts at zero.
fn random_model(seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(tiny_arch(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = m.store().param_ids().collect();
    for id in ids {
        let p = m.store_mut().param_mut(id);
        let gamma = p.name.ends_with("log_gamma");
        p.value = Tensor::from_fn(p.value.shape(), |_| {
            if gamma {
                rng.gen_range(0.0..1.5)
            } else {
                rng.gen_range(-0.6..0.6)
            }
        });
    }
    m
}

fn images(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    random_images(&[n, 2, 16, 16], rng)
}

/// Central differences with step `EPS`; an instance that fails is checked
/// again with a much smaller step. A wrong backward pass fails both, while
/// a ReLU or max-pool kink within `EPS` of the point only fails the first.
fn check(
    what: &str,
    loss: impl Fn(
        &Model<f64>,
        &mut Tape<'_, f64>,
        &mut ChaCha8Rng,
    ) -> fewshot::Result<fewshot::tensor::Var>,
) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let model = random_model(seed);
        let run = |eps| {
            param_grad_check(
                model.store(),
                |t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    loss(&model, t, &mut rng)
                },
                eps,
                Coordinates::Sample {
                    per_tensor: PER_TENSOR,
                    seed,
                },
            )
            .unwrap()
        };
        let report = run(EPS);
        if report.max_rel_err() <= TOL {
            worst = worst.max(report.max_rel_err());
            continue;
        }
        let retry = run(EPS_NEAR_KINK);
        println!(
            "{what} seed {seed}: {:?} at eps {EPS:e}, rechecked at {EPS_NEAR_KINK:e}",
            report.worst()
        );
        assert!(
            retry.max_rel_err() <= TOL,
            "{what} seed {seed}: {:?}",
            retry.worst()
        );
        worst = worst.max(retry.max_rel_err());
    }
    worst
}

fn detail(worst: f64) -> String {
    format!("{INSTANCES} instances, max rel err {worst:.1e} (tol {TOL:.0e})")
}

pub fn cc_loss_gradient() -> String {
    detail(check("cc", |m, t, rng| {
        let x = images(rng, 2);
        loss_cc(m, t, &x, &[0, 2], false)
    }))
}

pub fn cc_loss_with_rotation_augmentation_gradient() -> String {
    detail(check("cc+rot-aug", |m, t, rng| {
        let x = images(rng, 2);
        loss_cc(m, t, &x, &[1, 2], true)
    }))
}

pub fn pn_loss_gradient_reaches_support_images() -> String {
    let mut worst = 0.0f64;
    for sim in [Similarity::NegSqEuclidean, Similarity::Cosine] {
        worst = worst.max(check("pn", |m, t, rng| {
            let support = images(rng, 3);
            let query = images(rng, 3);
            loss_pn(m, t, &support, &[0, 1, 2], &query, &[2, 0, 1], 3, sim)
        }));
    }
    detail(worst)
}

pub fn rotation_loss_gradient() -> String {
    detail(check("rotation", |m, t, rng| {
        let x = images(rng, 2);
        loss_rotation(m, t, &x)
    }))
}

pub fn location_loss_gradient() -> String {
    let plain = check("location", |m, t, rng| {
        let x = images(rng, 2);
        loss_location(m, t, &x, None, 17)
    });
    let aux = check("location+patch-aux", |m, t, rng| {
        let x = images(rng, 2);
        loss_location(m, t, &x, Some(&[1, 0]), 17)
    });
    detail(plain.max(aux))
}

pub fn semi_supervised_step_gradient() -> String {
    let cfg = TrainConfig {
        ssl_task: SslTask::Rotation,
        semi_supervised: true,
        alpha: 0.7,
        ..Default::default()
    };
    detail(check("cc+rot+unlabeled", |m, t, rng| {
        let few = FewShotBatch::Cc {
            images: images(rng, 2),
            labels: vec![2, 1],
        };
        let unl = images(rng, 2);
        Ok(total_step_loss(m, t, &few, Some(&unl), &cfg, 3)?.total)
    }))
}

pub fn pn_rotation_step_gradient() -> String {
    let cfg = TrainConfig {
        method: Method::Pn,
        ssl_task: SslTask::Rotation,
        ..Default::default()
    };
    detail(check("pn+rot", |m, t, rng| {
        let few = FewShotBatch::Pn {
            images: images(rng, 4),
            support_labels: vec![0, 1],
            query_labels: vec![1, 0],
            n_way: 2,
        };
        Ok(total_step_loss(m, t, &few, None, &cfg, 3)?.total)
    }))
}

pub fn location_with_aux_step_gradient() -> String {
    let cfg = TrainConfig {
        ssl_task: SslTask::Location,
        patch_aux_loss: true,
        ..Default::default()
    };
    detail(check("cc+loc+aux", |m, t, rng| {
        let few = FewShotBatch::Cc {
            images: images(rng, 2),
            labels: vec![0, 2],
        };
        Ok(total_step_loss(m, t, &few, None, &cfg, 11)?.total)
    }))
}

checks![
    cc_loss_gradient,
    cc_loss_with_rotation_augmentation_gradient,
    pn_loss_gradient_reaches_support_images,
    rotation_loss_gradient,
    location_loss_gradient,
    semi_supervised_step_gradient,
    pn_rotation_step_gradient,
    location_with_aux_step_gradient,
];
