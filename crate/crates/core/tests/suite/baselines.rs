//! Untrained losses sit at the uniform-prediction values.

use fewshot::data::{make_synthetic, DatasetContainer, Split, SynthSpec};
use fewshot::models::{random_images, Architecture, Model};
use fewshot::tensor::{Similarity, Tape};
use fewshot::training::{loss_cc, loss_location, loss_pn, loss_rotation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BATCH: usize = 256;
const REL_TOL: f64 = 0.05;

fn data(size: usize) -> DatasetContainer {
    make_synthetic(&SynthSpec {
        base: 64,
        validation: 2,
        novel: 5,
        per_class: 52,
        size,
        seed: 3,
    })
    .unwrap()
}

fn batch_indices(ds: &DatasetContainer, split: Split, n: usize) -> Vec<usize> {
    let all = ds.split_images(split);
    let stride = all.len() / n;
    (0..n).map(|i| all[i * stride]).collect()
}

fn assert_near(what: &str, got: f64, want: f64) -> String {
    let rel = (got - want).abs() / want;
    assert!(rel <= REL_TOL, "{what}: {got} vs {want}");
    format!(
        "{what} {got:.4} vs uniform {want:.4} ({:.2}% off, tol 5%)",
        100.0 * rel
    )
}

pub fn cc_loss_is_log_num_classes() -> String {
    // Conv-4-64 at 64 px: 1024-d features keep the gamma^2 / 2d excess small.
    let ds = data(64);
    let mut arch = Architecture::extractor([64; 4], 3, 64);
    arch.classifier_classes = Some(64);
    let model = Model::<f32>::new(arch, 1).unwrap();
    let idx = batch_indices(&ds, Split::Base, BATCH);
    let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
    let mut t = Tape::with_params(model.store());
    let l = loss_cc(&model, &mut t, &ds.batch(&idx), &labels, false).unwrap();
    assert_near("cc", t.value(l).item() as f64, 64f64.ln())
}

/// Noise images carry no class information, so nothing separates the
/// prototypes beyond chance. (Synthetic classes differ in colour, which a
/// random extractor already picks up.)
pub fn pn_loss_is_log_five() -> String {
    let model = Model::<f32>::new(Architecture::extractor([32; 4], 3, 32), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let per = BATCH / 5;
    let support = random_images(&[5, 3, 32, 32], &mut rng);
    let query = random_images(&[5 * (per - 1), 3, 32, 32], &mut rng);
    let support_labels: Vec<usize> = (0..5).collect();
    let query_labels: Vec<usize> = (0..5 * (per - 1)).map(|i| i / (per - 1)).collect();
    let mut values = Vec::new();
    for sim in [Similarity::Cosine, Similarity::NegSqEuclidean] {
        let mut t = Tape::with_params(model.store());
        let l = loss_pn(
            &model,
            &mut t,
            &support,
            &support_labels,
            &query,
            &query_labels,
            5,
            sim,
        )
        .unwrap();
        values.push(t.value(l).item() as f64);
    }
    let gated = assert_near("pn (cosine)", values[0], 5f64.ln());
    format!("{gated}; squared euclidean {:.4}, not gated", values[1])
}

pub fn rotation_loss_is_four_log_four() -> String {
    let ds = data(32);
    let mut arch = Architecture::extractor([32; 4], 3, 32);
    arch.rotation_head = Some([32, 32]);
    let model = Model::<f32>::new(arch, 3).unwrap();
    let idx = batch_indices(&ds, Split::Base, BATCH);
    let mut t = Tape::with_params(model.store());
    let l = loss_rotation(&model, &mut t, &ds.batch(&idx)).unwrap();
    assert_near("rotation", t.value(l).item() as f64, 4.0 * 4f64.ln())
}

pub fn location_loss_is_eight_log_eight() -> String {
    let ds = data(32);
    let mut arch = Architecture::extractor([32; 4], 3, 32);
    arch.location_hidden = Some(64);
    let model = Model::<f32>::new(arch, 4).unwrap();
    let idx = batch_indices(&ds, Split::Base, BATCH);
    let mut t = Tape::with_params(model.store());
    let l = loss_location(&model, &mut t, &ds.batch(&idx), None, 5).unwrap();
    assert_near("location", t.value(l).item() as f64, 8.0 * 8f64.ln())
}

checks![
    cc_loss_is_log_num_classes,
    pn_loss_is_log_five,
    rotation_loss_is_four_log_four,
    location_loss_is_eight_log_eight,
];
