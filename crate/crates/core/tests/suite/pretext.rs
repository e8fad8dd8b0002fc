//! Invariants of the rotation and patch pipelines.

use fewshot::ssl::{extract_patches, make_location_pairs, neighbor_cell, rotate_image, Rotation};
use fewshot::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Tensor<f32> {
    Tensor::from_fn(&[c, n, n], |_| rng.gen_range(0u8..=255) as f32)
}

/// Per-patch mean and population deviation; the largest distance of
/// either from 0 and 1.
pub fn patch_moment_error(patch: &[f32]) -> f64 {
    let v: Vec<f64> = patch.iter().map(|&x| x as f64).collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    m.abs().max((sd - 1.0).abs())
}

pub fn rotations_form_the_cyclic_group_of_order_four() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let n = rng.gen_range(1..9);
        let c = rng.gen_range(1..4);
        let img = random_image(&mut rng, c, n);
        let mut sorted = img.data().to_vec();
        sorted.sort_by(f32::total_cmp);
        for a in Rotation::ALL {
            let ra = rotate_image(&img, a).unwrap();
            let mut perm = ra.data().to_vec();
            perm.sort_by(f32::total_cmp);
            assert_eq!(perm, sorted);
            for b in Rotation::ALL {
                let rab = rotate_image(&ra, b).unwrap();
                assert_eq!(rab, rotate_image(&img, a.compose(b)).unwrap());
            }
        }
        let mut x = img.clone();
        for _ in 0..4 {
            x = rotate_image(&x, Rotation::ALL[1]).unwrap();
        }
        assert_eq!(x, img);
    }
    "1000 images: permutation, composition and order four hold exactly".into()
}

pub fn patches_are_standardized() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for i in 0..300u64 {
        let size = rng.gen_range(32..48);
        let img = random_image(&mut rng, if i % 2 == 0 { 3 } else { 1 }, size);
        let ps = extract_patches(&img, i).unwrap();
        for p in 0..9 {
            worst = worst.max(patch_moment_error(ps.patch(p)));
        }
    }
    assert!(worst <= 1e-3, "{worst}");
    format!("2700 patches, max |mean| or |sd - 1| {worst:.1e} (tol 1e-3)")
}

pub fn grayscale_frequency_matches_probability() -> String {
    let img = Tensor::<f32>::from_fn(&[3, 32, 32], |i| (i % 97) as f32);
    let hits = (0..10_000u64)
        .filter(|&s| extract_patches(&img, s).unwrap().grayscale)
        .count();
    let freq = hits as f64 / 10_000.0;
    assert!((freq - 0.66).abs() <= 0.01, "{freq}");
    format!("10000 draws, frequency {freq:.4} (0.66 +- 0.01)")
}

pub fn location_labels_biject_with_neighbor_cells() -> String {
    let img = Tensor::<f32>::from_fn(&[1, 32, 32], |i| (i % 13) as f32);
    let pairs = make_location_pairs(&extract_patches(&img, 0).unwrap()).unwrap();
    let mut cells: Vec<_> = pairs.labels.iter().map(|&p| neighbor_cell(p)).collect();
    assert_eq!(cells[0], (0, 0), "label 1 is above and to the left");
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), 8);
    assert!(cells.iter().all(|&c| c != (1, 1)));
    "8 labels map onto the 8 cells around the centre".into()
}

checks![
    rotations_form_the_cyclic_group_of_order_four,
    patches_are_standardized,
    grayscale_frequency_matches_probability,
    location_labels_biject_with_neighbor_cells,
];
