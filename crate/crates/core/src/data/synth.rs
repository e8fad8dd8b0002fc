//! Procedural glyph dataset.
//!
//! A class is a combination of glyph shape, stroke count (the glyph plus 0–2
//! underline bars), fill pattern and hue band. Every image draws its own
//! position, scale, rotation jitter (at most 15°), colour jitter and textured
//! background. All glyphs lack 90° rotational symmetry.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetContainer, Split};
use crate::error::{Error, Result};
use crate::seed;

const SHAPES: [&str; 8] = [
    "ell", "tee", "eff", "pee", "triangle", "arrow", "seven", "cup",
];
const STROKES: usize = 3;
const FILLS: [&str; 4] = ["solid", "stripes", "checker", "gradient"];
const HUES: [&str; 6] = ["red", "yellow", "green", "cyan", "blue", "magenta"];

/// Number of distinct classes the generator can produce.
pub const SYNTH_CAPACITY: usize = SHAPES.len() * STROKES * FILLS.len() * HUES.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub base: usize,
    pub validation: usize,
    pub novel: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            base: 24,
            validation: 8,
            novel: 8,
            per_class: 200,
            size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ClassStyle {
    shape: usize,
    strokes: usize,
    fill: usize,
    hue: usize,
}

impl ClassStyle {
    fn from_index(mut k: usize) -> Self {
        let hue = k % HUES.len();
        k /= HUES.len();
        let fill = k % FILLS.len();
        k /= FILLS.len();
        let strokes = 1 + k % STROKES;
        k /= STROKES;
        ClassStyle {
            shape: k,
            strokes,
            fill,
            hue,
        }
    }

    fn name(&self) -> String {
        format!(
            "{}-s{}-{}-{}",
            SHAPES[self.shape], self.strokes, FILLS[self.fill], HUES[self.hue]
        )
    }
}

pub fn make_synthetic(spec: &SynthSpec) -> Result<DatasetContainer> {
    if spec.size < 32 {
        return Err(Error::Config(format!(
            "synthetic image size must be at least 32, got {}",
            spec.size
        )));
    }
    if spec.per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    let total = spec
        .base
        .checked_add(spec.validation)
        .and_then(|t| t.checked_add(spec.novel))
        .unwrap_or(usize::MAX);
    if total > SYNTH_CAPACITY {
        return Err(Error::Capacity(format!(
            "{total} classes requested, the glyph generator can produce {SYNTH_CAPACITY}"
        )));
    }
    if total == 0 {
        return Err(Error::Config("at least one class is required".into()));
    }
    let mut combos: Vec<usize> = (0..SYNTH_CAPACITY).collect();
    combos.shuffle(&mut seed::child_rng(spec.seed, &[0]));
    let styles: Vec<ClassStyle> = combos[..total]
        .iter()
        .map(|&k| ClassStyle::from_index(k))
        .collect();

    let hw = spec.size;
    let per_image = 3 * hw * hw;
    let mut pixels = Vec::with_capacity(total * spec.per_class * per_image);
    let mut labels = Vec::with_capacity(total * spec.per_class);
    for (c, style) in styles.iter().enumerate() {
        for j in 0..spec.per_class {
            let mut rng = seed::child_rng(spec.seed, &[1, c as u64, j as u64]);
            render(style, hw, &mut rng, &mut pixels);
            labels.push(c as u32);
        }
    }
    let split = (0..total)
        .map(|c| {
            if c < spec.base {
                Split::Base
            } else if c < spec.base + spec.validation {
                Split::Validation
            } else {
                Split::Novel
            }
        })
        .collect();
    DatasetContainer::new(
        (3, hw, hw),
        pixels,
        labels,
        styles.iter().map(ClassStyle::name).collect(),
        split,
    )
}

fn in_box(u: f64, v: f64, u0: f64, u1: f64, v0: f64, v1: f64) -> bool {
    u >= u0 && u <= u1 && v >= v0 && v <= v1
}

/// Glyph membership in local coordinates, `u` rightwards and `v` downwards,
/// both in `[-1, 1]`.
fn glyph_contains(shape: usize, u: f64, v: f64) -> bool {
    if !in_box(u, v, -0.9, 0.9, -0.9, 0.9) {
        return false;
    }
    match shape {
        0 => u <= -0.4 || v >= 0.4,
        1 => v <= -0.4 || u.abs() <= 0.25,
        2 => u <= -0.4 || v <= -0.45 || in_box(u, v, -0.9, 0.5, -0.15, 0.25),
        3 => u <= -0.4 || (v <= 0.1 && !in_box(u, v, -0.4, 0.45, -0.5, -0.3)),
        4 => u.abs() <= 0.5 * (v + 0.9),
        5 => (v <= 0.0 && u.abs() <= v + 0.9) || u.abs() <= 0.25,
        6 => {
            // Top bar plus a diagonal from (0.9, -0.45) to (-0.3, 0.9).
            let (ax, ay, bx, by) = (0.9, -0.45, -0.3, 0.9);
            let (dx, dy) = (bx - ax, by - ay);
            let cross = ((u - ax) * dy - (v - ay) * dx).abs() / (dx * dx + dy * dy).sqrt();
            v <= -0.45 || (cross <= 0.25 && v >= -0.45)
        }
        _ => u.abs() >= 0.4 || v >= 0.4,
    }
}

fn fill_factor(fill: usize, u: f64, v: f64) -> f64 {
    match fill {
        0 => 1.0,
        1 => {
            if (u * 3.0 + 10.0).floor() as i64 % 2 == 0 {
                1.0
            } else {
                0.5
            }
        }
        2 => {
            if ((u * 2.5 + 10.0).floor() as i64 + (v * 2.5 + 10.0).floor() as i64) % 2 == 0 {
                1.0
            } else {
                0.5
            }
        }
        _ => 0.45 + 0.55 * (u + 1.0) / 2.0,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn render(style: &ClassStyle, hw: usize, rng: &mut impl Rng, out: &mut Vec<u8>) {
    let n = hw as f64;
    let bg = hsv_to_rgb(
        rng.gen_range(0.0..360.0),
        rng.gen_range(0.0..0.35),
        rng.gen_range(0.15..0.45),
    );
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let a = rng.gen_range(0.0..PI);
            let f = rng.gen_range(1.0..4.0) * 2.0 * PI / n;
            (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let fg = hsv_to_rgb(
        style.hue as f64 * 60.0 + rng.gen_range(-15.0..15.0),
        rng.gen_range(0.65..1.0),
        rng.gen_range(0.75..1.0),
    );
    // Glyph occupies v in [-1, 1]; each extra stroke adds a bar below it.
    let extent = 1.0 + 0.25 * (style.strokes - 1) as f64;
    let s = rng.gen_range(0.30..0.38) * n / extent.max(1.0).sqrt();
    let cx = n / 2.0 + rng.gen_range(-0.1..0.1) * n;
    let cy = n / 2.0 + rng.gen_range(-0.1..0.1) * n;
    let theta = rng.gen_range(-15.0f64..15.0).to_radians();
    let (sin, cos) = theta.sin_cos();
    let v_shift = 0.25 * (style.strokes - 1) as f64;

    let mut rgb = vec![[0.0f64; 3]; hw * hw];
    for py in 0..hw {
        for px in 0..hw {
            let mut shade = 0.0;
            let mut cover = 0.0;
            for sy in 0..2 {
                for sx in 0..2 {
                    let x = px as f64 + 0.25 + 0.5 * sx as f64 - cx;
                    let y = py as f64 + 0.25 + 0.5 * sy as f64 - cy;
                    let u = (cos * x + sin * y) / s;
                    let v = (-sin * x + cos * y) / s + v_shift;
                    let bar = (1..style.strokes).any(|k| {
                        let top = 0.95 + 0.25 * (k - 1) as f64 + 0.1;
                        in_box(u, v, -0.9, 0.9, top, top + 0.15)
                    });
                    if glyph_contains(style.shape, u, v) {
                        cover += 0.25;
                        shade += 0.25 * fill_factor(style.fill, u, v);
                    } else if bar {
                        cover += 0.25;
                        shade += 0.25;
                    }
                }
            }
            let (x, y) = (px as f64, py as f64);
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| 0.07 * (fx * x + fy * y + ph).sin())
                .sum::<f64>()
                + rng.gen_range(-0.03..0.03);
            let px_rgb = &mut rgb[py * hw + px];
            for ch in 0..3 {
                let back = (bg[ch] + tex).clamp(0.0, 1.0);
                px_rgb[ch] = back * (1.0 - cover) + fg[ch] * shade;
            }
        }
    }
    for ch in 0..3 {
        out.extend(
            rgb.iter()
                .map(|p| (p[ch].clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            base: 4,
            validation: 2,
            novel: 2,
            per_class: 5,
            size: 32,
            seed: 3,
        }
    }

    #[test]
    fn counts_and_splits() {
        let ds = make_synthetic(&small()).unwrap();
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.image_shape(), (3, 32, 32));
        assert_eq!(ds.classes(Split::Base).len(), 4);
        assert_eq!(ds.classes(Split::Novel), vec![6, 7]);
        let mut names = ds.class_names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = make_synthetic(&small()).unwrap();
        assert_eq!(a, make_synthetic(&small()).unwrap());
        let b = make_synthetic(&SynthSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.pixels(), b.pixels());
    }

    #[test]
    fn images_of_a_class_differ() {
        let ds = make_synthetic(&small()).unwrap();
        for c in 0..ds.num_classes() {
            let imgs = ds.class_images(c);
            assert_ne!(ds.image(imgs[0]), ds.image(imgs[1]));
            let means: Vec<f64> = imgs
                .iter()
                .map(|&i| {
                    ds.image(i).iter().map(|&p| p as f64).sum::<f64>() / ds.image_len() as f64
                })
                .collect();
            let m = means.iter().sum::<f64>() / means.len() as f64;
            assert!(means.iter().map(|x| (x - m).powi(2)).sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn capacity_and_size_limits() {
        assert!(matches!(
            make_synthetic(&SynthSpec {
                base: SYNTH_CAPACITY,
                ..small()
            }),
            Err(Error::Capacity(_))
        ));
        assert!(make_synthetic(&SynthSpec {
            base: SYNTH_CAPACITY - 4,
            ..small()
        })
        .is_ok());
        assert!(matches!(
            make_synthetic(&SynthSpec {
                size: 16,
                ..small()
            }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn glyphs_are_not_rotation_invariant() {
        let grid: Vec<(f64, f64)> = (0..41)
            .flat_map(|i| (0..41).map(move |j| (-1.0 + i as f64 * 0.05, -1.0 + j as f64 * 0.05)))
            .collect();
        for shape in 0..SHAPES.len() {
            let diff = grid
                .iter()
                .filter(|&&(u, v)| glyph_contains(shape, u, v) != glyph_contains(shape, v, -u))
                .count();
            assert!(diff > 50, "shape {} too symmetric: {diff}", SHAPES[shape]);
        }
    }
}
