use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

/// Side of the resized image; three 32-pixel grid cells.
pub const RESIZE: usize = 96;
const CELL: usize = RESIZE / 3;
/// Side of a patch cropped from a grid cell.
pub const CROP: usize = 24;
pub const GRAYSCALE_PROB: f64 = 0.66;
pub const NUM_NEIGHBORS: usize = 8;
/// Row-major index of the centre cell of the 3×3 grid.
pub const CENTER_CELL: usize = 4;
const STD_FLOOR: f64 = 1e-6;

/// Nine normalized `C × 24 × 24` patches. Row 0 is the centre patch and row
/// `p` (1..=8) the `p`-th neighbour in row-major order of the grid, skipping
/// the centre.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T> {
    pub patches: Tensor<T>,
    pub grayscale: bool,
    /// Top-left corner `(y, x)` of each crop in the 96×96 image, in patch order.
    pub offsets: [(usize, usize); 9],
}

impl<T: Real> PatchSet<T> {
    pub fn patch(&self, p: usize) -> &[T] {
        self.patches.row(p)
    }
}

/// Grid cell `(row, col)` of neighbour `p` (1..=8).
pub fn neighbor_cell(p: usize) -> (usize, usize) {
    assert!(
        (1..=NUM_NEIGHBORS).contains(&p),
        "neighbour index {p} outside 1..=8"
    );
    let cell = if p <= CENTER_CELL { p - 1 } else { p };
    (cell / 3, cell % 3)
}

/// Corner-aligned bilinear resize of one plane: output pixel `i` samples the
/// source at `i · (H - 1) / (96 - 1)`, interpolating between the two
/// neighbouring source pixels (clamped at the last row/column).
fn resize_plane(src: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n - 1) as f64 / (RESIZE - 1) as f64;
        let x0 = (x.floor() as usize).min(n - 1);
        let x1 = (x0 + 1).min(n - 1);
        (x0, x1, x - x0 as f64)
    };
    for i in 0..RESIZE {
        let (y0, y1, fy) = coord(i, h);
        for j in 0..RESIZE {
            let (x0, x1, fx) = coord(j, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[i * RESIZE + j] = top * (1.0 - fy) + bot * fy;
        }
    }
}

/// Resize to 96×96, convert to grayscale with probability 0.66 (one draw per
/// image), crop a random 24×24 patch inside each 32×32 cell of the 3×3 grid
/// and normalize each patch to zero mean and unit standard deviation.
/// Patches whose standard deviation falls below 1e-6 become all zeros.
pub fn extract_patches<T: Real>(img: &Tensor<T>, seed: u64) -> Result<PatchSet<T>> {
    let s = img.shape();
    if s.len() != 3 || s.iter().any(|&d| d == 0) {
        return Err(Error::shape(
            "extract_patches",
            format!("expected non-empty [C, H, W], got {s:?}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src: Vec<f64> = img.data().iter().map(|v| v.as_f64()).collect();
    let mut big = vec![0.0; c * RESIZE * RESIZE];
    for ch in 0..c {
        resize_plane(
            &src[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            &mut big[ch * RESIZE * RESIZE..(ch + 1) * RESIZE * RESIZE],
        );
    }

    let mut rng = seed::rng(seed);
    let grayscale = rng.gen::<f64>() < GRAYSCALE_PROB;
    if grayscale && c == 3 {
        let n = RESIZE * RESIZE;
        for k in 0..n {
            let y = 0.299 * big[k] + 0.587 * big[n + k] + 0.114 * big[2 * n + k];
            big[k] = y;
            big[n + k] = y;
            big[2 * n + k] = y;
        }
    }

    let per = c * CROP * CROP;
    let mut cells = vec![0.0f64; 9 * per];
    let mut cell_offsets = [(0, 0); 9];
    for cell in 0..9 {
        let oy = (cell / 3) * CELL + rng.gen_range(0..=CELL - CROP);
        let ox = (cell % 3) * CELL + rng.gen_range(0..=CELL - CROP);
        cell_offsets[cell] = (oy, ox);
        let dst = &mut cells[cell * per..(cell + 1) * per];
        for ch in 0..c {
            for i in 0..CROP {
                let row = &big[ch * RESIZE * RESIZE + (oy + i) * RESIZE + ox..][..CROP];
                dst[(ch * CROP + i) * CROP..][..CROP].copy_from_slice(row);
            }
        }
        normalize(dst);
    }

    let order = std::iter::once(CENTER_CELL).chain((0..9).filter(|&k| k != CENTER_CELL));
    let mut data = Vec::with_capacity(9 * per);
    let mut offsets = [(0, 0); 9];
    for (p, cell) in order.enumerate() {
        offsets[p] = cell_offsets[cell];
        data.extend(
            cells[cell * per..(cell + 1) * per]
                .iter()
                .map(|&v| T::from_f64(v)),
        );
    }
    Ok(PatchSet {
        patches: Tensor::new(&[9, c, CROP, CROP], data)?,
        grayscale,
        offsets,
    })
}

fn normalize(p: &mut [f64]) {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let std = (p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std < STD_FLOOR {
        p.iter_mut().for_each(|v| *v = 0.0);
    } else {
        p.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

/// The eight (centre, neighbour) pairs of a patch set with labels 1..=8.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationPairs<T> {
    pub center: Tensor<T>,
    pub neighbor: Tensor<T>,
    pub labels: Vec<usize>,
}

pub fn make_location_pairs<T: Real>(ps: &PatchSet<T>) -> Result<LocationPairs<T>> {
    let s = ps.patches.shape();
    if s.len() != 4 || s[0] != 9 {
        return Err(Error::Contract(format!(
            "a patch set holds 9 patches, got shape {s:?}"
        )));
    }
    let neighbors: Vec<usize> = (1..=NUM_NEIGHBORS).collect();
    Ok(LocationPairs {
        center: ps.patches.select_rows(&[0; NUM_NEIGHBORS])?,
        neighbor: ps.patches.select_rows(&neighbors)?,
        labels: neighbors,
    })
}
