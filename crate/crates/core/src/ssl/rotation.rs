use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Counter-clockwise rotation by `index · 90°`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rotation(u8);

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation(0), Rotation(1), Rotation(2), Rotation(3)];

    pub fn new(index: usize) -> Result<Self> {
        if index < 4 {
            Ok(Rotation(index as u8))
        } else {
            Err(Error::Label(format!("rotation index {index} outside 0..4")))
        }
    }

    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg {
            0 | 90 | 180 | 270 => Ok(Rotation((deg / 90) as u8)),
            _ => Err(Error::Label(format!(
                "{deg}° is not a multiple of 90 below 360"
            ))),
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn degrees(self) -> u32 {
        self.0 as u32 * 90
    }

    pub fn compose(self, other: Rotation) -> Rotation {
        Rotation((self.0 + other.0) % 4)
    }
}

/// Rotate every `h × w` plane of a `[.., H, W]` slice. For one quarter turn
/// `out[c, i, j] = img[c, j, W - 1 - i]`.
fn rotate_planes<T: Copy>(src: &[T], n: usize, r: Rotation, dst: &mut Vec<T>) {
    for plane in src.chunks(n * n) {
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = match r.0 {
                    0 => (i, j),
                    1 => (j, n - 1 - i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (n - 1 - j, i),
                };
                dst.push(plane[si * n + sj]);
            }
        }
    }
}

fn square_side(shape: &[usize], op: &'static str) -> Result<usize> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h != w {
        return Err(Error::shape(
            op,
            format!("rotation needs square images, got {h}x{w}"),
        ));
    }
    Ok(h)
}

/// Rotate a `[C, H, W]` image; an exact pixel permutation.
pub fn rotate_image<T: Real>(img: &Tensor<T>, r: Rotation) -> Result<Tensor<T>> {
    if img.shape().len() != 3 {
        return Err(Error::shape(
            "rotate_image",
            format!("expected [C, H, W], got {:?}", img.shape()),
        ));
    }
    let n = square_side(img.shape(), "rotate_image")?;
    let mut out = Vec::with_capacity(img.len());
    rotate_planes(img.data(), n, r, &mut out);
    Tensor::new(img.shape(), out)
}

/// All four rotations of each image of a `[B, C, H, W]` batch; output row
/// `4i + r` is image `i` rotated by `r`, with label `r`.
pub fn make_rotation_batch<T: Real>(imgs: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = imgs.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "make_rotation_batch",
            format!("expected [B, C, H, W], got {s:?}"),
        ));
    }
    let n = square_side(s, "make_rotation_batch")?;
    let per = s[1] * n * n;
    let mut out = Vec::with_capacity(4 * imgs.len());
    let mut labels = Vec::with_capacity(4 * s[0]);
    for img in imgs.data().chunks(per) {
        for r in Rotation::ALL {
            rotate_planes(img, n, r, &mut out);
            labels.push(r.index());
        }
    }
    Ok((Tensor::new(&[4 * s[0], s[1], n, n], out)?, labels))
}
