//! FSDS container files.
//!
//! ```text
//! 0..8        b"FSDS0001"
//! 8..12       u32 LE header length L
//! 12..12+L    UTF-8 JSON header
//! then        num_images × u32 LE labels
//! then        num_images × C×H×W uint8 pixels, image-major, row-major CHW
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetContainer, Split};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FSDS0001";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    num_images: u64,
    channels: u32,
    height: u32,
    width: u32,
    class_names: Vec<String>,
    split: SplitHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitHeader {
    base: Vec<u32>,
    validation: Vec<u32>,
    novel: Vec<u32>,
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

impl DatasetContainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let ids = |s: Split| self.classes(s).into_iter().map(|c| c as u32).collect();
        let (c, h, w) = self.image_shape();
        let header = Header {
            version: VERSION,
            num_images: self.len() as u64,
            channels: c as u32,
            height: h as u32,
            width: w as u32,
            class_names: self.class_names().to_vec(),
            split: SplitHeader {
                base: ids(Split::Base),
                validation: ids(Split::Validation),
                novel: ids(Split::Novel),
            },
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.len() + self.pixels().len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for &l in self.labels() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(self.pixels());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
            return Err(format_err(0, "bad magic, expected \"FSDS0001\""));
        }
        if bytes.len() < 12 {
            return Err(format_err(bytes.len(), "truncated header length"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12 + hlen;
        if bytes.len() < body {
            return Err(format_err(
                bytes.len(),
                format!("header of {hlen} bytes runs past end of file"),
            ));
        }
        let header: Header = serde_json::from_slice(&bytes[12..body]).map_err(|e| {
            let at = if e.line() == 1 {
                e.column().saturating_sub(1)
            } else {
                0
            };
            format_err(12 + at, format!("invalid header: {e}"))
        })?;
        if header.version != VERSION {
            return Err(format_err(
                12,
                format!("unsupported version {}", header.version),
            ));
        }
        let nclass = header.class_names.len();
        let mut class_split: Vec<Option<Split>> = vec![None; nclass];
        for (split, ids) in [
            (Split::Base, &header.split.base),
            (Split::Validation, &header.split.validation),
            (Split::Novel, &header.split.novel),
        ] {
            for &id in ids {
                let slot = class_split.get_mut(id as usize).ok_or_else(|| {
                    format_err(
                        12,
                        format!("split {} names unknown class {id}", split.name()),
                    )
                })?;
                if let Some(prev) = slot {
                    return Err(format_err(
                        12,
                        format!(
                            "class {id} listed in both {} and {}",
                            prev.name(),
                            split.name()
                        ),
                    ));
                }
                *slot = Some(split);
            }
        }
        let class_split = class_split
            .into_iter()
            .enumerate()
            .map(|(c, s)| s.ok_or_else(|| format_err(12, format!("class {c} is in no split"))))
            .collect::<Result<Vec<_>>>()?;

        let n = header.num_images as usize;
        let (c, h, w) = (
            header.channels as usize,
            header.height as usize,
            header.width as usize,
        );
        let label_bytes = n
            .checked_mul(4)
            .ok_or_else(|| format_err(12, "num_images overflows"))?;
        let pixel_bytes = n
            .checked_mul(c * h * w)
            .ok_or_else(|| format_err(12, "image payload size overflows"))?;
        if bytes.len() < body + label_bytes {
            return Err(format_err(
                bytes.len(),
                format!("truncated labels: need {label_bytes} bytes from offset {body}"),
            ));
        }
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let at = body + 4 * i;
            let l = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            if l as usize >= nclass {
                return Err(format_err(
                    at,
                    format!("image {i} has label {l} but only {nclass} classes exist"),
                ));
            }
            labels.push(l);
        }
        let px = body + label_bytes;
        if bytes.len() < px + pixel_bytes {
            return Err(format_err(
                bytes.len(),
                format!("truncated pixels: need {pixel_bytes} bytes from offset {px}"),
            ));
        }
        if bytes.len() > px + pixel_bytes {
            return Err(format_err(
                px + pixel_bytes,
                "trailing bytes after pixel payload",
            ));
        }
        DatasetContainer::new(
            (c, h, w),
            bytes[px..].to_vec(),
            labels,
            header.class_names,
            class_split,
        )
        .map_err(|e| format_err(12, e.to_string()))
    }
}

pub fn save_dataset(ds: &DatasetContainer, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetContainer> {
    DatasetContainer::from_bytes(&fs::read(path)?)
}
