//! Flat binary image container.
//!
//! Layout (little-endian): 8-byte magic, u32 version, u64 count, u32 height,
//! u32 width, u32 channels, then `count * height * width * channels` bytes of
//! HWC pixels.

use std::fs;
use std::path::Path;

use super::RawImage;
use crate::error::{Error, Result};

pub const PACKED_MAGIC: &[u8; 8] = b"MTAFIMG\0";
pub const PACKED_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 4 + 4 + 4;

pub fn write_packed_images(path: &Path, images: &[RawImage]) -> Result<()> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut buf = Vec::with_capacity(HEADER_LEN + images.len() * h * w * 3);
    buf.extend_from_slice(PACKED_MAGIC);
    buf.extend_from_slice(&PACKED_VERSION.to_le_bytes());
    buf.extend_from_slice(&(images.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&3u32.to_le_bytes());
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::dim(
                "packed image",
                &[h, w],
                &[img.height, img.width],
            ));
        }
        buf.extend_from_slice(&img.pixels);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_packed_images(path: &Path) -> Result<Vec<RawImage>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("file shorter than header".into()));
    }
    if &bytes[..8] != PACKED_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != PACKED_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: PACKED_VERSION,
        });
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let (h, w, c) = (u32_at(20) as usize, u32_at(24) as usize, u32_at(28) as usize);
    if c != 3 {
        return Err(corrupt(format!("expected 3 channels, header says {c}")));
    }
    let per = h * w * c;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * per {
        return Err(corrupt(format!(
            "expected {} pixel bytes, found {}",
            count * per,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(per.max(1))
        .take(count)
        .map(|px| RawImage {
            height: h,
            width: w,
            pixels: px.to_vec(),
        })
        .collect())
}
