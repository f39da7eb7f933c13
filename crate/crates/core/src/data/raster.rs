//! Flat binary raster container for image stacks and heatmaps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   8 bytes  magic "SSRASTER"
//! 8   u32      version (1)
//! 12  u32      count
//! 16  u32      channels
//! 20  u32      height
//! 24  u32      width
//! 28  u8       has_labels (0 or 1)
//! 29  f64[count·channels·height·width]   pixel values, sample-major then CHW
//!     u8[count]                          labels, present iff has_labels == 1
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 8] = b"SSRASTER";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 29;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    /// `[count, channels, height, width]`
    pub pixels: Tensor,
    pub labels: Option<Vec<u8>>,
}

pub fn write_raster(path: &Path, pixels: &Tensor, labels: Option<&[u8]>) -> Result<()> {
    let s = pixels.shape();
    if s.len() != 4 {
        return Err(Error::shape("raster", "[count, channels, height, width]", s));
    }
    if let Some(l) = labels {
        if l.len() != s[0] {
            return Err(Error::invalid(format!("{} labels for {} rasters", l.len(), s[0])));
        }
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * pixels.len() + s[0]);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for &d in s {
        let d = u32::try_from(d).map_err(|_| Error::invalid("raster dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.push(labels.is_some() as u8);
    for v in pixels.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = labels {
        buf.extend_from_slice(l);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(bad("missing SSRASTER header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    if u32_at(8) as u32 != VERSION {
        return Err(bad("unsupported raster version"));
    }
    let shape = vec![u32_at(12), u32_at(16), u32_at(20), u32_at(24)];
    let has_labels = match bytes[28] {
        0 => false,
        1 => true,
        _ => return Err(bad("has_labels flag must be 0 or 1")),
    };
    let n: usize = shape.iter().product();
    let expected = HEADER_LEN + 8 * n + if has_labels { shape[0] } else { 0 };
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let data = bytes[HEADER_LEN..HEADER_LEN + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = has_labels.then(|| bytes[HEADER_LEN + 8 * n..].to_vec());
    Ok(Raster {
        pixels: Tensor::new(shape, data)?,
        labels,
    })
}
