//! Per-patch feature vectors.
//!
//! The reference embedder is a deterministic 64-dimensional hand-crafted
//! feature (histograms, moments, gradients, block luminances); externally
//! computed embeddings of any dimension can be imported through the binary
//! store, which fills the same role as the frozen backbone the classifier
//! was designed around.

use std::io::{Read, Write};
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;

use crate::preprocess::{is_tissue_pixel, read_patch, PatchGrid};
use crate::slide::SlideImage;
use crate::util::crc32;

pub const REFERENCE_DIM: usize = 64;
pub const REFERENCE_EMBEDDER_ID: &str = "reference-v1";

const STORE_MAGIC: &[u8; 4] = b"HGE1";
const STORE_SCHEMA: u32 = 1;

/// Dense per-slide feature matrix, rows aligned 1:1 with the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub slide_id: String,
    pub dim: usize,
    pub embedder_id: String,
    /// Row-major, `n_rows * dim` values.
    pub data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn n_rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("expected a {expected}x{expected} patch, got {got_w}x{got_h}")]
    PatchShape { expected: u32, got_w: u32, got_h: u32 },
    #[error("embedding store format error in {path}: {message}")]
    Format { path: std::path::PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Slide(#[from] crate::slide::SlideError),
}

/// Deterministic 64-d reference feature of a patch, every value in [0, 1]:
/// 8-bin histograms per channel (24), channel mean/std (6), gradient
/// magnitude histogram (8), 5x5 block mean luminance (25), tissue fraction
/// proxy (1).
pub fn embed_patch_reference(patch: &RgbImage, patch_size_px: u32) -> Result<Vec<f64>, EmbedError> {
    if patch.width() != patch_size_px || patch.height() != patch_size_px {
        return Err(EmbedError::PatchShape {
            expected: patch_size_px,
            got_w: patch.width(),
            got_h: patch.height(),
        });
    }
    let n = f64::from(patch_size_px) * f64::from(patch_size_px);
    let mut features = Vec::with_capacity(REFERENCE_DIM);

    // Per-channel 8-bin histograms.
    let mut hist = [[0.0f64; 8]; 3];
    let mut sums = [0.0f64; 3];
    let mut sq_sums = [0.0f64; 3];
    let mut tissue = 0.0f64;
    for px in patch.pixels() {
        for c in 0..3 {
            let v = f64::from(px[c]);
            hist[c][(px[c] / 32) as usize] += 1.0;
            sums[c] += v;
            sq_sums[c] += v * v;
        }
        if is_tissue_pixel(px) {
            tissue += 1.0;
        }
    }
    for channel in &hist {
        for bin in channel {
            features.push(bin / n);
        }
    }

    // Channel means and standard deviations. Max std for 8-bit data is 127.5.
    for c in 0..3 {
        features.push(sums[c] / n / 255.0);
    }
    for c in 0..3 {
        let mean = sums[c] / n;
        let var = (sq_sums[c] / n - mean * mean).max(0.0);
        features.push(var.sqrt() / 127.5);
    }

    // Gradient magnitude histogram on central-difference luminance.
    let luma = |x: u32, y: u32| -> f64 {
        let p = patch.get_pixel(x, y);
        0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
    };
    let mut grad_hist = [0.0f64; 8];
    let mut grad_n = 0.0f64;
    for y in 1..patch_size_px - 1 {
        for x in 1..patch_size_px - 1 {
            let gx = (luma(x + 1, y) - luma(x - 1, y)) / 2.0;
            let gy = (luma(x, y + 1) - luma(x, y - 1)) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            let bin = ((mag / 255.0 * 8.0) as usize).min(7);
            grad_hist[bin] += 1.0;
            grad_n += 1.0;
        }
    }
    for bin in grad_hist {
        features.push(if grad_n > 0.0 { bin / grad_n } else { 0.0 });
    }

    // 5x5 block mean luminance.
    let block = patch_size_px / 5;
    for by in 0..5u32 {
        for bx in 0..5u32 {
            let x0 = bx * block;
            let y0 = by * block;
            let x1 = if bx == 4 { patch_size_px } else { x0 + block };
            let y1 = if by == 4 { patch_size_px } else { y0 + block };
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += luma(x, y);
                }
            }
            let count = f64::from((x1 - x0) * (y1 - y0));
            features.push(sum / count / 255.0);
        }
    }

    features.push(tissue / n);
    debug_assert_eq!(features.len(), REFERENCE_DIM);
    Ok(features)
}

/// Embeds every patch of a grid; row i corresponds to record i. Patch reads
/// and feature extraction run in parallel; rows are ordered by record index,
/// so parallel and serial execution produce identical matrices.
pub fn embed_slide(slide: &SlideImage, grid: &PatchGrid) -> Result<EmbeddingMatrix, EmbedError> {
    let rows: Vec<Vec<f64>> = grid
        .records
        .par_iter()
        .map(|record| {
            let patch = read_patch(slide, grid, record)?;
            embed_patch_reference(&patch, grid.patch_size_px)
        })
        .collect::<Result<_, _>>()?;
    let mut data = Vec::with_capacity(rows.len() * REFERENCE_DIM);
    for row in rows {
        data.extend_from_slice(&row);
    }
    Ok(EmbeddingMatrix {
        slide_id: grid.slide_id.clone(),
        dim: REFERENCE_DIM,
        embedder_id: REFERENCE_EMBEDDER_ID.to_string(),
        data,
    })
}

/// Binary store layout (little-endian):
/// magic `HGE1`, u32 schema, u32 dim, u64 n_rows, len-prefixed UTF-8
/// slide_id and embedder_id, then `n_rows * dim` f32 values, then CRC32 of
/// everything after the magic.
pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<(), EmbedError> {
    let mut payload: Vec<u8> = Vec::new();
    payload.extend_from_slice(&STORE_SCHEMA.to_le_bytes());
    payload.extend_from_slice(&(m.dim as u32).to_le_bytes());
    payload.extend_from_slice(&(m.n_rows() as u64).to_le_bytes());
    payload.extend_from_slice(&(m.slide_id.len() as u32).to_le_bytes());
    payload.extend_from_slice(m.slide_id.as_bytes());
    payload.extend_from_slice(&(m.embedder_id.len() as u32).to_le_bytes());
    payload.extend_from_slice(m.embedder_id.as_bytes());
    for v in &m.data {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let crc = crc32(&payload);

    let mut file = std::fs::File::create(path).map_err(|e| EmbedError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    file.write_all(STORE_MAGIC).map_err(|e| EmbedError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    file.write_all(&payload).map_err(|e| EmbedError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    file.write_all(&crc.to_le_bytes()).map_err(|e| EmbedError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn import_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbedError> {
    let format_err = |message: String| EmbedError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| EmbedError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    if bytes.len() < 8 || &bytes[..4] != STORE_MAGIC {
        return Err(format_err("bad magic".into()));
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(payload) != stored_crc {
        return Err(format_err("checksum mismatch (truncated or corrupt)".into()));
    }

    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8], EmbedError> {
        if cursor + n > payload.len() {
            return Err(EmbedError::Format {
                path: path.to_path_buf(),
                message: "unexpected end of payload".into(),
            });
        }
        let slice = &payload[cursor..cursor + n];
        cursor += n;
        Ok(slice)
    };

    let schema = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if schema != STORE_SCHEMA {
        return Err(format_err(format!("unsupported schema {schema}")));
    }
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let n_rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let id_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let slide_id = String::from_utf8(take(id_len)?.to_vec())
        .map_err(|_| format_err("slide_id is not UTF-8".into()))?;
    let emb_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let embedder_id = String::from_utf8(take(emb_len)?.to_vec())
        .map_err(|_| format_err("embedder_id is not UTF-8".into()))?;

    let expected = n_rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err("size overflow".into()))?;
    let float_bytes = take(expected)?;
    let mut data = Vec::with_capacity(n_rows * dim);
    for chunk in float_bytes.chunks_exact(4) {
        data.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
    }
    if cursor != payload.len() {
        return Err(format_err("trailing bytes after float data".into()));
    }
    Ok(EmbeddingMatrix {
        slide_id,
        dim,
        embedder_id,
        data,
    })
}
