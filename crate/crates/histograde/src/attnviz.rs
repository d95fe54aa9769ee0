//! Attention heatmap overlays.
//!
//! Per-region CLS attention weights are min-max scaled, colored on a
//! blue-to-red ramp, upsampled to the region's pixel footprint, and
//! alpha-blended over the region imagery. Grid cells without a retained
//! patch stay unshaded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::preprocess::{read_patch, PatchGrid};
use crate::slide::{CellAnnotation, CellType, SlideImage};
use crate::vit::{AttentionMap, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayConfig {
    pub alpha: f64,
    pub upsampling: Upsampling,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig {
            alpha: 0.45,
            upsampling: Upsampling::Bilinear,
        }
    }
}

impl OverlayConfig {
    pub fn validate(&self) -> Result<(), AttnVizError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(AttnVizError::Config(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AttnVizError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Slide(#[from] crate::slide::SlideError),
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Annotation overlay palette (distinct from the generator's rendering
/// palette): epithelial red, macrophage blue, neutrophil yellow, lymphocyte
/// green.
pub fn annotation_palette() -> BTreeMap<CellType, [u8; 3]> {
    BTreeMap::from([
        (CellType::Epithelial, [255, 0, 0]),
        (CellType::Macrophage, [0, 0, 255]),
        (CellType::Neutrophil, [255, 255, 0]),
        (CellType::Lymphocyte, [0, 255, 0]),
    ])
}

/// Blue-cyan-yellow-red ramp; input clamped to [0, 1].
pub fn colormap_blue_red(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [0.0, 0.0, 255.0]),
        (1.0 / 3.0, [0.0, 255.0, 255.0]),
        (2.0 / 3.0, [255.0, 255.0, 0.0]),
        (1.0, [255.0, 0.0, 0.0]),
    ];
    for pair in stops.windows(2) {
        let (t0, c0) = pair[0];
        let (t1, c1) = pair[1];
        if t <= t1 {
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return [
                (c0[0] + (c1[0] - c0[0]) * f).round() as u8,
                (c0[1] + (c1[1] - c0[1]) * f).round() as u8,
                (c0[2] + (c1[2] - c0[2]) * f).round() as u8,
            ];
        }
    }
    [255, 0, 0]
}

/// Mid-ramp color used for constant attention maps.
pub fn mid_ramp() -> [u8; 3] {
    colormap_blue_red(0.5)
}

/// The region's pixel rect at the extraction level, clipped to the level.
fn region_pixel_rect(grid: &PatchGrid, region: &Region, region_side: u32) -> (u32, u32, u32, u32) {
    let ps = grid.patch_size_px;
    let x0 = region.origin.0 * ps;
    let y0 = region.origin.1 * ps;
    let w = (region_side * ps).min(grid.level_width.saturating_sub(x0));
    let h = (region_side * ps).min(grid.level_height.saturating_sub(y0));
    (x0, y0, w, h)
}

/// Reads the raw RGB imagery of a region (patches stitched in grid order,
/// white where the slide ends).
pub fn read_region_image(
    slide: &SlideImage,
    grid: &PatchGrid,
    region: &Region,
    region_side: u32,
) -> Result<RgbImage, AttnVizError> {
    let ps = grid.patch_size_px;
    let (_, _, w, h) = region_pixel_rect(grid, region, region_side);
    let mut out = RgbImage::from_pixel(region_side * ps, region_side * ps, Rgb([255, 255, 255]));
    for (&member, &(rx, ry)) in region.members.iter().zip(&region.rel_coords) {
        let record = &grid.records[member];
        let patch = read_patch(slide, grid, record)?;
        image::imageops::overlay(&mut out, &patch, i64::from(rx * ps), i64::from(ry * ps));
    }
    // Clip to the slide footprint.
    Ok(image::imageops::crop_imm(&out, 0, 0, w.max(1), h.max(1)).to_image())
}

/// Per-cell scaled heat values: min-max over the region's weights, with
/// constant maps pinned to mid-ramp. Cells without a member are `None`.
fn cell_heat(region: &Region, map: &AttentionMap, region_side: u32) -> Vec<Option<f64>> {
    let mut heat = vec![None; (region_side * region_side) as usize];
    let min = map.weights.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (&(rx, ry), &w) in region.rel_coords.iter().zip(&map.weights) {
        let t = if max > min { (w - min) / (max - min) } else { 0.5 };
        heat[(ry * region_side + rx) as usize] = Some(t);
    }
    heat
}

/// Renders the attention overlay for one region. Weights are min-max scaled
/// across the region (a constant map renders mid-ramp), painted per patch
/// cell, upsampled, and alpha-blended over the region image.
pub fn render_attention_overlay(
    slide: &SlideImage,
    grid: &PatchGrid,
    region: &Region,
    map: &AttentionMap,
    cfg: &OverlayConfig,
    region_side: u32,
) -> Result<RgbImage, AttnVizError> {
    cfg.validate()?;
    if map.region != *region {
        return Err(AttnVizError::Contract(
            "attention map was computed for a different region".into(),
        ));
    }
    if map.weights.len() != region.members.len() {
        return Err(AttnVizError::Contract(format!(
            "{} weights for {} members",
            map.weights.len(),
            region.members.len()
        )));
    }
    let base = read_region_image(slide, grid, region, region_side)?;
    let heat = cell_heat(region, map, region_side);
    let ps = grid.patch_size_px;
    let side = f64::from(region_side);

    let mut out = base.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            // Cell-space coordinate of this pixel's center.
            let cx = (f64::from(x) + 0.5) / f64::from(ps);
            let cy = (f64::from(y) + 0.5) / f64::from(ps);
            let (t, coverage) = match cfg.upsampling {
                Upsampling::Nearest => {
                    let ix = (cx.floor() as u32).min(region_side - 1);
                    let iy = (cy.floor() as u32).min(region_side - 1);
                    match heat[(iy * region_side + ix) as usize] {
                        Some(t) => (t, 1.0),
                        None => (0.0, 0.0),
                    }
                }
                Upsampling::Bilinear => {
                    // Interpolate between cell centers; absent cells
                    // contribute zero coverage so holes fade out.
                    let fx = (cx - 0.5).clamp(0.0, side - 1.0);
                    let fy = (cy - 0.5).clamp(0.0, side - 1.0);
                    let x0 = fx.floor() as u32;
                    let y0 = fy.floor() as u32;
                    let x1 = (x0 + 1).min(region_side - 1);
                    let y1 = (y0 + 1).min(region_side - 1);
                    let tx = fx - f64::from(x0);
                    let ty = fy - f64::from(y0);
                    let mut value = 0.0;
                    let mut cover = 0.0;
                    for (gx, gy, wgt) in [
                        (x0, y0, (1.0 - tx) * (1.0 - ty)),
                        (x1, y0, tx * (1.0 - ty)),
                        (x0, y1, (1.0 - tx) * ty),
                        (x1, y1, tx * ty),
                    ] {
                        if let Some(t) = heat[(gy * region_side + gx) as usize] {
                            value += t * wgt;
                            cover += wgt;
                        }
                    }
                    if cover > 0.0 {
                        (value / cover, cover)
                    } else {
                        (0.0, 0.0)
                    }
                }
            };
            if coverage > 0.0 {
                let ramp = colormap_blue_red(t);
                let alpha = cfg.alpha * coverage;
                let px = out.get_pixel_mut(x, y);
                for c in 0..3 {
                    px[c] = ((1.0 - alpha) * f64::from(px[c]) + alpha * f64::from(ramp[c]))
                        .round()
                        .clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Ok(out)
}

/// Draws ellipse outlines for ground-truth or detector annotations falling
/// inside the region, in the caption palette.
pub fn render_annotation_overlay(
    slide: &SlideImage,
    grid: &PatchGrid,
    region: &Region,
    annotations: &[CellAnnotation],
    region_side: u32,
) -> Result<RgbImage, AttnVizError> {
    let mut out = read_region_image(slide, grid, region, region_side)?;
    let palette = annotation_palette();
    // Annotations are level-0 coordinates; the grid frame scales by the
    // extraction ratio.
    let ext = crate::preprocess::extraction_level(slide, grid.target_magnification)?;
    let scale = 1.0 / ext.scale;
    let ps = grid.patch_size_px;
    let origin_x = f64::from(region.origin.0 * ps);
    let origin_y = f64::from(region.origin.1 * ps);

    for ann in annotations {
        let cx = f64::from(ann.cx) * scale - origin_x;
        let cy = f64::from(ann.cy) * scale - origin_y;
        let rx = (f64::from(ann.rx) * scale).max(1.5);
        let ry = (f64::from(ann.ry) * scale).max(1.5);
        if cx < -rx || cy < -ry || cx > f64::from(out.width()) + rx || cy > f64::from(out.height()) + ry
        {
            continue;
        }
        let color = Rgb(palette[&ann.cell_type]);
        // Outline: pixels whose normalized radius lands in a thin band.
        let x0 = ((cx - rx - 2.0).floor().max(0.0)) as u32;
        let x1 = ((cx + rx + 2.0).ceil().min(f64::from(out.width()) - 1.0)) as u32;
        let y0 = ((cy - ry - 2.0).floor().max(0.0)) as u32;
        let y1 = ((cy + ry + 2.0).ceil().min(f64::from(out.height()) - 1.0)) as u32;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (f64::from(x) + 0.5 - cx) / rx;
                let dy = (f64::from(y) + 0.5 - cy) / ry;
                let r2 = dx * dx + dy * dy;
                if (0.6..=1.0).contains(&r2) {
                    out.put_pixel(x, y, color);
                }
            }
        }
    }
    Ok(out)
}

/// Writes the panel for a region: raw imagery, attention overlay, and (when
/// annotations are supplied) the annotation overlay. File names follow
/// `{slide_id}_{grid_x}_{grid_y}_{kind}.png`; returns the written paths.
pub fn export_panel(
    slide: &SlideImage,
    grid: &PatchGrid,
    region: &Region,
    map: &AttentionMap,
    annotations: Option<&[CellAnnotation]>,
    cfg: &OverlayConfig,
    region_side: u32,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, AttnVizError> {
    let save = |img: &RgbImage, kind: &str| -> Result<PathBuf, AttnVizError> {
        let path = out_dir.join(format!(
            "{}_{}_{}_{kind}.png",
            region.slide_id, region.origin.0, region.origin.1
        ));
        img.save(&path).map_err(|e| AttnVizError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(path)
    };

    let mut written = Vec::new();
    let raw = read_region_image(slide, grid, region, region_side)?;
    written.push(save(&raw, "raw")?);
    let overlay = render_attention_overlay(slide, grid, region, map, cfg, region_side)?;
    written.push(save(&overlay, "attention")?);
    if let Some(annotations) = annotations {
        let cells = render_annotation_overlay(slide, grid, region, annotations, region_side)?;
        written.push(save(&cells, "cells")?);
    }
    Ok(written)
}
