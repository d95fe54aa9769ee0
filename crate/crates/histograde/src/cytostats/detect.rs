//! Palette-keyed cell detection on synthetic slides.
//!
//! Connected-component labeling (8-connectivity) of pixels within a per-channel
//! tolerance of each palette color, at the slide's native level 0. Components
//! of at least 20 pixels count as one cell.

use std::collections::BTreeMap;

use image::RgbImage;

use super::CytostatsError;
use crate::slide::{CellType, PixelRect, SlideImage, ALL_CELL_TYPES};

pub const CHANNEL_TOLERANCE: u8 = 12;
pub const MIN_COMPONENT_PX: usize = 20;

/// Counts cells of every palette type at level 0.
pub fn detect_cells(
    slide: &SlideImage,
    palette: &BTreeMap<CellType, [u8; 3]>,
) -> Result<BTreeMap<CellType, u64>, CytostatsError> {
    for t in ALL_CELL_TYPES {
        if !palette.contains_key(&t) {
            return Err(CytostatsError::Config(format!(
                "palette missing entry for {t}"
            )));
        }
    }
    let full = slide
        .read_region(0, PixelRect::new(0, 0, slide.width_px, slide.height_px))
        .map_err(|e| CytostatsError::Io(e.to_string()))?;
    Ok(count_components(&full, palette))
}

fn matches(px: &image::Rgb<u8>, color: &[u8; 3]) -> bool {
    px.0.iter()
        .zip(color)
        .all(|(a, b)| a.abs_diff(*b) <= CHANNEL_TOLERANCE)
}

/// Per-type connected components of at least [`MIN_COMPONENT_PX`] pixels.
pub fn count_components(
    img: &RgbImage,
    palette: &BTreeMap<CellType, [u8; 3]>,
) -> BTreeMap<CellType, u64> {
    let w = img.width() as i64;
    let h = img.height() as i64;

    // One classification pass: type index per pixel, u8::MAX for none.
    let type_list: Vec<(CellType, [u8; 3])> = palette.iter().map(|(t, c)| (*t, *c)).collect();
    let mut type_map = vec![u8::MAX; (w * h) as usize];
    for (i, px) in img.pixels().enumerate() {
        for (ti, (_, color)) in type_list.iter().enumerate() {
            if matches(px, color) {
                type_map[i] = ti as u8;
                break;
            }
        }
    }

    let mut counts: BTreeMap<CellType, u64> =
        ALL_CELL_TYPES.iter().map(|t| (*t, 0)).collect();
    let mut visited = vec![false; type_map.len()];
    let mut stack = Vec::new();
    for start in 0..type_map.len() {
        if visited[start] || type_map[start] == u8::MAX {
            continue;
        }
        let ti = type_map[start];
        let mut size = 0usize;
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            size += 1;
            let x = idx as i64 % w;
            let y = idx as i64 / w;
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x + dx;
                    let ny = y + dy;
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let nidx = (ny * w + nx) as usize;
                    if !visited[nidx] && type_map[nidx] == ti {
                        visited[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        if size >= MIN_COMPONENT_PX {
            *counts.get_mut(&type_list[ti as usize].0).expect("known type") += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::{default_cell_palette, TISSUE_RGB};
    use image::Rgb;

    fn paint_disc(img: &mut RgbImage, cx: i64, cy: i64, r: i64, color: [u8; 3]) {
        for y in (cy - r).max(0)..=(cy + r).min(img.height() as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(img.width() as i64 - 1) {
                if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r {
                    img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }

    #[test]
    fn blank_tissue_counts_zero() {
        let img = RgbImage::from_pixel(128, 128, Rgb(TISSUE_RGB));
        let counts = count_components(&img, &default_cell_palette());
        assert!(counts.values().all(|c| *c == 0));
    }

    #[test]
    fn separated_discs_count_exactly() {
        let palette = default_cell_palette();
        let mut img = RgbImage::from_pixel(256, 256, Rgb(TISSUE_RGB));
        paint_disc(&mut img, 30, 30, 5, palette[&CellType::Neutrophil]);
        paint_disc(&mut img, 80, 30, 5, palette[&CellType::Neutrophil]);
        paint_disc(&mut img, 30, 90, 5, palette[&CellType::Lymphocyte]);
        paint_disc(&mut img, 150, 150, 6, palette[&CellType::Epithelial]);
        let counts = count_components(&img, &palette);
        assert_eq!(counts[&CellType::Neutrophil], 2);
        assert_eq!(counts[&CellType::Lymphocyte], 1);
        assert_eq!(counts[&CellType::Epithelial], 1);
        assert_eq!(counts[&CellType::Macrophage], 0);
    }

    #[test]
    fn sub_threshold_components_are_ignored() {
        let palette = default_cell_palette();
        let mut img = RgbImage::from_pixel(64, 64, Rgb(TISSUE_RGB));
        // A 2-px radius disc covers ~13 pixels, below the 20-px floor.
        paint_disc(&mut img, 20, 20, 2, palette[&CellType::Macrophage]);
        let counts = count_components(&img, &palette);
        assert_eq!(counts[&CellType::Macrophage], 0);
    }

    #[test]
    fn detection_is_deterministic() {
        let palette = default_cell_palette();
        let mut img = RgbImage::from_pixel(200, 200, Rgb(TISSUE_RGB));
        for i in 0..5i64 {
            paint_disc(&mut img, 25 + i * 30, 40, 4, palette[&CellType::Neutrophil]);
        }
        let a = count_components(&img, &palette);
        let b = count_components(&img, &palette);
        assert_eq!(a, b);
        assert_eq!(a[&CellType::Neutrophil], 5);
    }

    #[test]
    fn missing_palette_entry_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::slide::SynthConfig {
            n_slides: 1,
            seed: 0,
            slide_px: 512,
            ..Default::default()
        };
        let manifest = crate::slide::generate_dataset(&cfg, dir.path()).unwrap();
        let slide =
            SlideImage::open(&manifest.entries[0].resolved_path(dir.path())).unwrap();
        let mut palette = default_cell_palette();
        palette.remove(&CellType::Neutrophil);
        let err = detect_cells(&slide, &palette).unwrap_err();
        assert!(err.to_string().contains("neutrophil"));
    }

    #[test]
    fn detector_matches_sidecar_on_synthetic_slides() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::slide::SynthConfig {
            n_slides: 3,
            seed: 31,
            slide_px: 1024,
            ..Default::default()
        };
        let manifest = crate::slide::generate_dataset(&cfg, dir.path()).unwrap();
        for entry in &manifest.entries {
            let slide_dir = entry.resolved_path(dir.path());
            let slide = SlideImage::open(&slide_dir).unwrap();
            let detected = detect_cells(&slide, &cfg.cell_palette).unwrap();
            let mut truth: BTreeMap<CellType, u64> = BTreeMap::new();
            for ann in crate::slide::load_annotations(&slide_dir).unwrap() {
                *truth.entry(ann.cell_type).or_default() += 1;
            }
            for t in ALL_CELL_TYPES {
                let d = detected.get(&t).copied().unwrap_or(0) as f64;
                let g = truth.get(&t).copied().unwrap_or(0) as f64;
                let ok = if g == 0.0 {
                    d == 0.0
                } else {
                    (d - g).abs() / g <= 0.02
                };
                assert!(ok, "{}: {t} detected {d} vs truth {g}", entry.slide_id);
            }
        }
    }
}
