//! Deterministic synthetic slide generator.
//!
//! Each slide is a pale-pink tissue ellipse on near-white glass, populated
//! with color-keyed cell blobs whose per-type density depends on the activity
//! class. Ground-truth blob placements are written as a sidecar annotation
//! file so detector output can be validated against construction bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    save_manifest, ActivityClass, SlideEntry, SlideError, SlideImage, SlideLevel, SlideManifest,
};
use crate::util::derive_seed_indexed;

pub const DEFAULT_BASE_MAGNIFICATION: f64 = 40.0;
pub const DEFAULT_MICRONS_PER_PIXEL: f64 = 0.25;

/// Near-white glass background.
pub const GLASS_RGB: [u8; 3] = [247, 247, 247];
/// Pale pink tissue fill.
pub const TISSUE_RGB: [u8; 3] = [236, 200, 212];

const TILE_SIZE: u32 = 512;
/// Pyramid levels keep halving while both dimensions stay at least this.
const MIN_LEVEL_DIM: u32 = 256;

/// Per-slide multiplicative density jitter shared by all cell types
/// (overall cellularity), in log space.
const SHARED_JITTER_SIGMA: f64 = 0.45;
/// Additional independent per-type jitter, in log space.
const TYPE_JITTER_SIGMA: f64 = 0.15;

/// Cell blob semi-axes in pixels at level 0 (8-14 px extents).
const CELL_SEMI_AXIS_MIN: u32 = 4;
const CELL_SEMI_AXIS_MAX: u32 = 7;
/// Minimum clearance between blob bounding circles, so components never
/// merge under 8-connectivity.
const CELL_GAP_PX: f64 = 2.0;
const CELL_PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Epithelial,
    Lymphocyte,
    Macrophage,
    Neutrophil,
}

pub const ALL_CELL_TYPES: [CellType; 4] = [
    CellType::Epithelial,
    CellType::Lymphocyte,
    CellType::Macrophage,
    CellType::Neutrophil,
];

impl CellType {
    pub fn name(self) -> &'static str {
        match self {
            CellType::Epithelial => "epithelial",
            CellType::Lymphocyte => "lymphocyte",
            CellType::Macrophage => "macrophage",
            CellType::Neutrophil => "neutrophil",
        }
    }

    pub fn from_name(name: &str) -> Option<CellType> {
        match name {
            "epithelial" => Some(CellType::Epithelial),
            "lymphocyte" => Some(CellType::Lymphocyte),
            "macrophage" => Some(CellType::Macrophage),
            "neutrophil" => Some(CellType::Neutrophil),
            _ => None,
        }
    }
}

impl std::fmt::Display for CellType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground-truth record for one rendered blob; coordinates at level 0,
/// `rx`/`ry` are semi-axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellAnnotation {
    pub cell_type: CellType,
    pub cx: u32,
    pub cy: u32,
    pub rx: u32,
    pub ry: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub seed: u64,
    /// Relative class frequencies, Inactive..Severe.
    pub class_mix: [f64; 4],
    /// Slide edge length at level 0.
    pub slide_px: u32,
    pub cell_palette: BTreeMap<CellType, [u8; 3]>,
    /// Mean blob density per class and cell type, in blobs per tissue
    /// megapixel; indexed `[class][cell_type]`.
    pub density_profile: [[f64; 4]; 4],
}

pub fn default_cell_palette() -> BTreeMap<CellType, [u8; 3]> {
    BTreeMap::from([
        (CellType::Epithelial, [220, 60, 60]),
        (CellType::Lymphocyte, [60, 180, 75]),
        (CellType::Macrophage, [60, 90, 220]),
        (CellType::Neutrophil, [235, 200, 40]),
    ])
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_slides: 8,
            seed: 0,
            class_mix: [1.0, 1.0, 1.0, 1.0],
            slide_px: 2048,
            cell_palette: default_cell_palette(),
            // Rows: Inactive, Mild, Moderate, Severe.
            // Columns: epithelial, lymphocyte, macrophage, neutrophil.
            // Neutrophil density rises with activity (widening gaps so the
            // separation grows with grade); lymphocytes rise as the chronic
            // infiltrate; epithelium stays flat.
            density_profile: [
                [100.0, 20.0, 15.0, 15.0],
                [100.0, 60.0, 20.0, 22.5],
                [100.0, 100.0, 28.0, 45.0],
                [100.0, 120.0, 35.0, 112.5],
            ],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SlideError> {
        if self.n_slides == 0 {
            return Err(SlideError::Validation("n_slides must be positive".into()));
        }
        if self.slide_px == 0 {
            return Err(SlideError::Validation("slide_px must be positive".into()));
        }
        let mix_sum: f64 = self.class_mix.iter().sum();
        if !(mix_sum > 0.0) || self.class_mix.iter().any(|w| *w < 0.0) {
            return Err(SlideError::Validation(
                "class_mix must be nonnegative with a positive sum".into(),
            ));
        }
        for cell_type in ALL_CELL_TYPES {
            if !self.cell_palette.contains_key(&cell_type) {
                return Err(SlideError::Validation(format!(
                    "cell_palette missing entry for {cell_type}"
                )));
            }
        }
        let neut = CellType::Neutrophil as usize;
        for c in 0..3 {
            if self.density_profile[c + 1][neut] < self.density_profile[c][neut] {
                return Err(SlideError::Validation(
                    "density_profile neutrophil column must be monotone nondecreasing \
                     from Inactive to Severe"
                        .into(),
                ));
            }
        }
        if self
            .density_profile
            .iter()
            .flatten()
            .any(|d| !d.is_finite() || *d < 0.0)
        {
            return Err(SlideError::Validation(
                "density_profile entries must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

struct SlidePlan {
    index: usize,
    slide_id: String,
    patient_id: String,
    class_label: ActivityClass,
}

/// Generates `cfg.n_slides` tiled slides under `out_dir/slides/` plus
/// `out_dir/manifest.jsonl`. Fully deterministic given `cfg.seed`: patient
/// and class assignment come from a master stream, per-slide content from a
/// stream keyed by slide index.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<SlideManifest, SlideError> {
    cfg.validate()?;
    let slides_dir = out_dir.join("slides");
    fs::create_dir_all(&slides_dir).map_err(|e| SlideError::Io {
        path: slides_dir.clone(),
        source: e,
    })?;

    let plans = plan_slides(cfg);

    let entries: Vec<SlideEntry> = plans
        .iter()
        .map(|plan| SlideEntry {
            slide_id: plan.slide_id.clone(),
            patient_id: plan.patient_id.clone(),
            class_label: plan.class_label,
            path: PathBuf::from("slides").join(&plan.slide_id),
            base_magnification: DEFAULT_BASE_MAGNIFICATION,
            microns_per_pixel: DEFAULT_MICRONS_PER_PIXEL,
        })
        .collect();
    let manifest = SlideManifest::new(entries)?;

    plans
        .par_iter()
        .try_for_each(|plan| render_slide(cfg, plan, &slides_dir.join(&plan.slide_id)))?;

    save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Assigns patients (1-4 slides each) and per-slide classes from the master
/// stream. Classes are per slide, so a patient may span grades.
fn plan_slides(cfg: &SynthConfig) -> Vec<SlidePlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(cfg.seed, "plan", 0));
    let mix_sum: f64 = cfg.class_mix.iter().sum();
    let mut plans = Vec::with_capacity(cfg.n_slides);
    let mut patient = 0usize;
    let mut slide = 0usize;
    while slide < cfg.n_slides {
        let n_for_patient = rng.gen_range(1..=4usize).min(cfg.n_slides - slide);
        let patient_id = format!("patient_{patient:04}");
        for _ in 0..n_for_patient {
            let mut pick = rng.gen::<f64>() * mix_sum;
            let mut class = ActivityClass::Severe;
            for c in ActivityClass::ALL {
                pick -= cfg.class_mix[c.index()];
                if pick < 0.0 {
                    class = c;
                    break;
                }
            }
            plans.push(SlidePlan {
                index: slide,
                slide_id: format!("slide_{slide:04}"),
                patient_id: patient_id.clone(),
                class_label: class,
            });
            slide += 1;
        }
        patient += 1;
    }
    plans
}

struct PlacedCell {
    cx: f64,
    cy: f64,
    radius: f64,
}

fn render_slide(cfg: &SynthConfig, plan: &SlidePlan, dir: &Path) -> Result<(), SlideError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
        cfg.seed,
        "render",
        plan.index as u64,
    ));
    let w = cfg.slide_px;
    let h = cfg.slide_px;

    let mut level0 = RgbImage::from_pixel(w, h, Rgb(GLASS_RGB));

    // Tissue ellipse fully inside the slide; semi-axis fractions keep the
    // analytic area fraction at or above pi * 0.33^2 ~= 0.342 > 0.30.
    let rx = rng.gen_range(0.33..0.44) * f64::from(w);
    let ry = rng.gen_range(0.33..0.44) * f64::from(h);
    let cx = rng.gen_range(rx..(f64::from(w) - rx));
    let cy = rng.gen_range(ry..(f64::from(h) - ry));
    let tissue_px = fill_ellipse(&mut level0, cx, cy, rx, ry, Rgb(TISSUE_RGB));

    // Cell blobs: Poisson counts from jittered class densities. The shared
    // jitter models slide cellularity; per-type jitter keeps type ratios from
    // being an exact class fingerprint.
    let shared = Normal::new(0.0, SHARED_JITTER_SIGMA).expect("valid sigma");
    let per_type = Normal::new(0.0, TYPE_JITTER_SIGMA).expect("valid sigma");
    let shared_jitter = shared.sample(&mut rng).exp();
    let tissue_mpx = tissue_px as f64 / 1.0e6;

    let mut annotations: Vec<CellAnnotation> = Vec::new();
    let mut placed: Vec<PlacedCell> = Vec::new();
    for cell_type in ALL_CELL_TYPES {
        let density = cfg.density_profile[plan.class_label.index()][cell_type as usize];
        let type_jitter = per_type.sample(&mut rng).exp();
        let mean = density * tissue_mpx * shared_jitter * type_jitter;
        let count = if mean > 0.0 {
            Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize
        } else {
            0
        };
        let color = Rgb(cfg.cell_palette[&cell_type]);
        for _ in 0..count {
            let crx = rng.gen_range(CELL_SEMI_AXIS_MIN..=CELL_SEMI_AXIS_MAX);
            let cry = rng.gen_range(CELL_SEMI_AXIS_MIN..=CELL_SEMI_AXIS_MAX);
            let radius = f64::from(crx.max(cry));
            let margin = radius + CELL_GAP_PX;
            if let Some((px, py)) =
                place_in_ellipse(&mut rng, cx, cy, rx, ry, margin, radius, &placed)
            {
                fill_ellipse(
                    &mut level0,
                    px,
                    py,
                    f64::from(crx),
                    f64::from(cry),
                    color,
                );
                placed.push(PlacedCell {
                    cx: px,
                    cy: py,
                    radius,
                });
                annotations.push(CellAnnotation {
                    cell_type,
                    cx: px.round() as u32,
                    cy: py.round() as u32,
                    rx: crx,
                    ry: cry,
                });
            }
        }
    }

    // Pyramid: halve with a box filter while both dimensions stay large
    // enough to be useful.
    let mut levels = vec![(1u32, level0)];
    loop {
        let (ds, prev) = levels.last().unwrap();
        let next_w = prev.width().div_ceil(2);
        let next_h = prev.height().div_ceil(2);
        if next_w.min(next_h) < MIN_LEVEL_DIM {
            break;
        }
        let next = downsample_2x(prev);
        levels.push((ds * 2, next));
    }

    fs::create_dir_all(dir).map_err(|e| SlideError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut level_meta = Vec::new();
    for (i, (ds, img)) in levels.iter().enumerate() {
        let level_dir_name = format!("level_{i}");
        let level_dir = dir.join(&level_dir_name);
        fs::create_dir_all(&level_dir).map_err(|e| SlideError::Io {
            path: level_dir.clone(),
            source: e,
        })?;
        write_tiles(img, &level_dir)?;
        level_meta.push(SlideLevel {
            downsample: *ds,
            width_px: img.width(),
            height_px: img.height(),
            dir: level_dir_name,
        });
    }

    let slide = SlideImage {
        slide_id: plan.slide_id.clone(),
        width_px: w,
        height_px: h,
        tile_size: TILE_SIZE,
        base_magnification: DEFAULT_BASE_MAGNIFICATION,
        microns_per_pixel: DEFAULT_MICRONS_PER_PIXEL,
        levels: level_meta,
        tissue_px_level0: tissue_px,
        root: dir.to_path_buf(),
    };
    slide.save_meta()?;

    crate::util::write_jsonl(&dir.join("cells.jsonl"), &annotations).map_err(|e| {
        SlideError::Validation(format!("failed to write sidecar annotations: {e}"))
    })?;
    Ok(())
}

/// Fills an axis-aligned ellipse (pixel-center inclusion test) and returns
/// the number of pixels painted.
fn fill_ellipse(img: &mut RgbImage, cx: f64, cy: f64, rx: f64, ry: f64, color: Rgb<u8>) -> u64 {
    let x0 = ((cx - rx).floor().max(0.0)) as u32;
    let x1 = ((cx + rx).ceil().min(f64::from(img.width() - 1))) as u32;
    let y0 = ((cy - ry).floor().max(0.0)) as u32;
    let y1 = ((cy + ry).ceil().min(f64::from(img.height() - 1))) as u32;
    let mut count = 0u64;
    for y in y0..=y1 {
        let dy = (f64::from(y) + 0.5 - cy) / ry;
        for x in x0..=x1 {
            let dx = (f64::from(x) + 0.5 - cx) / rx;
            if dx * dx + dy * dy <= 1.0 {
                img.put_pixel(x, y, color);
                count += 1;
            }
        }
    }
    count
}

/// Uniformly samples a center inside the tissue ellipse shrunk by `margin`,
/// rejecting positions whose bounding circle comes within [`CELL_GAP_PX`] of
/// an existing blob. Returns `None` when placement keeps failing.
fn place_in_ellipse(
    rng: &mut ChaCha8Rng,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    margin: f64,
    radius: f64,
    placed: &[PlacedCell],
) -> Option<(f64, f64)> {
    let erx = rx - margin;
    let ery = ry - margin;
    if erx <= 0.0 || ery <= 0.0 {
        return None;
    }
    'tries: for _ in 0..CELL_PLACEMENT_TRIES {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = rng.gen::<f64>().sqrt();
        let px = cx + erx * r * theta.cos();
        let py = cy + ery * r * theta.sin();
        // Linear scan is fine at desk-scale blob counts.
        for other in placed {
            let min_d = other.radius + radius + CELL_GAP_PX;
            let dx = other.cx - px;
            let dy = other.cy - py;
            if dx * dx + dy * dy < min_d * min_d {
                continue 'tries;
            }
        }
        return Some((px, py));
    }
    None
}

/// 2x box-filter downsample; odd trailing rows/columns average the available
/// pixels.
fn downsample_2x(src: &RgbImage) -> RgbImage {
    let w = src.width().div_ceil(2);
    let h = src.height().div_ceil(2);
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut sum = [0u32; 3];
            let mut n = 0u32;
            for dy in 0..2 {
                for dx in 0..2 {
                    let sx = x * 2 + dx;
                    let sy = y * 2 + dy;
                    if sx < src.width() && sy < src.height() {
                        let p = src.get_pixel(sx, sy);
                        sum[0] += u32::from(p[0]);
                        sum[1] += u32::from(p[1]);
                        sum[2] += u32::from(p[2]);
                        n += 1;
                    }
                }
            }
            out.put_pixel(
                x,
                y,
                Rgb([
                    ((sum[0] + n / 2) / n) as u8,
                    ((sum[1] + n / 2) / n) as u8,
                    ((sum[2] + n / 2) / n) as u8,
                ]),
            );
        }
    }
    out
}

fn write_tiles(img: &RgbImage, dir: &Path) -> Result<(), SlideError> {
    let tiles_x = img.width().div_ceil(TILE_SIZE);
    let tiles_y = img.height().div_ceil(TILE_SIZE);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let tw = TILE_SIZE.min(img.width() - x0);
            let th = TILE_SIZE.min(img.height() - y0);
            let tile = image::imageops::crop_imm(img, x0, y0, tw, th).to_image();
            let path = dir.join(format!("{tx}_{ty}.png"));
            tile.save(&path).map_err(|e| SlideError::Corrupt {
                path,
                message: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// Reads a slide's sidecar ground-truth annotations.
pub fn load_annotations(slide_dir: &Path) -> Result<Vec<CellAnnotation>, SlideError> {
    crate::util::read_jsonl(&slide_dir.join("cells.jsonl"))
        .map_err(|e| SlideError::Validation(e.to_string()))
}
