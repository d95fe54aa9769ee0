//! Slide catalog and tiled slide storage.
//!
//! A slide is a directory of PNG tiles per pyramid level plus a `slide.json`
//! metadata file. Levels are power-of-two downsamples of level 0, so the
//! "read a region at a level" access pattern of scanner pyramids is preserved
//! without any vendor format.

mod synth;

pub use synth::{
    default_cell_palette, generate_dataset, load_annotations, CellAnnotation, CellType,
    SynthConfig, ALL_CELL_TYPES, DEFAULT_BASE_MAGNIFICATION, DEFAULT_MICRONS_PER_PIXEL, GLASS_RGB,
    TISSUE_RGB,
};

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

/// Current manifest schema. Bumped on any incompatible field change.
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// The four activity grades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ActivityClass {
    Inactive = 0,
    Mild = 1,
    Moderate = 2,
    Severe = 3,
}

impl ActivityClass {
    pub const ALL: [ActivityClass; 4] = [
        ActivityClass::Inactive,
        ActivityClass::Mild,
        ActivityClass::Moderate,
        ActivityClass::Severe,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivityClass::Inactive => "inactive",
            ActivityClass::Mild => "mild",
            ActivityClass::Moderate => "moderate",
            ActivityClass::Severe => "severe",
        }
    }

    pub fn from_name(name: &str) -> Option<ActivityClass> {
        match name {
            "inactive" => Some(ActivityClass::Inactive),
            "mild" => Some(ActivityClass::Mild),
            "moderate" => Some(ActivityClass::Moderate),
            "severe" => Some(ActivityClass::Severe),
            _ => None,
        }
    }
}

impl TryFrom<u8> for ActivityClass {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(ActivityClass::Inactive),
            1 => Ok(ActivityClass::Mild),
            2 => Ok(ActivityClass::Moderate),
            3 => Ok(ActivityClass::Severe),
            other => Err(format!("class_label {other} outside 0..=3")),
        }
    }
}

impl From<ActivityClass> for u8 {
    fn from(c: ActivityClass) -> u8 {
        c as u8
    }
}

impl std::fmt::Display for ActivityClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One catalog entry: a slide, its patient, its label, and where it lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    pub slide_id: String,
    pub patient_id: String,
    pub class_label: ActivityClass,
    /// Slide directory, stored verbatim; resolve against the manifest
    /// directory with [`SlideEntry::resolved_path`] when relative.
    pub path: PathBuf,
    pub base_magnification: f64,
    pub microns_per_pixel: f64,
}

impl SlideEntry {
    pub fn resolved_path(&self, manifest_dir: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            manifest_dir.join(&self.path)
        }
    }
}

/// The dataset catalog; the unit of dataset truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideManifest {
    pub schema_version: u32,
    pub entries: Vec<SlideEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    schema_version: u32,
}

impl SlideManifest {
    pub fn new(entries: Vec<SlideEntry>) -> Result<Self, SlideError> {
        let manifest = SlideManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks the catalog invariants: unique slide ids, nonempty patient ids,
    /// positive magnification and resolution.
    pub fn validate(&self) -> Result<(), SlideError> {
        let mut seen = BTreeSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.slide_id.as_str()) {
                return Err(SlideError::Validation(format!(
                    "duplicate slide_id {:?}",
                    entry.slide_id
                )));
            }
            if entry.patient_id.is_empty() {
                return Err(SlideError::Validation(format!(
                    "slide {:?} has empty patient_id",
                    entry.slide_id
                )));
            }
            if entry.base_magnification <= 0.0 {
                return Err(SlideError::Validation(format!(
                    "slide {:?} has non-positive base_magnification",
                    entry.slide_id
                )));
            }
            if entry.microns_per_pixel <= 0.0 {
                return Err(SlideError::Validation(format!(
                    "slide {:?} has non-positive microns_per_pixel",
                    entry.slide_id
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, slide_id: &str) -> Option<&SlideEntry> {
        self.entries.iter().find(|e| e.slide_id == slide_id)
    }
}

/// Writes a manifest: a header line followed by one entry per line.
pub fn save_manifest(manifest: &SlideManifest, path: &Path) -> Result<(), SlideError> {
    manifest.validate()?;
    let file = File::create(path).map_err(|e| SlideError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = ManifestHeader {
        schema_version: manifest.schema_version,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))
        .map_err(|e| SlideError::io(path, e))?;
    for entry in &manifest.entries {
        writeln!(w, "{}", serde_json::to_string(entry).expect("entry serializes"))
            .map_err(|e| SlideError::io(path, e))?;
    }
    w.flush().map_err(|e| SlideError::io(path, e))?;
    Ok(())
}

/// Loads and validates a manifest. Rejects unknown schema versions; parse
/// failures carry the 1-based line number and the serde message (which names
/// missing fields).
pub fn load_manifest(path: &Path) -> Result<SlideManifest, SlideError> {
    let file = File::open(path).map_err(|e| SlideError::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header_line) = lines
        .next()
        .ok_or_else(|| SlideError::Validation(format!("{}: empty manifest", path.display())))?;
    let header_line = header_line.map_err(|e| SlideError::io(path, e))?;
    let header: ManifestHeader =
        serde_json::from_str(&header_line).map_err(|e| SlideError::parse(path, 1, e))?;
    if header.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(SlideError::Validation(format!(
            "unsupported manifest schema_version {} (expected {})",
            header.schema_version, MANIFEST_SCHEMA_VERSION
        )));
    }

    let mut entries = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| SlideError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: SlideEntry =
            serde_json::from_str(&line).map_err(|e| SlideError::parse(path, idx + 1, e))?;
        entries.push(entry);
    }
    let manifest = SlideManifest {
        schema_version: header.schema_version,
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// One pyramid level: a power-of-two downsample of level 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideLevel {
    pub downsample: u32,
    pub width_px: u32,
    pub height_px: u32,
    /// Tile directory relative to the slide directory.
    pub dir: String,
}

/// Geometry and storage layout of one tiled slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideImage {
    pub slide_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub tile_size: u32,
    pub base_magnification: f64,
    pub microns_per_pixel: f64,
    pub levels: Vec<SlideLevel>,
    /// Tissue pixel count at level 0, recorded by the generator; ground truth
    /// for mask accuracy checks.
    pub tissue_px_level0: u64,
    /// Directory holding the level tile dirs; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

/// Integer pixel rectangle in the coordinate frame of some level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        PixelRect { x, y, w, h }
    }
}

impl SlideImage {
    /// Loads `slide.json` from a slide directory.
    pub fn open(dir: &Path) -> Result<SlideImage, SlideError> {
        let meta_path = dir.join("slide.json");
        let file = File::open(&meta_path).map_err(|e| SlideError::io(&meta_path, e))?;
        let mut slide: SlideImage = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| SlideError::parse(&meta_path, 0, e))?;
        slide.root = dir.to_path_buf();
        slide.validate()?;
        Ok(slide)
    }

    pub fn save_meta(&self) -> Result<(), SlideError> {
        let meta_path = self.root.join("slide.json");
        let file = File::create(&meta_path).map_err(|e| SlideError::io(&meta_path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| SlideError::parse(&meta_path, 0, e))?;
        w.flush().map_err(|e| SlideError::io(&meta_path, e))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SlideError> {
        if self.levels.is_empty() || self.levels[0].downsample != 1 {
            return Err(SlideError::Validation(
                "level 0 must exist with downsample 1".into(),
            ));
        }
        for pair in self.levels.windows(2) {
            if pair[1].downsample <= pair[0].downsample {
                return Err(SlideError::Validation(
                    "level downsample factors must strictly increase".into(),
                ));
            }
        }
        for level in &self.levels {
            if !level.downsample.is_power_of_two() {
                return Err(SlideError::Validation(format!(
                    "downsample {} is not a power of two",
                    level.downsample
                )));
            }
        }
        Ok(())
    }

    pub fn level(&self, index: usize) -> Result<&SlideLevel, SlideError> {
        self.levels.get(index).ok_or(SlideError::NoSuchLevel {
            level: index,
            available: self.levels.len(),
        })
    }

    /// Magnification of a level, e.g. 40x base at downsample 2 is 20x.
    pub fn level_magnification(&self, index: usize) -> Result<f64, SlideError> {
        let level = self.level(index)?;
        Ok(self.base_magnification / f64::from(level.downsample))
    }

    /// Index of the level whose magnification is closest to `target`.
    pub fn nearest_level(&self, target_magnification: f64) -> usize {
        let mut best = 0usize;
        let mut best_err = f64::INFINITY;
        for (i, level) in self.levels.iter().enumerate() {
            let mag = self.base_magnification / f64::from(level.downsample);
            let err = (mag - target_magnification).abs();
            if err < best_err {
                best_err = err;
                best = i;
            }
        }
        best
    }

    fn tile_path(&self, level: &SlideLevel, tx: u32, ty: u32) -> PathBuf {
        self.root.join(&level.dir).join(format!("{tx}_{ty}.png"))
    }

    /// Reads an RGB region of a level, stitching across tile boundaries.
    /// Pure read; an identical call returns identical pixels.
    pub fn read_region(&self, level_idx: usize, rect: PixelRect) -> Result<RgbImage, SlideError> {
        let level = self.level(level_idx)?.clone();
        if rect.w == 0 || rect.h == 0 {
            return Err(SlideError::OutOfBounds {
                rect,
                level: level_idx,
            });
        }
        let x1 = rect.x.checked_add(rect.w);
        let y1 = rect.y.checked_add(rect.h);
        match (x1, y1) {
            (Some(x1), Some(y1)) if x1 <= level.width_px && y1 <= level.height_px => {}
            _ => {
                return Err(SlideError::OutOfBounds {
                    rect,
                    level: level_idx,
                })
            }
        }

        let ts = self.tile_size;
        let mut out = RgbImage::new(rect.w, rect.h);
        let tx0 = rect.x / ts;
        let ty0 = rect.y / ts;
        let tx1 = (rect.x + rect.w - 1) / ts;
        let ty1 = (rect.y + rect.h - 1) / ts;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                let path = self.tile_path(&level, tx, ty);
                let tile = image::open(&path)
                    .map_err(|e| SlideError::Corrupt {
                        path: path.clone(),
                        message: e.to_string(),
                    })?
                    .into_rgb8();
                let tile_x0 = tx * ts;
                let tile_y0 = ty * ts;
                // Overlap of the request with this tile.
                let ox0 = rect.x.max(tile_x0);
                let oy0 = rect.y.max(tile_y0);
                let ox1 = (rect.x + rect.w).min(tile_x0 + tile.width());
                let oy1 = (rect.y + rect.h).min(tile_y0 + tile.height());
                if ox1 <= ox0 || oy1 <= oy0 {
                    return Err(SlideError::Corrupt {
                        path,
                        message: "tile smaller than expected".into(),
                    });
                }
                for y in oy0..oy1 {
                    for x in ox0..ox1 {
                        let px = *tile.get_pixel(x - tile_x0, y - tile_y0);
                        out.put_pixel(x - rect.x, y - rect.y, px);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SlideError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at line {line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("no level {level}; slide has {available} levels")]
    NoSuchLevel { level: usize, available: usize },
    #[error("rect {rect:?} out of bounds or empty at level {level}")]
    OutOfBounds { rect: PixelRect, level: usize },
    #[error("corrupt slide data at {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

impl SlideError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        SlideError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn parse(path: &Path, line: usize, source: serde_json::Error) -> Self {
        SlideError::Parse {
            path: path.to_path_buf(),
            line,
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(slide_id: &str, patient_id: &str) -> SlideEntry {
        SlideEntry {
            slide_id: slide_id.into(),
            patient_id: patient_id.into(),
            class_label: ActivityClass::Mild,
            path: PathBuf::from(format!("slides/{slide_id}")),
            base_magnification: 40.0,
            microns_per_pixel: 0.25,
        }
    }

    #[test]
    fn manifest_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = SlideManifest::new(vec![entry("s1", "p1"), entry("s2", "p1")]).unwrap();
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&manifest, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(manifest, loaded);
    }

    #[test]
    fn duplicate_slide_id_rejected() {
        let err = SlideManifest::new(vec![entry("s1", "p1"), entry("s1", "p2")]).unwrap_err();
        assert!(matches!(err, SlideError::Validation(_)));
        assert!(err.to_string().contains("s1"));
    }

    #[test]
    fn missing_patient_id_is_a_parse_error_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(
            &path,
            "{\"schema_version\":1}\n{\"slide_id\":\"s1\",\"class_label\":0,\"path\":\"x\",\"base_magnification\":40.0,\"microns_per_pixel\":0.25}\n",
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("patient_id"), "{msg}");
    }

    #[test]
    fn unknown_schema_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        std::fs::write(&path, "{\"schema_version\":99}\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn class_label_serde_uses_integers() {
        let json = serde_json::to_string(&ActivityClass::Severe).unwrap();
        assert_eq!(json, "3");
        let back: ActivityClass = serde_json::from_str("2").unwrap();
        assert_eq!(back, ActivityClass::Moderate);
        assert!(serde_json::from_str::<ActivityClass>("4").is_err());
    }
}
