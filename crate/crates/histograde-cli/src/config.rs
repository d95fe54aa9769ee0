//! Run configuration: a strict-schema TOML file mirroring the pipeline
//! stages. Unknown keys are rejected so a misspelled hyperparameter can
//! never be silently ignored.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use histograde::autodiff::AdamParams;
use histograde::slide::{default_cell_palette, CellType, SynthConfig, ALL_CELL_TYPES};
use histograde::vit::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub preprocess: PreprocessSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub metrics: MetricsSection,
    pub stats: StatsSection,
    pub viz: VizSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthSection::default(),
            preprocess: PreprocessSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            metrics: MetricsSection::default(),
            stats: StatsSection::default(),
            viz: VizSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_slides: usize,
    pub slide_px: u32,
    pub class_mix: [f64; 4],
    /// Rows Inactive..Severe, columns epithelial/lymphocyte/macrophage/
    /// neutrophil, in blobs per tissue megapixel.
    pub density_profile: [[f64; 4]; 4],
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            n_slides: d.n_slides,
            slide_px: d.slide_px,
            class_mix: d.class_mix,
            density_profile: d.density_profile,
        }
    }
}

impl SynthSection {
    pub fn to_synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_slides: self.n_slides,
            seed,
            class_mix: self.class_mix,
            slide_px: self.slide_px,
            cell_palette: default_cell_palette(),
            density_profile: self.density_profile,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub patch_size_px: u32,
    pub target_magnification: f64,
    pub min_tissue: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            patch_size_px: histograde::preprocess::DEFAULT_PATCH_SIZE,
            target_magnification: histograde::preprocess::DEFAULT_TARGET_MAGNIFICATION,
            min_tissue: histograde::preprocess::DEFAULT_MIN_TISSUE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// "desk" (4 heads, 2 layers, d_model 64) or "paper" (8 heads, 12
    /// layers, d_model 512).
    pub preset: String,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub dropout: Option<f64>,
    pub region_side: Option<u32>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            d_model: None,
            n_heads: None,
            n_layers: None,
            mlp_ratio: None,
            dropout: None,
            region_side: None,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_str() {
            "desk" => ModelConfig::desk_scale(input_dim),
            "paper" => ModelConfig::paper_scale(input_dim),
            other => bail!("unknown model preset {other:?} (expected \"desk\" or \"paper\")"),
        };
        if let Some(v) = self.d_model {
            cfg.d_model = v;
        }
        if let Some(v) = self.n_heads {
            cfg.n_heads = v;
        }
        if let Some(v) = self.n_layers {
            cfg.n_layers = v;
        }
        if let Some(v) = self.mlp_ratio {
            cfg.mlp_ratio = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.region_side {
            cfg.region_side = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub k_folds: usize,
    pub regions_per_iter_train: usize,
    pub regions_per_slide_val: usize,
    pub batch_size: usize,
    pub patience: u32,
    pub max_epochs: u32,
    pub lr: f64,
    pub weight_decay: f64,
    pub class_weight_floor: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            k_folds: 5,
            regions_per_iter_train: 4,
            regions_per_slide_val: 175,
            batch_size: 16,
            patience: 10,
            max_epochs: 30,
            lr: 1e-4,
            weight_decay: 0.0,
            class_weight_floor: None,
        }
    }
}

impl TrainSection {
    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamParams::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub bootstrap_b: usize,
    pub alpha: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            bootstrap_b: 1000,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsSection {
    /// Comma-separated one-sided comparisons, `higher:lower` per pair.
    pub pairs: String,
    pub cell_type: String,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            pairs: "mild:inactive,moderate:mild,severe:moderate".into(),
            cell_type: "neutrophil".into(),
        }
    }
}

impl StatsSection {
    pub fn cell_type(&self) -> Result<CellType> {
        CellType::from_name(&self.cell_type).with_context(|| {
            format!(
                "unknown cell_type {:?} (expected one of {:?})",
                self.cell_type,
                ALL_CELL_TYPES.map(|t| t.name())
            )
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizSection {
    pub alpha: f64,
    pub upsampling: String,
    /// Checkpoint fold driving the attention weights.
    pub fold: u32,
    /// How many slides of each class to render.
    pub slides_per_class: usize,
    /// "last-layer" or "mean-all-layers".
    pub aggregation: String,
}

impl Default for VizSection {
    fn default() -> Self {
        VizSection {
            alpha: 0.45,
            upsampling: "bilinear".into(),
            fold: 0,
            slides_per_class: 1,
            aggregation: "last-layer".into(),
        }
    }
}

impl VizSection {
    pub fn overlay_config(&self) -> Result<histograde::attnviz::OverlayConfig> {
        let upsampling = match self.upsampling.as_str() {
            "nearest" => histograde::attnviz::Upsampling::Nearest,
            "bilinear" => histograde::attnviz::Upsampling::Bilinear,
            other => bail!("unknown upsampling {other:?} (expected \"nearest\" or \"bilinear\")"),
        };
        let cfg = histograde::attnviz::OverlayConfig {
            alpha: self.alpha,
            upsampling,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn aggregation(&self) -> Result<histograde::vit::AttentionAggregation> {
        match self.aggregation.as_str() {
            "last-layer" => Ok(histograde::vit::AttentionAggregation::LastLayer),
            "mean-all-layers" => Ok(histograde::vit::AttentionAggregation::MeanAllLayers),
            other => bail!(
                "unknown aggregation {other:?} (expected \"last-layer\" or \"mean-all-layers\")"
            ),
        }
    }
}

/// Loads and validates a config file; absent path means defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
    };
    // Surface invalid sections before any stage runs.
    cfg.synth.to_synth_config(cfg.seed).validate()?;
    cfg.model.to_model_config(histograde::embed::REFERENCE_DIM)?;
    cfg.stats.cell_type()?;
    cfg.viz.overlay_config()?;
    cfg.viz.aggregation()?;
    parse_pairs(&cfg.stats.pairs)?;
    if !(cfg.preprocess.min_tissue >= 0.0 && cfg.preprocess.min_tissue <= 1.0) {
        bail!("preprocess.min_tissue must lie in [0, 1]");
    }
    Ok(cfg)
}

/// Parses `higher:lower[,higher:lower...]` into class pairs.
pub fn parse_pairs(
    spec: &str,
) -> Result<Vec<(histograde::ActivityClass, histograde::ActivityClass)>> {
    use histograde::ActivityClass;
    let mut pairs = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (higher, lower) = part
            .split_once(':')
            .with_context(|| format!("pair {part:?} must be higher:lower"))?;
        let parse = |name: &str| -> Result<ActivityClass> {
            ActivityClass::from_name(name.trim())
                .with_context(|| format!("unknown class {name:?}"))
        };
        pairs.push((parse(higher)?, parse(lower)?));
    }
    if pairs.is_empty() {
        bail!("no comparison pairs given");
    }
    Ok(pairs)
}

/// Cell palette used by synth and detection; fixed, documented in the slide
/// module.
pub fn cell_palette() -> BTreeMap<CellType, [u8; 3]> {
    default_cell_palette()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = load_config(None).unwrap();
        assert_eq!(cfg.train.k_folds, 5);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.patience, 10);
        assert_eq!(cfg.train.regions_per_iter_train, 4);
        assert_eq!(cfg.train.regions_per_slide_val, 175);
        assert_eq!(cfg.preprocess.patch_size_px, 224);
        assert_eq!(cfg.preprocess.min_tissue, 0.05);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n[train]\nlearning_rate = 0.1\n").unwrap();
        let err = load_config(Some(&path)).unwrap_err();
        assert!(format!("{err:#}").contains("learning_rate"));
    }

    #[test]
    fn pairs_parse_and_reject() {
        let pairs = parse_pairs("mild:inactive,moderate:mild,severe:moderate").unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(parse_pairs("mild-inactive").is_err());
        assert!(parse_pairs("spicy:inactive").is_err());
    }

    #[test]
    fn paper_preset_has_published_shape() {
        let section = ModelSection {
            preset: "paper".into(),
            ..ModelSection::default()
        };
        let cfg = section.to_model_config(512).unwrap();
        assert_eq!(cfg.n_heads, 8);
        assert_eq!(cfg.n_layers, 12);
        assert!((cfg.dropout - 0.1).abs() < 1e-12);
    }
}
