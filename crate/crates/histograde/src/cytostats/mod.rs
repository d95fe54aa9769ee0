//! Cell counting on synthetic slides and nonparametric rank statistics.
//!
//! Detection is connected-component labeling of palette-colored pixels at
//! level 0, standing in for a nuclei segmentation network; real detector
//! output can be ingested from JSONL instead. The statistics side provides
//! one-sided Mann-Whitney U tests (exact for small tie-free samples, normal
//! approximation with tie correction otherwise), the Probability of
//! Superiority, and rank-biserial effect sizes.

mod detect;
mod export;
mod mwu;

pub use detect::detect_cells;
pub use export::{class_distribution_export, ClassDistribution, DistributionExport};
pub use mwu::{
    mann_whitney_one_sided, probability_of_superiority, rank_biserial, MannWhitneyResult, Method,
};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::slide::{ActivityClass, CellType, ALL_CELL_TYPES};

#[derive(Debug, thiserror::Error)]
pub enum CytostatsError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io error: {0}")]
    Io(String),
}

/// One row per slide: the label and per-type cell counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellCountRow {
    pub slide_id: String,
    pub class_label: ActivityClass,
    pub epithelial: u64,
    pub lymphocyte: u64,
    pub macrophage: u64,
    pub neutrophil: u64,
}

impl CellCountRow {
    pub fn count(&self, cell_type: CellType) -> u64 {
        match cell_type {
            CellType::Epithelial => self.epithelial,
            CellType::Lymphocyte => self.lymphocyte,
            CellType::Macrophage => self.macrophage,
            CellType::Neutrophil => self.neutrophil,
        }
    }

    pub fn from_counts(
        slide_id: String,
        class_label: ActivityClass,
        counts: &BTreeMap<CellType, u64>,
    ) -> CellCountRow {
        CellCountRow {
            slide_id,
            class_label,
            epithelial: counts.get(&CellType::Epithelial).copied().unwrap_or(0),
            lymphocyte: counts.get(&CellType::Lymphocyte).copied().unwrap_or(0),
            macrophage: counts.get(&CellType::Macrophage).copied().unwrap_or(0),
            neutrophil: counts.get(&CellType::Neutrophil).copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CellCountTable {
    pub rows: Vec<CellCountRow>,
}

impl CellCountTable {
    /// Counts of one cell type for every slide of a class, in row order.
    pub fn class_counts(&self, class: ActivityClass, cell_type: CellType) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.class_label == class)
            .map(|r| r.count(cell_type) as f64)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CytostatsError> {
        crate::util::write_jsonl(path, &self.rows).map_err(|e| CytostatsError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<CellCountTable, CytostatsError> {
        let rows = crate::util::read_jsonl(path).map_err(|e| CytostatsError::Io(e.to_string()))?;
        Ok(CellCountTable { rows })
    }
}

/// One named pairwise comparison in the stats report, keyed
/// `{higher}_vs_{lower}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub key: String,
    pub higher_class: ActivityClass,
    pub lower_class: ActivityClass,
    pub cell_type: CellType,
    pub result: MannWhitneyResult,
}

/// Runs one-sided tests (higher class > lower class) for each requested pair
/// on the given cell type.
pub fn compare_pairs(
    table: &CellCountTable,
    pairs: &[(ActivityClass, ActivityClass)],
    cell_type: CellType,
) -> Result<Vec<PairwiseComparison>, CytostatsError> {
    pairs
        .iter()
        .map(|(higher, lower)| {
            let x = table.class_counts(*higher, cell_type);
            let y = table.class_counts(*lower, cell_type);
            let result = mann_whitney_one_sided(&x, &y)?;
            Ok(PairwiseComparison {
                key: format!("{}_vs_{}", higher.name(), lower.name()),
                higher_class: *higher,
                lower_class: *lower,
                cell_type,
                result,
            })
        })
        .collect()
}

/// Verifies a detector against sidecar ground truth: per-type counts within
/// `tolerance` relative error.
pub fn counts_within_tolerance(
    detected: &BTreeMap<CellType, u64>,
    truth: &BTreeMap<CellType, u64>,
    tolerance: f64,
) -> bool {
    ALL_CELL_TYPES.iter().all(|t| {
        let d = detected.get(t).copied().unwrap_or(0) as f64;
        let g = truth.get(t).copied().unwrap_or(0) as f64;
        if g == 0.0 {
            d == 0.0
        } else {
            (d - g).abs() / g <= tolerance
        }
    })
}
