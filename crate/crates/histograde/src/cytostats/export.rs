//! Per-class count distributions: quantiles, histograms, and an SVG violin.

use serde::{Deserialize, Serialize};

use super::{CellCountTable, CytostatsError};
use crate::metrics::quantile_sorted;
use crate::slide::{ActivityClass, CellType};

pub const HISTOGRAM_BINS: usize = 32;
/// Quantile points exported per class (percent).
pub const QUANTILE_POINTS: [f64; 5] = [5.0, 25.0, 50.0, 75.0, 95.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub class_label: ActivityClass,
    pub n: usize,
    pub sorted_counts: Vec<f64>,
    /// (5, 25, 50, 75, 95)th percentiles by linear interpolation between
    /// closest ranks; empty when the class has no slides.
    pub quantiles: Vec<f64>,
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionExport {
    pub cell_type: CellType,
    /// Shared histogram range across classes so silhouettes are comparable.
    pub bin_min: f64,
    pub bin_max: f64,
    pub classes: Vec<ClassDistribution>,
}

/// Builds the deterministic JSON payload and SVG violin for one cell type.
pub fn class_distribution_export(
    table: &CellCountTable,
    cell_type: CellType,
) -> Result<(DistributionExport, String), CytostatsError> {
    if table.rows.is_empty() {
        return Err(CytostatsError::Contract("empty cell count table".into()));
    }
    let all: Vec<f64> = table.rows.iter().map(|r| r.count(cell_type) as f64).collect();
    let bin_min = all.iter().copied().fold(f64::INFINITY, f64::min);
    let bin_max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut classes = Vec::new();
    for class in ActivityClass::ALL {
        let mut counts = table.class_counts(class, cell_type);
        counts.sort_by(|a, b| a.partial_cmp(b).expect("finite counts"));
        let quantiles = if counts.is_empty() {
            Vec::new()
        } else {
            QUANTILE_POINTS
                .iter()
                .map(|p| quantile_sorted(&counts, p / 100.0))
                .collect()
        };
        let mut histogram = vec![0u64; HISTOGRAM_BINS];
        for v in &counts {
            let t = if bin_max > bin_min {
                (v - bin_min) / (bin_max - bin_min)
            } else {
                0.5
            };
            let bin = ((t * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
        }
        classes.push(ClassDistribution {
            class_label: class,
            n: counts.len(),
            sorted_counts: counts,
            quantiles,
            histogram,
        });
    }
    let export = DistributionExport {
        cell_type,
        bin_min,
        bin_max,
        classes,
    };
    let svg = render_violin_svg(&export);
    Ok((export, svg))
}

/// Violin silhouette: the mirrored, triangularly smoothed histogram
/// ((h[i-1] + 2 h[i] + h[i+1]) / 4) of each class at its own x offset.
fn render_violin_svg(export: &DistributionExport) -> String {
    const WIDTH: f64 = 640.0;
    const HEIGHT: f64 = 420.0;
    const MARGIN: f64 = 40.0;
    const HALF_WIDTH: f64 = 55.0;

    let n_classes = export.classes.len() as f64;
    let slot = (WIDTH - 2.0 * MARGIN) / n_classes;
    let y_of = |t: f64| HEIGHT - MARGIN - t * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{} counts per slide</text>\n",
        WIDTH / 2.0,
        export.cell_type
    ));

    for (ci, class) in export.classes.iter().enumerate() {
        let cx = MARGIN + slot * (ci as f64 + 0.5);
        if class.n == 0 {
            svg.push_str(&format!(
                "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{} (empty)</text>\n",
                HEIGHT - 12.0,
                class.class_label
            ));
            continue;
        }
        let smoothed: Vec<f64> = (0..class.histogram.len())
            .map(|i| {
                let get = |j: i64| -> f64 {
                    if j < 0 || j as usize >= class.histogram.len() {
                        0.0
                    } else {
                        class.histogram[j as usize] as f64
                    }
                };
                (get(i as i64 - 1) + 2.0 * get(i as i64) + get(i as i64 + 1)) / 4.0
            })
            .collect();
        let peak = smoothed.iter().copied().fold(0.0f64, f64::max).max(1e-9);

        // Right half top-to-bottom, then mirrored left half bottom-to-top.
        let mut points = Vec::new();
        let bins = smoothed.len();
        for (i, s) in smoothed.iter().enumerate() {
            let t = (i as f64 + 0.5) / bins as f64;
            points.push((cx + s / peak * HALF_WIDTH, y_of(t)));
        }
        for (i, s) in smoothed.iter().enumerate().rev() {
            let t = (i as f64 + 0.5) / bins as f64;
            points.push((cx - s / peak * HALF_WIDTH, y_of(t)));
        }
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        svg.push_str(&format!(
            "<polygon points=\"{}\" fill=\"#7aa6c2\" stroke=\"#2c5870\" stroke-width=\"1\"/>\n",
            path.join(" ")
        ));
        // Median tick.
        if !class.quantiles.is_empty() {
            let median = class.quantiles[2];
            let t = if export.bin_max > export.bin_min {
                (median - export.bin_min) / (export.bin_max - export.bin_min)
            } else {
                0.5
            };
            svg.push_str(&format!(
                "<line x1=\"{}\" y1=\"{:.2}\" x2=\"{}\" y2=\"{:.2}\" stroke=\"#111\" stroke-width=\"2\"/>\n",
                cx - 14.0,
                y_of(t),
                cx + 14.0,
                y_of(t)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{} (n={})</text>\n",
            HEIGHT - 12.0,
            class.class_label,
            class.n
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cytostats::CellCountRow;

    fn table_with_neutrophils(per_class: &[Vec<u64>; 4]) -> CellCountTable {
        let mut rows = Vec::new();
        for (c, counts) in per_class.iter().enumerate() {
            for (i, n) in counts.iter().enumerate() {
                rows.push(CellCountRow {
                    slide_id: format!("s{c}_{i}"),
                    class_label: ActivityClass::ALL[c],
                    epithelial: 1,
                    lymphocyte: 1,
                    macrophage: 1,
                    neutrophil: *n,
                });
            }
        }
        CellCountTable { rows }
    }

    #[test]
    fn quantiles_of_1_to_100_match_linear_interpolation() {
        let table = table_with_neutrophils(&[
            (1..=100).collect(),
            vec![5],
            vec![5],
            vec![5],
        ]);
        let (export, _) = class_distribution_export(&table, CellType::Neutrophil).unwrap();
        let q = &export.classes[0].quantiles;
        let expected = [5.95, 25.75, 50.5, 75.25, 95.05];
        for (got, want) in q.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn single_value_class_degenerates_cleanly() {
        let table = table_with_neutrophils(&[vec![7, 7, 7], vec![9], vec![], vec![20]]);
        let (export, svg) = class_distribution_export(&table, CellType::Neutrophil).unwrap();
        let inactive = &export.classes[0];
        assert!(inactive.quantiles.iter().all(|q| *q == 7.0));
        // One occupied histogram bin.
        assert_eq!(inactive.histogram.iter().filter(|b| **b > 0).count(), 1);
        // Empty class renders as a label, not a polygon.
        let moderate = &export.classes[2];
        assert_eq!(moderate.n, 0);
        assert!(moderate.quantiles.is_empty());
        assert!(svg.contains("moderate (empty)"));
    }

    #[test]
    fn export_is_byte_deterministic() {
        let table = table_with_neutrophils(&[
            vec![1, 4, 2, 8],
            vec![10, 14, 9],
            vec![25, 30],
            vec![60, 55, 70],
        ]);
        let (export_a, svg_a) = class_distribution_export(&table, CellType::Neutrophil).unwrap();
        let (export_b, svg_b) = class_distribution_export(&table, CellType::Neutrophil).unwrap();
        assert_eq!(svg_a, svg_b);
        assert_eq!(
            serde_json::to_string(&export_a).unwrap(),
            serde_json::to_string(&export_b).unwrap()
        );
        assert!(svg_a.starts_with("<svg"));
        assert!(svg_a.contains("polygon"));
    }

    #[test]
    fn empty_table_is_contract_error() {
        let table = CellCountTable { rows: vec![] };
        assert!(class_distribution_export(&table, CellType::Neutrophil).is_err());
    }
}
