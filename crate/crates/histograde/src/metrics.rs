//! Classification evaluation: confusion matrices, precision/recall/F1,
//! one-vs-rest ROC AUC, support-weighted aggregates, and percentile
//! bootstrap confidence intervals over slide-level prediction records.

use serde::{Deserialize, Serialize};

use crate::slide::ActivityClass;
use crate::trainer::PredictionRecord;
use crate::util::derive_seed_indexed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty record set")]
    Empty,
    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),
    #[error("bootstrap kept drawing degenerate resamples (budget {attempts} attempts)")]
    DegenerateBootstrap { attempts: usize },
}

/// Rows are true labels, columns predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted_total(&self, class: usize) -> u64 {
        (0..NUM_CLASSES).map(|t| self.counts[t][class]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred,inactive,mild,moderate,severe\n");
        for (t, row) in self.counts.iter().enumerate() {
            out.push_str(ActivityClass::ALL[t].name());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(records: &[PredictionRecord]) -> Result<ConfusionMatrix, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for r in records {
        counts[r.true_label.index()][r.predicted_label.index()] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PrfClass {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfSummary {
    pub per_class: [PrfClass; NUM_CLASSES],
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// Classes whose precision denominator was zero (defined as 0).
    pub zero_denominator_classes: Vec<usize>,
}

/// Precision, recall, and F1 per class plus support-weighted aggregates.
/// An empty predicted column yields precision 0 and a warning entry; F1 is 0
/// when both parts are 0. Weighted recall is identically micro-accuracy.
pub fn prf(conf: &ConfusionMatrix) -> PrfSummary {
    let mut per_class = [PrfClass::default(); NUM_CLASSES];
    let mut zero_denominator_classes = Vec::new();
    for c in 0..NUM_CLASSES {
        let tp = conf.counts[c][c] as f64;
        let support = conf.support(c);
        let predicted = conf.predicted_total(c);
        let precision = if predicted == 0 {
            zero_denominator_classes.push(c);
            0.0
        } else {
            tp / predicted as f64
        };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class[c] = PrfClass {
            precision,
            recall,
            f1,
            support,
        };
    }
    let total: f64 = conf.total() as f64;
    let weighted = |f: fn(&PrfClass) -> f64| -> f64 {
        per_class
            .iter()
            .map(|m| m.support as f64 * f(m))
            .sum::<f64>()
            / total
    };
    PrfSummary {
        per_class,
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        zero_denominator_classes,
    }
}

/// One-vs-rest ROC AUC by the rank (Mann-Whitney) formulation with tied
/// scores counted half; equal to the trapezoidal area under the empirical
/// ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedAuc(format!(
            "need both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let ranks = average_ranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(r, _)| *r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub(crate) fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Support-weighted mean, shared by the AUC and PRF aggregations.
pub fn support_weighted_mean(values: &[f64], supports: &[u64]) -> f64 {
    let total: u64 = supports.iter().sum();
    values
        .iter()
        .zip(supports)
        .map(|(v, s)| v * *s as f64)
        .sum::<f64>()
        / total as f64
}

pub fn one_vs_rest_auc(records: &[PredictionRecord], class: usize) -> Result<f64, MetricsError> {
    let scores: Vec<f64> = records.iter().map(|r| r.probabilities[class]).collect();
    let labels: Vec<bool> = records
        .iter()
        .map(|r| r.true_label.index() == class)
        .collect();
    roc_auc(&scores, &labels)
}

/// Support-weighted mean of the one-vs-rest AUCs over classes present in the
/// records.
pub fn weighted_auc(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut values = Vec::new();
    let mut supports = Vec::new();
    for c in 0..NUM_CLASSES {
        let support = records.iter().filter(|r| r.true_label.index() == c).count() as u64;
        if support == 0 {
            continue;
        }
        values.push(one_vs_rest_auc(records, c)?);
        supports.push(support);
    }
    if values.len() < 2 {
        return Err(MetricsError::UndefinedAuc(
            "need at least two classes present".into(),
        ));
    }
    Ok(support_weighted_mean(&values, &supports))
}

/// Weighted F1 over records; the early-stopping metric.
pub fn weighted_f1(records: &[PredictionRecord]) -> Result<f64, MetricsError> {
    Ok(prf(&confusion_matrix(records)?).weighted_f1)
}

/// Percentile bootstrap over slide-level records. Resample `b` with
/// replacement, apply `metric_fn`, and take the (alpha/2, 1-alpha/2)
/// percentiles with linear interpolation. Resamples on which the metric is
/// degenerate (e.g. a class vanished) are redrawn, up to 10 attempts per
/// resample (a 10*B total budget). Deterministic: resample `i` draws from a
/// stream keyed by (seed, i).
pub fn bootstrap_ci(
    records: &[PredictionRecord],
    metric_fn: &dyn Fn(&[PredictionRecord]) -> Result<f64, MetricsError>,
    b: usize,
    alpha: f64,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    const ATTEMPTS_PER_RESAMPLE: usize = 10;
    let mut stats = Vec::with_capacity(b);
    for i in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "bootstrap", i as u64));
        let mut accepted = None;
        for _ in 0..ATTEMPTS_PER_RESAMPLE {
            let resample: Vec<PredictionRecord> = (0..records.len())
                .map(|_| records[rng.gen_range(0..records.len())].clone())
                .collect();
            if let Ok(v) = metric_fn(&resample) {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => stats.push(v),
            None => {
                return Err(MetricsError::DegenerateBootstrap {
                    attempts: ATTEMPTS_PER_RESAMPLE * b,
                })
            }
        }
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    Ok((
        quantile_sorted(&stats, alpha / 2.0),
        quantile_sorted(&stats, 1.0 - alpha / 2.0),
    ))
}

/// Linear interpolation between closest ranks on a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ci {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedCis {
    pub auc: Ci,
    pub precision: Ci,
    pub recall: Ci,
    pub f1: Ci,
}

/// The full evaluation report, serialized as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub weighted: ClassMetrics,
    pub ci_95: Option<WeightedCis>,
    pub confusion: ConfusionMatrix,
    pub warnings: Vec<String>,
}

/// Builds the report; when `bootstrap` is given as (B, alpha, seed),
/// percentile intervals are attached to every weighted metric.
pub fn evaluate(
    records: &[PredictionRecord],
    bootstrap: Option<(usize, f64, u64)>,
) -> Result<MetricReport, MetricsError> {
    let conf = confusion_matrix(records)?;
    let summary = prf(&conf);
    let mut per_class = [ClassMetrics {
        auc: 0.0,
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        support: 0,
    }; NUM_CLASSES];
    let mut aucs = Vec::new();
    let mut supports = Vec::new();
    for c in 0..NUM_CLASSES {
        let auc = if summary.per_class[c].support > 0 {
            let v = one_vs_rest_auc(records, c)?;
            aucs.push(v);
            supports.push(summary.per_class[c].support);
            v
        } else {
            f64::NAN
        };
        per_class[c] = ClassMetrics {
            auc,
            precision: summary.per_class[c].precision,
            recall: summary.per_class[c].recall,
            f1: summary.per_class[c].f1,
            support: summary.per_class[c].support,
        };
    }
    let weighted = ClassMetrics {
        auc: support_weighted_mean(&aucs, &supports),
        precision: summary.weighted_precision,
        recall: summary.weighted_recall,
        f1: summary.weighted_f1,
        support: conf.total(),
    };
    let ci_95 = match bootstrap {
        None => None,
        Some((b, alpha, seed)) => {
            let ci = |f: &dyn Fn(&[PredictionRecord]) -> Result<f64, MetricsError>,
                      label: &str|
             -> Result<Ci, MetricsError> {
                let (lo, hi) =
                    bootstrap_ci(records, f, b, alpha, derive_seed_indexed(seed, label, 0))?;
                Ok(Ci { lo, hi })
            };
            Some(WeightedCis {
                auc: ci(&weighted_auc, "auc")?,
                precision: ci(
                    &|r| Ok(prf(&confusion_matrix(r)?).weighted_precision),
                    "precision",
                )?,
                recall: ci(&|r| Ok(prf(&confusion_matrix(r)?).weighted_recall), "recall")?,
                f1: ci(&|r| Ok(prf(&confusion_matrix(r)?).weighted_f1), "f1")?,
            })
        }
    };
    let warnings = summary
        .zero_denominator_classes
        .iter()
        .map(|c| {
            format!(
                "no predictions for class {}; precision defined as 0",
                ActivityClass::ALL[*c].name()
            )
        })
        .collect();
    Ok(MetricReport {
        per_class,
        weighted,
        ci_95,
        confusion: conf,
        warnings,
    })
}
