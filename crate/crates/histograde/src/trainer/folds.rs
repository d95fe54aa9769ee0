//! Patient-grouped fold assignment.
//!
//! Patients (not slides) are assigned to folds so a patient can never span
//! folds. Assignment is greedy over patients in descending slide count,
//! placing each into the fold that minimizes a squared class-count imbalance
//! score; the seed only shuffles orderings among ties, and every decision is
//! keyed by patient id, so permuting the manifest changes nothing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainerError;
use crate::slide::SlideManifest;
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub slide_to_fold: BTreeMap<String, usize>,
    pub patient_to_fold: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn save(&self, path: &Path) -> Result<(), TrainerError> {
        let json = serde_json::to_string_pretty(self).expect("assignment serializes");
        std::fs::write(path, json).map_err(|e| TrainerError::Contract(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<FoldAssignment, TrainerError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TrainerError::Contract(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| TrainerError::Contract(e.to_string()))
    }
}

pub fn make_folds(
    manifest: &SlideManifest,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, TrainerError> {
    if manifest.entries.is_empty() {
        return Err(TrainerError::Config("empty manifest".into()));
    }
    // Per-patient slide lists and class counts.
    let mut patients: BTreeMap<&str, (Vec<&str>, [u64; 4])> = BTreeMap::new();
    for entry in &manifest.entries {
        let slot = patients
            .entry(entry.patient_id.as_str())
            .or_insert_with(|| (Vec::new(), [0; 4]));
        slot.0.push(entry.slide_id.as_str());
        slot.1[entry.class_label.index()] += 1;
    }
    if k == 0 || k > patients.len() {
        return Err(TrainerError::Config(format!(
            "k = {k} folds for {} patients",
            patients.len()
        )));
    }

    // Descending slide count; ties ordered by a seed-keyed hash of the
    // patient id (then the id itself), never by manifest position.
    let mut order: Vec<&str> = patients.keys().copied().collect();
    order.sort_by_key(|pid| {
        (
            std::cmp::Reverse(patients[pid].0.len()),
            derive_seed(seed, &format!("patient-order:{pid}")),
            pid.to_string(),
        )
    });

    let mut fold_class_counts = vec![[0u64; 4]; k];
    let mut fold_totals = vec![0u64; k];
    let mut patient_to_fold = BTreeMap::new();
    let mut slide_to_fold = BTreeMap::new();
    for pid in order {
        let (slides, class_counts) = &patients[pid];
        let mut best_fold = 0usize;
        let mut best_key = (u64::MAX, u64::MAX);
        for f in 0..k {
            let mut score: u64 = 0;
            for c in 0..4 {
                let v = fold_class_counts[f][c] + class_counts[c];
                score += v * v;
            }
            let total = fold_totals[f] + slides.len() as u64;
            score += total * total;
            // Seeded tie-break among equal scores.
            let key = (score, derive_seed(seed, &format!("tie:{pid}:{f}")));
            if key < best_key {
                best_key = key;
                best_fold = f;
            }
        }
        patient_to_fold.insert(pid.to_string(), best_fold);
        for slide in slides {
            slide_to_fold.insert(slide.to_string(), best_fold);
        }
        for c in 0..4 {
            fold_class_counts[best_fold][c] += class_counts[c];
        }
        fold_totals[best_fold] += slides.len() as u64;
    }

    if fold_totals.iter().any(|t| *t == 0) {
        return Err(TrainerError::DegenerateSplit(
            "a fold received no slides".into(),
        ));
    }
    Ok(FoldAssignment {
        k,
        slide_to_fold,
        patient_to_fold,
    })
}
