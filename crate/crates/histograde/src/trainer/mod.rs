//! Patient-grouped five-fold cross-validation and the training loop:
//! stochastic region sampling, weighted-loss optimization, early stopping on
//! held-out weighted F1, and checkpoint/prediction emission.

mod folds;
mod sampling;

pub use folds::{make_folds, FoldAssignment};
pub use sampling::{sample_regions, SamplingMode};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, AdamParams, AdamState, AutodiffError, ClassWeights, Graph, Tensor,
};
use crate::embed::EmbeddingMatrix;
use crate::preprocess::PatchGrid;
use crate::slide::{ActivityClass, SlideManifest};
use crate::util::{derive_seed, derive_seed_indexed};
use crate::vit::{
    gather_members, CheckpointMeta, Model, ModelCheckpoint, ModelConfig, Region,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged with non-finite loss at epoch {epoch}")]
    Diverged { epoch: u32 },
    #[error("data error for slide {slide_id}: {message}")]
    Data { slide_id: String, message: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Training hyperparameters. Defaults: four regions per slide per training
/// iteration, up to 175 validation regions per slide, batch size 16, early
/// stopping patience 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regions_per_iter_train: usize,
    pub regions_per_slide_val: usize,
    pub batch_size: usize,
    pub patience: u32,
    pub max_epochs: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub adam: AdamParams,
    /// Substitute weight for a class absent from a training split; when
    /// unset, an absent class is a hard error.
    pub class_weight_floor: Option<f64>,
}

impl TrainConfig {
    pub fn desk_defaults(model: ModelConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            regions_per_iter_train: 4,
            regions_per_slide_val: 175,
            batch_size: 16,
            patience: 10,
            max_epochs: 30,
            seed,
            model,
            adam: AdamParams::default(),
            class_weight_floor: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.regions_per_iter_train == 0
            || self.regions_per_slide_val == 0
            || self.batch_size == 0
            || self.max_epochs == 0
        {
            return Err(TrainerError::Config(
                "counts and epoch limits must be positive".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(TrainerError::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One held-out prediction; probabilities sum to 1 and the predicted label
/// is the argmax with ties broken toward the lower (less severe) class.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub fold: u32,
    pub true_label: ActivityClass,
    pub probabilities: [f64; 4],
    pub predicted_label: ActivityClass,
}

/// JSONL schema: {slide_id, patient_id, fold, true_label, p0..p3,
/// predicted_label}.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionFileRecord {
    slide_id: String,
    patient_id: String,
    fold: u32,
    true_label: ActivityClass,
    p0: f64,
    p1: f64,
    p2: f64,
    p3: f64,
    predicted_label: ActivityClass,
}

impl From<&PredictionRecord> for PredictionFileRecord {
    fn from(r: &PredictionRecord) -> Self {
        PredictionFileRecord {
            slide_id: r.slide_id.clone(),
            patient_id: r.patient_id.clone(),
            fold: r.fold,
            true_label: r.true_label,
            p0: r.probabilities[0],
            p1: r.probabilities[1],
            p2: r.probabilities[2],
            p3: r.probabilities[3],
            predicted_label: r.predicted_label,
        }
    }
}

impl TryFrom<PredictionFileRecord> for PredictionRecord {
    type Error = TrainerError;

    fn try_from(r: PredictionFileRecord) -> Result<Self, TrainerError> {
        let probabilities = [r.p0, r.p1, r.p2, r.p3];
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(TrainerError::Contract(format!(
                "probabilities for slide {:?} sum to {sum}",
                r.slide_id
            )));
        }
        Ok(PredictionRecord {
            slide_id: r.slide_id,
            patient_id: r.patient_id,
            fold: r.fold,
            true_label: r.true_label,
            probabilities,
            predicted_label: r.predicted_label,
        })
    }
}

pub fn save_predictions(records: &[PredictionRecord], path: &Path) -> Result<(), TrainerError> {
    let file_records: Vec<PredictionFileRecord> = records.iter().map(Into::into).collect();
    crate::util::write_jsonl(path, &file_records)
        .map_err(|e| TrainerError::Contract(e.to_string()))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, TrainerError> {
    let file_records: Vec<PredictionFileRecord> =
        crate::util::read_jsonl(path).map_err(|e| TrainerError::Contract(e.to_string()))?;
    file_records.into_iter().map(TryInto::try_into).collect()
}

/// Per-epoch log line: {fold, epoch, train_loss, val_weighted_f1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLogEntry {
    pub fold: u32,
    pub epoch: u32,
    pub train_loss: f64,
    pub val_weighted_f1: f64,
}

pub fn save_run_log(entries: &[RunLogEntry], path: &Path) -> Result<(), TrainerError> {
    crate::util::write_jsonl(path, entries).map_err(|e| TrainerError::Contract(e.to_string()))
}

/// Provider of per-slide pipeline artifacts. Disk-backed in the CLI,
/// in-memory (and spy-wrapped) in tests.
pub trait DataSource: Sync {
    fn grid(&self, slide_id: &str) -> Result<PatchGrid, TrainerError>;
    fn embeddings(&self, slide_id: &str) -> Result<EmbeddingMatrix, TrainerError>;
}

/// Reads `{grids_dir}/{slide_id}.jsonl` and `{emb_dir}/{slide_id}.emb`.
pub struct DiskDataSource {
    pub grids_dir: PathBuf,
    pub embeddings_dir: PathBuf,
}

impl DataSource for DiskDataSource {
    fn grid(&self, slide_id: &str) -> Result<PatchGrid, TrainerError> {
        crate::preprocess::load_patch_grid(&self.grids_dir.join(format!("{slide_id}.jsonl")))
            .map_err(|e| TrainerError::Data {
                slide_id: slide_id.to_string(),
                message: e.to_string(),
            })
    }

    fn embeddings(&self, slide_id: &str) -> Result<EmbeddingMatrix, TrainerError> {
        crate::embed::import_embeddings(&self.embeddings_dir.join(format!("{slide_id}.emb")))
            .map_err(|e| TrainerError::Data {
                slide_id: slide_id.to_string(),
                message: e.to_string(),
            })
    }
}

/// w_c = N / (C * n_c) over the given per-class slide counts. A zero count
/// is an error unless `floor` supplies a substitute weight.
pub fn compute_class_weights(
    counts: [u64; 4],
    floor: Option<f64>,
) -> Result<ClassWeights, TrainerError> {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Err(TrainerError::DegenerateSplit("empty training split".into()));
    }
    let mut w = [0.0; 4];
    for c in 0..4 {
        if counts[c] == 0 {
            match floor {
                Some(f) => w[c] = f,
                None => {
                    return Err(TrainerError::DegenerateSplit(format!(
                        "class {} absent from training split; re-fold or configure a floor weight",
                        ActivityClass::ALL[c].name()
                    )))
                }
            }
        } else {
            w[c] = n as f64 / (4.0 * counts[c] as f64);
        }
    }
    ClassWeights::new(w).map_err(TrainerError::from)
}

/// Early-stopping bookkeeping: strictly-better metrics update the best epoch
/// (ties keep the earlier one), and training stops once `patience` epochs
/// pass without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: u32,
    best: Option<(u32, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: u32) -> EarlyStopping {
        EarlyStopping {
            patience,
            best: None,
        }
    }

    pub fn best(&self) -> Option<(u32, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: u32, metric: f64) -> StopDecision {
        match self.best {
            None => {
                self.best = Some((epoch, metric));
                StopDecision::Improved
            }
            Some((_, best_metric)) if metric > best_metric => {
                self.best = Some((epoch, metric));
                StopDecision::Improved
            }
            Some((best_epoch, _)) => {
                if epoch - best_epoch >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
        }
    }
}

pub fn argmax_lowest(probs: &[f64; 4]) -> ActivityClass {
    let mut best = 0usize;
    for i in 1..4 {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    ActivityClass::ALL[best]
}

struct SlideRecord {
    slide_id: String,
    patient_id: String,
    label: ActivityClass,
    grid: PatchGrid,
    embeddings: EmbeddingMatrix,
}

fn load_split(
    manifest: &SlideManifest,
    source: &dyn DataSource,
    ids: &[String],
    input_dim: usize,
) -> Result<Vec<SlideRecord>, TrainerError> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let entry = manifest
            .entry(id)
            .ok_or_else(|| TrainerError::Contract(format!("slide {id:?} missing from manifest")))?;
        let grid = source.grid(id)?;
        let embeddings = source.embeddings(id)?;
        if embeddings.dim != input_dim {
            return Err(TrainerError::Config(format!(
                "slide {id:?} has embedding dim {}, model expects {input_dim}",
                embeddings.dim
            )));
        }
        if embeddings.n_rows() != grid.records.len() {
            return Err(TrainerError::Data {
                slide_id: id.clone(),
                message: format!(
                    "embedding rows {} do not match grid records {}",
                    embeddings.n_rows(),
                    grid.records.len()
                ),
            });
        }
        out.push(SlideRecord {
            slide_id: id.clone(),
            patient_id: entry.patient_id.clone(),
            label: entry.class_label,
            grid,
            embeddings,
        });
    }
    Ok(out)
}

fn regions_as_inputs(
    slide: &SlideRecord,
    regions: &[Region],
) -> Result<Vec<(Tensor, Vec<(u32, u32)>)>, TrainerError> {
    regions
        .iter()
        .map(|r| {
            Ok((
                gather_members(&slide.embeddings, r)?,
                r.rel_coords.clone(),
            ))
        })
        .collect()
}

/// Evaluation-mode predictions for a set of slides; parallel over slides,
/// output in input order.
fn evaluate_slides(
    model: &Model,
    slides: &[SlideRecord],
    cfg: &TrainConfig,
    fold: u32,
) -> Result<Vec<PredictionRecord>, TrainerError> {
    slides
        .par_iter()
        .map(|slide| {
            let regions = sample_regions(
                &slide.grid,
                cfg.regions_per_slide_val,
                cfg.model.region_side,
                0,
                SamplingMode::Validation,
            )?;
            let probs = model
                .predict_slide(&slide.embeddings, &regions)
                .map_err(TrainerError::from)?;
            Ok(PredictionRecord {
                slide_id: slide.slide_id.clone(),
                patient_id: slide.patient_id.clone(),
                fold,
                true_label: slide.label,
                probabilities: probs,
                predicted_label: argmax_lowest(&probs),
            })
        })
        .collect()
}

/// Output of one fold: best checkpoint, held-out predictions from it, and
/// the per-epoch run log.
pub struct FoldResult {
    pub checkpoint: ModelCheckpoint,
    pub predictions: Vec<PredictionRecord>,
    pub log: Vec<RunLogEntry>,
}

/// Trains one fold. Held-out data is loaded only when evaluation first runs;
/// the optimization loop touches the preloaded training split exclusively.
pub fn train_fold(
    fold: u32,
    folds: &FoldAssignment,
    manifest: &SlideManifest,
    source: &dyn DataSource,
    cfg: &TrainConfig,
) -> Result<FoldResult, TrainerError> {
    cfg.validate()?;
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    for entry in &manifest.entries {
        let f = *folds.slide_to_fold.get(&entry.slide_id).ok_or_else(|| {
            TrainerError::Contract(format!("slide {:?} not in fold assignment", entry.slide_id))
        })?;
        if f == fold as usize {
            val_ids.push(entry.slide_id.clone());
        } else {
            train_ids.push(entry.slide_id.clone());
        }
    }
    train_ids.sort();
    val_ids.sort();
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(TrainerError::DegenerateSplit(format!(
            "fold {fold} has {} train / {} validation slides",
            train_ids.len(),
            val_ids.len()
        )));
    }

    let train_slides = load_split(manifest, source, &train_ids, cfg.model.input_dim)?;
    let mut class_counts = [0u64; 4];
    for s in &train_slides {
        class_counts[s.label.index()] += 1;
    }
    let weights = compute_class_weights(class_counts, cfg.class_weight_floor)?;

    let mut model = Model::init(cfg.model, derive_seed_indexed(cfg.seed, "init", fold as u64))?;
    let mut adam = AdamState::new(cfg.adam);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut log = Vec::new();
    let mut best: Option<(Model, AdamState, Vec<PredictionRecord>)> = None;
    // Held-out artifacts stay untouched until the first evaluation.
    let mut val_slides: Option<Vec<SlideRecord>> = None;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_slides.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed_indexed(cfg.seed, "epoch-order", u64::from(epoch)));
        order.shuffle(&mut rng);

        let mut epoch_loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let batch_weight: f64 = batch
                .iter()
                .map(|&i| weights.weight(train_slides[i].label.index()))
                .sum();

            // Per-slide forward/backward in parallel; gradients are summed
            // in batch order afterwards, so the result is independent of
            // scheduling.
            let contributions: Vec<Result<(f64, BTreeMap<String, Tensor>), TrainerError>> = batch
                .par_iter()
                .map(|&i| {
                    let slide = &train_slides[i];
                    let region_seed = derive_seed(
                        cfg.seed,
                        &format!("regions:{epoch}:{}", slide.slide_id),
                    );
                    let regions = sample_regions(
                        &slide.grid,
                        cfg.regions_per_iter_train,
                        cfg.model.region_side,
                        region_seed,
                        SamplingMode::Train,
                    )?;
                    let inputs = regions_as_inputs(slide, &regions)?;
                    let dropout_seed = derive_seed(
                        cfg.seed,
                        &format!("dropout:{epoch}:{}", slide.slide_id),
                    );
                    let mut g = Graph::new(true, dropout_seed);
                    let nodes = model.register_params(&mut g);
                    let loss =
                        model.build_slide_loss(&mut g, &nodes, &inputs, slide.label.index(), &weights)?;
                    let loss_value = g.value(loss).item();
                    g.backward(loss)?;
                    let grads: BTreeMap<String, Tensor> = nodes
                        .by_name
                        .iter()
                        .filter_map(|(name, id)| g.grad(*id).map(|t| (name.clone(), t.clone())))
                        .collect();
                    Ok((loss_value, grads))
                })
                .collect();

            let mut batch_loss = 0.0;
            let mut accumulated: BTreeMap<String, Tensor> = BTreeMap::new();
            for contribution in contributions {
                let (loss_value, grads) = contribution?;
                batch_loss += loss_value;
                for (name, grad) in grads {
                    match accumulated.get_mut(&name) {
                        Some(acc) => {
                            for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a += g;
                            }
                        }
                        None => {
                            accumulated.insert(name, grad);
                        }
                    }
                }
            }
            batch_loss /= batch_weight;
            if !batch_loss.is_finite() {
                return Err(TrainerError::Diverged { epoch });
            }
            for grad in accumulated.values_mut() {
                for v in grad.data_mut() {
                    *v /= batch_weight;
                }
            }
            adam_step(&mut model.params, &accumulated, &mut adam)?;
            epoch_loss_sum += batch_loss;
            n_batches += 1;
        }
        let train_loss = epoch_loss_sum / n_batches as f64;

        if val_slides.is_none() {
            val_slides = Some(load_split(manifest, source, &val_ids, cfg.model.input_dim)?);
        }
        let records = evaluate_slides(&model, val_slides.as_ref().unwrap(), cfg, fold)?;
        let val_f1 = crate::metrics::weighted_f1(&records)
            .map_err(|e| TrainerError::Contract(e.to_string()))?;
        log.push(RunLogEntry {
            fold,
            epoch,
            train_loss,
            val_weighted_f1: val_f1,
        });

        match stopper.observe(epoch, val_f1) {
            StopDecision::Improved => {
                best = Some((model.clone(), adam.clone(), records));
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    let (best_epoch, best_f1) = stopper.best().expect("at least one epoch ran");
    let (best_model, best_adam, predictions) = best.expect("best tracked alongside stopper");
    let checkpoint = ModelCheckpoint {
        config: cfg.model,
        params: best_model.params,
        adam: Some(best_adam),
        meta: CheckpointMeta {
            fold,
            epoch: best_epoch,
            best_weighted_f1: best_f1,
        },
    };
    Ok(FoldResult {
        checkpoint,
        predictions,
        log,
    })
}

/// Trains every fold independently (fold seeds are `seed + fold`) and
/// concatenates held-out predictions so each slide appears exactly once.
pub fn run_cross_validation(
    manifest: &SlideManifest,
    folds: &FoldAssignment,
    source: &dyn DataSource,
    cfg: &TrainConfig,
) -> Result<Vec<FoldResult>, TrainerError> {
    let results: Vec<Result<FoldResult, TrainerError>> = (0..folds.k as u32)
        .into_par_iter()
        .map(|fold| {
            let fold_cfg = TrainConfig {
                seed: cfg.seed + u64::from(fold),
                ..cfg.clone()
            };
            train_fold(fold, folds, manifest, source, &fold_cfg)
        })
        .collect();
    let results: Vec<FoldResult> = results.into_iter().collect::<Result<_, _>>()?;

    let mut seen = std::collections::BTreeSet::new();
    for r in &results {
        for p in &r.predictions {
            if !seen.insert(p.slide_id.clone()) {
                return Err(TrainerError::Contract(format!(
                    "slide {:?} predicted in more than one fold",
                    p.slide_id
                )));
            }
        }
    }
    if seen.len() != manifest.entries.len() {
        return Err(TrainerError::Contract(format!(
            "{} predictions for {} slides",
            seen.len(),
            manifest.entries.len()
        )));
    }
    Ok(results)
}
