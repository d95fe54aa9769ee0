//! Pipeline stages over a fixed output-directory layout.
//!
//! Every stage reads and writes only the documented artifacts, derives its
//! randomness from the global seed hashed with the stage name, and fails
//! with a dependency error naming the missing artifact when run out of
//! order.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use histograde::attnviz;
use histograde::cytostats::{self, CellCountRow, CellCountTable};
use histograde::embed;
use histograde::metrics;
use histograde::preprocess;
use histograde::slide::{self, SlideImage, SlideManifest};
use histograde::trainer::{self, DiskDataSource, TrainConfig};
use histograde::util::derive_seed;
use histograde::vit;

use crate::config::{cell_palette, parse_pairs, RunConfig};

/// Error carrying a machine-readable kind for the JSON emitted on failure.
#[derive(Debug)]
pub struct StageFailure {
    pub kind: &'static str,
    pub message: String,
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for StageFailure {}

fn dependency_error(artifact: &Path, producer: &str) -> anyhow::Error {
    anyhow::Error::new(StageFailure {
        kind: "stage-dependency",
        message: format!(
            "missing input artifact {}; run `histograde {producer}` first",
            artifact.display()
        ),
    })
}

/// Output-directory layout shared by all stages.
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Layout {
        Layout { out: out.to_path_buf() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.out.join("manifest.jsonl")
    }

    pub fn grids_dir(&self) -> PathBuf {
        self.out.join("grids")
    }

    pub fn grid(&self, slide_id: &str) -> PathBuf {
        self.grids_dir().join(format!("{slide_id}.jsonl"))
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.out.join("embeddings")
    }

    pub fn embedding(&self, slide_id: &str) -> PathBuf {
        self.embeddings_dir().join(format!("{slide_id}.emb"))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out.join("train")
    }

    pub fn folds(&self) -> PathBuf {
        self.train_dir().join("folds.json")
    }

    pub fn checkpoint(&self, fold: u32) -> PathBuf {
        self.train_dir().join(format!("fold{fold}.ckpt"))
    }

    pub fn predictions(&self) -> PathBuf {
        self.train_dir().join("predictions.jsonl")
    }

    pub fn run_log(&self) -> PathBuf {
        self.train_dir().join("runlog.jsonl")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.out.join("metrics")
    }

    pub fn report(&self) -> PathBuf {
        self.metrics_dir().join("report.json")
    }

    pub fn confusion_csv(&self) -> PathBuf {
        self.metrics_dir().join("confusion.csv")
    }

    pub fn stats_dir(&self) -> PathBuf {
        self.out.join("stats")
    }

    pub fn cell_counts(&self) -> PathBuf {
        self.stats_dir().join("cell_counts.jsonl")
    }

    pub fn mwu_report(&self) -> PathBuf {
        self.stats_dir().join("mwu.json")
    }

    pub fn violin(&self, cell_type: &str, ext: &str) -> PathBuf {
        self.stats_dir().join(format!("violin_{cell_type}.{ext}"))
    }

    pub fn viz_dir(&self) -> PathBuf {
        self.out.join("viz")
    }
}

fn load_manifest_or_dependency(layout: &Layout) -> Result<SlideManifest> {
    if !layout.manifest().exists() {
        return Err(dependency_error(&layout.manifest(), "synth"));
    }
    slide::load_manifest(&layout.manifest()).context("loading manifest")
}

pub fn run_synth(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let synth_cfg = cfg.synth.to_synth_config(derive_seed(cfg.seed, "synth"));
    let manifest = slide::generate_dataset(&synth_cfg, &layout.out)?;
    println!(
        "synth: wrote {} slides and {}",
        manifest.entries.len(),
        layout.manifest().display()
    );
    Ok(())
}

pub fn run_preprocess(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let manifest = load_manifest_or_dependency(layout)?;
    std::fs::create_dir_all(layout.grids_dir())?;
    let manifest_dir = layout.out.clone();
    let total: usize = manifest
        .entries
        .par_iter()
        .map(|entry| -> Result<usize> {
            let slide = SlideImage::open(&entry.resolved_path(&manifest_dir))?;
            let mask_level = preprocess::default_mask_level(&slide);
            let mask = preprocess::compute_tissue_mask(&slide, mask_level)?;
            let grid = preprocess::extract_patch_grid(
                &slide,
                &mask,
                cfg.preprocess.patch_size_px,
                cfg.preprocess.target_magnification,
                cfg.preprocess.min_tissue,
            )?;
            preprocess::save_patch_grid(&grid, &layout.grid(&entry.slide_id))?;
            Ok(grid.records.len())
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    println!(
        "preprocess: {} retained patches across {} slides",
        total,
        manifest.entries.len()
    );
    Ok(())
}

pub fn run_embed(cfg: &RunConfig, layout: &Layout, import_dir: Option<&Path>) -> Result<()> {
    let _ = cfg;
    let manifest = load_manifest_or_dependency(layout)?;
    if !layout.grids_dir().exists() {
        return Err(dependency_error(&layout.grids_dir(), "preprocess"));
    }
    std::fs::create_dir_all(layout.embeddings_dir())?;
    let manifest_dir = layout.out.clone();
    manifest.entries.par_iter().try_for_each(|entry| -> Result<()> {
        let grid_path = layout.grid(&entry.slide_id);
        if !grid_path.exists() {
            return Err(dependency_error(&grid_path, "preprocess"));
        }
        let grid = preprocess::load_patch_grid(&grid_path)?;
        let matrix = match import_dir {
            Some(dir) => {
                let src = dir.join(format!("{}.emb", entry.slide_id));
                if !src.exists() {
                    bail!("import source {} not found", src.display());
                }
                let m = embed::import_embeddings(&src)?;
                if m.n_rows() != grid.records.len() {
                    bail!(
                        "imported embeddings for {} have {} rows, grid has {}",
                        entry.slide_id,
                        m.n_rows(),
                        grid.records.len()
                    );
                }
                m
            }
            None => {
                let slide = SlideImage::open(&entry.resolved_path(&manifest_dir))?;
                embed::embed_slide(&slide, &grid)?
            }
        };
        embed::write_embeddings(&matrix, &layout.embedding(&entry.slide_id))?;
        Ok(())
    })?;
    println!(
        "embed: wrote {} embedding stores to {}",
        manifest.entries.len(),
        layout.embeddings_dir().display()
    );
    Ok(())
}

fn probe_input_dim(layout: &Layout, manifest: &SlideManifest) -> Result<usize> {
    let first = &manifest.entries[0];
    let path = layout.embedding(&first.slide_id);
    if !path.exists() {
        return Err(dependency_error(&path, "embed"));
    }
    Ok(embed::import_embeddings(&path)?.dim)
}

pub fn run_train(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let manifest = load_manifest_or_dependency(layout)?;
    if !layout.embeddings_dir().exists() {
        return Err(dependency_error(&layout.embeddings_dir(), "embed"));
    }
    if !layout.grids_dir().exists() {
        return Err(dependency_error(&layout.grids_dir(), "preprocess"));
    }
    std::fs::create_dir_all(layout.train_dir())?;

    let input_dim = probe_input_dim(layout, &manifest)?;
    let model_cfg = cfg.model.to_model_config(input_dim)?;
    let folds = trainer::make_folds(&manifest, cfg.train.k_folds, derive_seed(cfg.seed, "folds"))?;
    folds.save(&layout.folds())?;

    let train_cfg = TrainConfig {
        regions_per_iter_train: cfg.train.regions_per_iter_train,
        regions_per_slide_val: cfg.train.regions_per_slide_val,
        batch_size: cfg.train.batch_size,
        patience: cfg.train.patience,
        max_epochs: cfg.train.max_epochs,
        seed: derive_seed(cfg.seed, "train"),
        model: model_cfg,
        adam: cfg.train.adam(),
        class_weight_floor: cfg.train.class_weight_floor,
    };
    let source = DiskDataSource {
        grids_dir: layout.grids_dir(),
        embeddings_dir: layout.embeddings_dir(),
    };
    let results = trainer::run_cross_validation(&manifest, &folds, &source, &train_cfg)?;

    let mut predictions = Vec::new();
    let mut log = Vec::new();
    for (fold, result) in results.into_iter().enumerate() {
        vit::save_checkpoint(&result.checkpoint, &layout.checkpoint(fold as u32))?;
        println!(
            "train: fold {fold} best epoch {} weighted F1 {:.4}",
            result.checkpoint.meta.epoch, result.checkpoint.meta.best_weighted_f1
        );
        predictions.extend(result.predictions);
        log.extend(result.log);
    }
    trainer::save_predictions(&predictions, &layout.predictions())?;
    trainer::save_run_log(&log, &layout.run_log())?;
    println!(
        "train: wrote {} predictions to {}",
        predictions.len(),
        layout.predictions().display()
    );
    Ok(())
}

pub fn run_evaluate(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    if !layout.predictions().exists() {
        return Err(dependency_error(&layout.predictions(), "train"));
    }
    let records = trainer::load_predictions(&layout.predictions())?;
    std::fs::create_dir_all(layout.metrics_dir())?;
    let report = metrics::evaluate(
        &records,
        Some((
            cfg.metrics.bootstrap_b,
            cfg.metrics.alpha,
            derive_seed(cfg.seed, "bootstrap"),
        )),
    )?;
    std::fs::write(
        layout.report(),
        serde_json::to_string_pretty(&report).context("serializing report")?,
    )?;
    std::fs::write(layout.confusion_csv(), report.confusion.to_csv())?;
    let ci = report.ci_95.as_ref().expect("bootstrap configured");
    println!(
        "evaluate: weighted AUC {:.4} [{:.4}-{:.4}], F1 {:.4} [{:.4}-{:.4}] -> {}",
        report.weighted.auc,
        ci.auc.lo,
        ci.auc.hi,
        report.weighted.f1,
        ci.f1.lo,
        ci.f1.hi,
        layout.report().display()
    );
    Ok(())
}

pub fn run_stats(
    cfg: &RunConfig,
    layout: &Layout,
    counts_override: Option<&Path>,
) -> Result<()> {
    let manifest = load_manifest_or_dependency(layout)?;
    std::fs::create_dir_all(layout.stats_dir())?;
    let manifest_dir = layout.out.clone();

    let table = match counts_override {
        Some(path) => {
            if !path.exists() {
                bail!("cell count table {} not found", path.display());
            }
            CellCountTable::load(path)?
        }
        None => {
            let palette = cell_palette();
            let rows: Vec<CellCountRow> = manifest
                .entries
                .par_iter()
                .map(|entry| -> Result<CellCountRow> {
                    let slide = SlideImage::open(&entry.resolved_path(&manifest_dir))?;
                    let counts = cytostats::detect_cells(&slide, &palette)?;
                    Ok(CellCountRow::from_counts(
                        entry.slide_id.clone(),
                        entry.class_label,
                        &counts,
                    ))
                })
                .collect::<Result<_>>()?;
            CellCountTable { rows }
        }
    };
    table.save(&layout.cell_counts())?;

    let pairs = parse_pairs(&cfg.stats.pairs)?;
    let cell_type = cfg.stats.cell_type()?;
    let comparisons = cytostats::compare_pairs(&table, &pairs, cell_type)?;
    std::fs::write(
        layout.mwu_report(),
        serde_json::to_string_pretty(&comparisons).context("serializing stats")?,
    )?;
    for c in &comparisons {
        println!(
            "stats: {} U={:.1} p={:.3e} ps={:.4} r={:.4} ({:?})",
            c.key, c.result.u, c.result.p_one_sided, c.result.ps, c.result.r_rank_biserial,
            c.result.method
        );
    }

    let (export, svg) = cytostats::class_distribution_export(&table, cell_type)?;
    std::fs::write(
        layout.violin(cell_type.name(), "json"),
        serde_json::to_string_pretty(&export).context("serializing distribution")?,
    )?;
    std::fs::write(layout.violin(cell_type.name(), "svg"), svg)?;
    println!(
        "stats: wrote {} and violin exports",
        layout.mwu_report().display()
    );
    Ok(())
}

pub fn run_visualize(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let manifest = load_manifest_or_dependency(layout)?;
    let ckpt_path = layout.checkpoint(cfg.viz.fold);
    if !ckpt_path.exists() {
        return Err(dependency_error(&ckpt_path, "train"));
    }
    if !layout.grids_dir().exists() {
        return Err(dependency_error(&layout.grids_dir(), "preprocess"));
    }
    if !layout.embeddings_dir().exists() {
        return Err(dependency_error(&layout.embeddings_dir(), "embed"));
    }
    std::fs::create_dir_all(layout.viz_dir())?;

    let model = vit::load_checkpoint(&ckpt_path)?.into_model()?;
    let overlay_cfg = cfg.viz.overlay_config()?;
    let aggregation = cfg.viz.aggregation()?;
    let region_side = model.config.region_side;
    let manifest_dir = layout.out.clone();

    // First `slides_per_class` manifest entries of each class.
    let mut chosen = Vec::new();
    for class in histograde::ActivityClass::ALL {
        chosen.extend(
            manifest
                .entries
                .iter()
                .filter(|e| e.class_label == class)
                .take(cfg.viz.slides_per_class),
        );
    }

    let mut written = 0usize;
    for entry in chosen {
        let grid_path = layout.grid(&entry.slide_id);
        if !grid_path.exists() {
            return Err(dependency_error(&grid_path, "preprocess"));
        }
        let grid = preprocess::load_patch_grid(&grid_path)?;
        let embeddings = embed::import_embeddings(&layout.embedding(&entry.slide_id))?;
        let slide = SlideImage::open(&entry.resolved_path(&manifest_dir))?;
        let regions = trainer::sample_regions(
            &grid,
            cfg.train.regions_per_slide_val,
            region_side,
            0,
            trainer::SamplingMode::Validation,
        )?;
        // The fullest region makes the most informative panel.
        let region = regions
            .into_iter()
            .max_by_key(|r| r.members.len())
            .expect("validation sampling yields at least one region");
        let (_, attention) = model.encode_region(&embeddings, &region, false, 0)?;
        let map = vit::extract_cls_attention(&attention, &region, aggregation);
        let annotations = slide::load_annotations(&slide.root).ok();
        let paths = attnviz::export_panel(
            &slide,
            &grid,
            &region,
            &map,
            annotations.as_deref(),
            &overlay_cfg,
            region_side,
            &layout.viz_dir(),
        )?;
        written += paths.len();
    }
    println!(
        "visualize: wrote {written} panel images to {}",
        layout.viz_dir().display()
    );
    Ok(())
}

/// All stages in order; equivalent to running the subcommands one by one.
pub fn run_pipeline(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    run_synth(cfg, layout)?;
    run_preprocess(cfg, layout)?;
    run_embed(cfg, layout, None)?;
    run_train(cfg, layout)?;
    run_evaluate(cfg, layout)?;
    run_stats(cfg, layout, None)?;
    run_visualize(cfg, layout)?;
    Ok(())
}
