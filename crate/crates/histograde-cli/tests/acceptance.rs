//! Acceptance suite: one test per release criterion, each printing a
//! PASS line (run with `--nocapture` to see them).
//!
//! Criteria 4, 7a-e, and 9 share a single full pipeline run (200 synthetic
//! slides, desk-scale model, 5-fold patient-grouped cross-validation)
//! driven through the real binary.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use histograde::cytostats::{
    mann_whitney_one_sided, probability_of_superiority, rank_biserial, Method,
    PairwiseComparison,
};
use histograde::metrics::{
    bootstrap_ci, confusion_matrix, prf, support_weighted_mean, weighted_f1,
};
use histograde::slide::ActivityClass;
use histograde::trainer::PredictionRecord;

const PIPELINE_CONFIG: &str = r#"
seed = 1

[synth]
n_slides = 200
slide_px = 2048

[train]
k_folds = 5
max_epochs = 30
patience = 10
lr = 1e-3
"#;

struct PipelineFixture {
    _dir: tempfile::TempDir,
    out: PathBuf,
    wall: Duration,
}

static FIXTURE: OnceLock<PipelineFixture> = OnceLock::new();

fn run_pipeline(config: &str, out: &Path) -> Duration {
    let dir = out.parent().expect("out dir has a parent");
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, config).expect("write config");
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_histograde"))
        .args(["pipeline", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(out)
        .status()
        .expect("spawn pipeline");
    assert!(status.success(), "pipeline run failed");
    start.elapsed()
}

fn fixture() -> &'static PipelineFixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let out = dir.path().join("run");
        let wall = run_pipeline(PIPELINE_CONFIG, &out);
        PipelineFixture {
            _dir: dir,
            out,
            wall,
        }
    })
}

fn pass(criterion: &str, detail: String) {
    println!("acceptance {criterion}: PASS ({detail})");
}

// ---------------------------------------------------------------------
// Criterion 1: PS consistency with the published U statistics.
// ---------------------------------------------------------------------
#[test]
fn c1_probability_of_superiority_matches_published_percentages() {
    let cases = [
        // (U, n_higher, n_lower, derived, published)
        (331_001.5, 885, 647, 0.5781, 0.577),
        (221_408.5, 358, 885, 0.6988, 0.698),
        (47_504.5, 187, 358, 0.7096, 0.710),
    ];
    for (u, n1, n2, derived, published) in cases {
        let ps = probability_of_superiority(u, n1, n2).unwrap();
        assert!(
            (ps - derived).abs() <= 1e-4,
            "PS({u}, {n1}, {n2}) = {ps} vs derived {derived}"
        );
        assert!(
            (ps - published).abs() <= 0.0015,
            "PS({u}, {n1}, {n2}) = {ps} vs published {published}"
        );
    }
    pass("C1", "three PS values within 0.0015 of 57.7/69.8/71.0%".into());
}

// ---------------------------------------------------------------------
// Criterion 2: rank-biserial effect sizes.
// ---------------------------------------------------------------------
#[test]
fn c2_rank_biserial_matches_published_effect_sizes() {
    let cases = [
        (221_408.5, 358, 885, 0.3977, 0.396),
        (47_504.5, 187, 358, 0.4192, 0.419),
        // The published 0.153 disagrees with every convention tried by
        // ~0.003; asserted at the documented +-0.004.
        (331_001.5, 885, 647, 0.1562, 0.153),
    ];
    for (u, n1, n2, derived, published) in cases {
        let r = rank_biserial(u, n1, n2).unwrap();
        assert!(
            (r - derived).abs() <= 1e-4,
            "r({u}, {n1}, {n2}) = {r} vs derived {derived}"
        );
        assert!(
            (r - published).abs() <= 0.004,
            "r({u}, {n1}, {n2}) = {r} vs published {published}"
        );
    }
    pass("C2", "effect sizes within 0.004 of 0.396/0.419/0.153".into());
}

// ---------------------------------------------------------------------
// Criterion 3: metric arithmetic from the published confusion counts.
// ---------------------------------------------------------------------
#[test]
fn c3_metric_arithmetic_reproduces_published_table() {
    // Diagonal and supports from the results text; off-diagonal placement
    // does not affect recalls.
    let correct = [531u64, 622, 171, 125];
    let support = [647u64, 885, 358, 187];
    let mut records = Vec::new();
    for c in 0..4 {
        let onehot = |k: usize| {
            let mut p = [0.0; 4];
            p[k] = 1.0;
            p
        };
        for i in 0..support[c] {
            let predicted = if i < correct[c] { c } else { (c + 1) % 4 };
            records.push(PredictionRecord {
                slide_id: format!("s{c}_{i}"),
                patient_id: format!("p{c}_{i}"),
                fold: 0,
                true_label: ActivityClass::ALL[c],
                probabilities: onehot(predicted),
                predicted_label: ActivityClass::ALL[predicted],
            });
        }
    }
    let summary = prf(&confusion_matrix(&records).unwrap());

    let published_recalls = [0.821, 0.703, 0.478, 0.668];
    for (c, want) in published_recalls.iter().enumerate() {
        assert!(
            (summary.per_class[c].recall - want).abs() <= 0.0005,
            "class {c} recall {} vs {want}",
            summary.per_class[c].recall
        );
    }

    // Weighted recall is exactly 1449/2077 = 0.69764; the published
    // rounding is 0.697. A +-0.0005 band around 0.697 excludes the true
    // arithmetic value, so the assertion pins the exact fraction and holds
    // the published value to the achievable 0.001.
    let exact = 1449.0 / 2077.0;
    assert!((summary.weighted_recall - exact).abs() < 1e-12);
    assert!((summary.weighted_recall - 0.6976).abs() <= 0.0005);
    assert!((summary.weighted_recall - 0.697).abs() <= 0.001);

    // Weighted AUC of the published per-class AUCs with those supports:
    // exactly 1810.324/2077 = 0.87160 (the published average is 0.871).
    let weighted_auc = support_weighted_mean(&[0.925, 0.826, 0.861, 0.923], &support);
    let exact_auc = (647.0 * 0.925 + 885.0 * 0.826 + 358.0 * 0.861 + 187.0 * 0.923) / 2077.0;
    assert!((weighted_auc - exact_auc).abs() < 1e-12);
    assert!((weighted_auc - 0.8712).abs() <= 0.0005);
    assert!((weighted_auc - 0.871).abs() <= 0.001);

    pass(
        "C3",
        format!(
            "recalls {:?}, weighted recall {:.4}, weighted AUC {:.4}",
            published_recalls, summary.weighted_recall, weighted_auc
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 4: end-to-end synthetic run hits the performance bar.
// ---------------------------------------------------------------------
#[test]
fn c4_synthetic_run_reaches_auc_and_f1_bars_in_budget() {
    let fx = fixture();
    let report: histograde::metrics::MetricReport = serde_json::from_str(
        &std::fs::read_to_string(fx.out.join("metrics/report.json")).unwrap(),
    )
    .unwrap();
    assert!(
        report.weighted.auc >= 0.90,
        "weighted AUC {} below 0.90",
        report.weighted.auc
    );
    assert!(
        report.weighted.f1 >= 0.80,
        "weighted F1 {} below 0.80",
        report.weighted.f1
    );
    assert!(
        fx.wall <= Duration::from_secs(600),
        "pipeline took {:?}, over the 10-minute budget",
        fx.wall
    );
    pass(
        "C4",
        format!(
            "weighted AUC {:.4}, weighted F1 {:.4}, wall {:.1}s",
            report.weighted.auc,
            report.weighted.f1,
            fx.wall.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 5: gradient correctness.
// ---------------------------------------------------------------------
#[test]
fn c5_gradients_pass_finite_difference_checks() {
    use histograde::autodiff::gradcheck::{max_relative_error, DEFAULT_STEP};
    use histograde::autodiff::{ClassWeights, Graph, NodeId, Tensor};
    use histograde::vit::{Model, ModelConfig, ParamNodes};
    use rand::SeedableRng;
    use std::collections::BTreeMap;

    let randn = |shape: &[usize], seed: u64| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    };
    let reduce = |g: &mut Graph, x: NodeId, seed: u64| {
        let shape = g.value(x).shape().to_vec();
        let coeffs = g.input(randn(&shape, seed));
        let m = g.mul(x, coeffs)?;
        g.sum(m)
    };

    // Every primitive at 1e-6 relative error.
    let mut worst: f64 = 0.0;
    let mut check = |name: &str, err: f64| {
        assert!(err <= 1e-6, "{name} rel err {err}");
        if err > worst {
            worst = err;
        }
    };
    check(
        "matmul",
        max_relative_error(
            &|g, p| {
                let y = g.matmul(p[0], p[1])?;
                reduce(g, y, 1)
            },
            &[randn(&[4, 5], 2), randn(&[5, 3], 3)],
            false,
            0,
            DEFAULT_STEP,
        )
        .unwrap(),
    );
    check(
        "add+embedding_add+scale+mul",
        max_relative_error(
            &|g, p| {
                let a = g.add(p[0], p[1])?;
                let e = g.embedding_add(a, p[0])?;
                let s = g.scale(e, 0.7)?;
                let m = g.mul(s, p[1])?;
                reduce(g, m, 4)
            },
            &[randn(&[4, 4], 5), randn(&[4, 4], 6)],
            false,
            0,
            DEFAULT_STEP,
        )
        .unwrap(),
    );
    check(
        "layer_norm",
        max_relative_error(
            &|g, p| {
                let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
                reduce(g, y, 7)
            },
            &[randn(&[3, 8], 8), randn(&[8], 9), randn(&[8], 10)],
            false,
            0,
            DEFAULT_STEP,
        )
        .unwrap(),
    );
    check(
        "softmax",
        max_relative_error(
            &|g, p| {
                let y = g.softmax(p[0], 1)?;
                reduce(g, y, 11)
            },
            &[randn(&[4, 6], 12)],
            false,
            0,
            DEFAULT_STEP,
        )
        .unwrap(),
    );
    check(
        "gelu",
        max_relative_error(
            &|g, p| {
                let y = g.gelu(p[0])?;
                reduce(g, y, 13)
            },
            &[randn(&[5, 5], 14)],
            false,
            0,
            DEFAULT_STEP,
        )
        .unwrap(),
    );
    check(
        "dropout(train)",
        max_relative_error(
            &|g, p| {
                let y = g.dropout(p[0], 0.25)?;
                reduce(g, y, 15)
            },
            &[randn(&[6, 6], 16)],
            true,
            0xacce97,
            DEFAULT_STEP,
        )
        .unwrap(),
    );
    check(
        "linear",
        max_relative_error(
            &|g, p| {
                let y = g.linear(p[0], p[1], p[2])?;
                reduce(g, y, 17)
            },
            &[randn(&[4, 5], 18), randn(&[5, 3], 19), randn(&[3], 20)],
            false,
            0,
            DEFAULT_STEP,
        )
        .unwrap(),
    );
    check(
        "mean",
        max_relative_error(
            &|g, p| {
                let y = g.mean(p[0], 0)?;
                reduce(g, y, 21)
            },
            &[randn(&[5, 4], 22)],
            false,
            0,
            DEFAULT_STEP,
        )
        .unwrap(),
    );
    check(
        "weighted_cross_entropy",
        max_relative_error(
            &|g, p| g.weighted_cross_entropy(p[0], 1, 2.7767),
            &[randn(&[4], 23)],
            false,
            0,
            DEFAULT_STEP,
        )
        .unwrap(),
    );

    // Composed model: d_model 16, 1 layer, 2 heads, 3 patches, at 1e-4.
    let cfg = ModelConfig {
        input_dim: 6,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        mlp_ratio: 2.0,
        dropout: 0.1,
        region_side: 4,
    };
    let model = Model::init(cfg, 99).unwrap();
    let names: Vec<String> = model.params.keys().cloned().collect();
    let values: Vec<Tensor> = model.params.values().cloned().collect();
    let weights = ClassWeights::new([0.8026, 0.5867, 1.4504, 2.7767]).unwrap();
    let emb = randn(&[3, 6], 55);
    let coords = vec![(0u32, 0u32), (2, 1), (3, 3)];
    let composed_err = max_relative_error(
        &|g, ids| {
            let by_name: BTreeMap<String, NodeId> =
                names.iter().cloned().zip(ids.iter().copied()).collect();
            let nodes = ParamNodes { by_name };
            model.build_slide_loss(
                g,
                &nodes,
                &[(emb.clone(), coords.clone())],
                3,
                &weights,
            )
        },
        &values,
        true,
        0x900d,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(composed_err <= 1e-4, "composed model rel err {composed_err}");

    pass(
        "C5",
        format!("primitives worst {worst:.2e} <= 1e-6, composed {composed_err:.2e} <= 1e-4"),
    );
}

// ---------------------------------------------------------------------
// Criterion 6: exact Mann-Whitney oracle.
// ---------------------------------------------------------------------
#[test]
fn c6_exact_p_matches_enumeration_and_u_antisymmetry_holds() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xc6);

    // Exhaustive oracle over all C(n1+n2, n1) arrangements.
    fn enumerate_tail(x: &[f64], y: &[f64]) -> (u64, u64) {
        let n1 = x.len();
        let n = n1 + y.len();
        let mut merged: Vec<f64> = x.iter().chain(y.iter()).copied().collect();
        merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let u_of = |xs: &[f64], ys: &[f64]| -> f64 {
            let mut u = 0.0;
            for a in xs {
                for b in ys {
                    if a > b {
                        u += 1.0;
                    } else if a == b {
                        u += 0.5;
                    }
                }
            }
            u
        };
        let u_obs = u_of(x, y);
        let mut combo: Vec<usize> = (0..n1).collect();
        let (mut tail, mut total) = (0u64, 0u64);
        loop {
            let xs: Vec<f64> = combo.iter().map(|&i| merged[i]).collect();
            let ys: Vec<f64> = (0..n)
                .filter(|i| !combo.contains(i))
                .map(|i| merged[i])
                .collect();
            if u_of(&xs, &ys) >= u_obs {
                tail += 1;
            }
            total += 1;
            let mut i = n1;
            loop {
                if i == 0 {
                    return (tail, total);
                }
                i -= 1;
                if combo[i] != i + n - n1 {
                    combo[i] += 1;
                    for j in i + 1..n1 {
                        combo[j] = combo[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    let mut checked = 0usize;
    for n1 in 1..=6usize {
        for n2 in 1..=6usize {
            for _ in 0..3 {
                let mut values: Vec<f64> = (0..n1 + n2).map(|i| i as f64 + 1.0).collect();
                for i in (1..values.len()).rev() {
                    values.swap(i, rng.gen_range(0..=i));
                }
                let (x, y) = values.split_at(n1);
                let r = mann_whitney_one_sided(x, y).unwrap();
                assert_eq!(r.method, Method::Exact);
                let (tail, total) = enumerate_tail(x, y);
                let oracle = tail as f64 / total as f64;
                assert_eq!(r.p_one_sided, oracle, "exact p for n1={n1} n2={n2}");
                checked += 1;
            }
        }
    }

    // Antisymmetry with half-tie counting over 10^4 random tied samples.
    for _ in 0..10_000 {
        let n1 = rng.gen_range(1..10);
        let n2 = rng.gen_range(1..10);
        let x: Vec<f64> = (0..n1).map(|_| f64::from(rng.gen_range(0..4))).collect();
        let y: Vec<f64> = (0..n2).map(|_| f64::from(rng.gen_range(0..4))).collect();
        let fwd = mann_whitney_one_sided(&x, &y).unwrap();
        let rev = mann_whitney_one_sided(&y, &x).unwrap();
        assert_eq!(fwd.u + rev.u, (n1 * n2) as f64);
    }
    pass(
        "C6",
        format!("{checked} exact-p cases match enumeration; antisymmetry over 10^4 tied samples"),
    );
}

// ---------------------------------------------------------------------
// Criterion 7: pipeline invariants on the shared run.
// ---------------------------------------------------------------------
#[test]
fn c7a_every_retained_patch_meets_tissue_threshold() {
    let fx = fixture();
    let mut patches = 0usize;
    for entry in std::fs::read_dir(fx.out.join("grids")).unwrap() {
        let grid = histograde::preprocess::load_patch_grid(&entry.unwrap().path()).unwrap();
        for record in &grid.records {
            assert!(
                record.tissue_fraction >= 0.05,
                "{}: patch ({}, {}) at {}",
                grid.slide_id,
                record.grid_x,
                record.grid_y,
                record.tissue_fraction
            );
            patches += 1;
        }
    }
    pass("C7a", format!("{patches} retained patches all >= 5% tissue"));
}

#[test]
fn c7b_folds_partition_manifest_with_patient_grouping() {
    let fx = fixture();
    let manifest = histograde::slide::load_manifest(&fx.out.join("manifest.jsonl")).unwrap();
    let folds =
        histograde::trainer::FoldAssignment::load(&fx.out.join("train/folds.json")).unwrap();
    for entry in &manifest.entries {
        let slide_fold = folds.slide_to_fold[&entry.slide_id];
        let patient_fold = folds.patient_to_fold[&entry.patient_id];
        assert_eq!(slide_fold, patient_fold, "slide {}", entry.slide_id);
        assert!(slide_fold < folds.k);
    }
    assert_eq!(folds.slide_to_fold.len(), manifest.entries.len());
    // Every fold nonempty.
    for f in 0..folds.k {
        assert!(folds.slide_to_fold.values().any(|v| *v == f));
    }
    pass(
        "C7b",
        format!(
            "{} slides partitioned over {} folds, no patient spans folds",
            manifest.entries.len(),
            folds.k
        ),
    );
}

/// Loads the fixture's fold-0 model plus one slide's grid/embeddings and a
/// validation region.
fn fixture_model_and_region() -> (
    histograde::vit::Model,
    histograde::embed::EmbeddingMatrix,
    Vec<histograde::vit::Region>,
) {
    let fx = fixture();
    let manifest = histograde::slide::load_manifest(&fx.out.join("manifest.jsonl")).unwrap();
    let model = histograde::vit::load_checkpoint(&fx.out.join("train/fold0.ckpt"))
        .unwrap()
        .into_model()
        .unwrap();
    // A slide with at least two regions and a multi-patch region.
    for entry in &manifest.entries {
        let grid = histograde::preprocess::load_patch_grid(
            &fx.out.join(format!("grids/{}.jsonl", entry.slide_id)),
        )
        .unwrap();
        let embeddings = histograde::embed::import_embeddings(
            &fx.out.join(format!("embeddings/{}.emb", entry.slide_id)),
        )
        .unwrap();
        let regions = histograde::trainer::sample_regions(
            &grid,
            175,
            model.config.region_side,
            0,
            histograde::trainer::SamplingMode::Validation,
        )
        .unwrap();
        if regions.len() >= 2 && regions.iter().any(|r| r.members.len() >= 4) {
            return (model, embeddings, regions);
        }
    }
    panic!("no suitable slide found in fixture");
}

#[test]
fn c7c_attention_maps_sum_to_one() {
    let (model, embeddings, regions) = fixture_model_and_region();
    for region in regions.iter().take(3) {
        let (_, attention) = model.encode_region(&embeddings, region, false, 0).unwrap();
        for (l, layer) in attention.rows.iter().enumerate() {
            for (h, head) in layer.iter().enumerate() {
                let sum: f64 = head.iter().sum();
                assert!(
                    (sum - 1.0).abs() <= 1e-6,
                    "raw attention row sums to {sum} at layer {l} head {h}"
                );
            }
        }
        let map = histograde::vit::extract_cls_attention(
            &attention,
            region,
            histograde::vit::AttentionAggregation::LastLayer,
        );
        let sum: f64 = map.weights.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "extracted map sums to {sum}");
        assert!(map.weights.iter().all(|w| *w >= 0.0));
    }
    pass("C7c", "raw rows and extracted maps sum to 1 +- 1e-6".into());
}

#[test]
fn c7d_logits_invariant_under_region_and_patch_permutation() {
    let (model, embeddings, regions) = fixture_model_and_region();

    // Region-order permutation.
    let forward = model.predict_slide(&embeddings, &regions).unwrap();
    let mut reversed_regions = regions.clone();
    reversed_regions.reverse();
    let reversed = model.predict_slide(&embeddings, &reversed_regions).unwrap();
    for (a, b) in forward.iter().zip(&reversed) {
        assert!((a - b).abs() <= 1e-6, "region order changed probs: {a} vs {b}");
    }

    // Patch-order permutation inside a region.
    let rich = regions.iter().find(|r| r.members.len() >= 4).unwrap();
    let mut permuted = rich.clone();
    permuted.members.reverse();
    permuted.rel_coords.reverse();
    let (cls_a, _) = model.encode_region(&embeddings, rich, false, 0).unwrap();
    let (cls_b, _) = model.encode_region(&embeddings, &permuted, false, 0).unwrap();
    for (a, b) in cls_a.iter().zip(&cls_b) {
        assert!((a - b).abs() <= 1e-6, "patch order changed CLS: {a} vs {b}");
    }
    pass("C7d", "probabilities and CLS stable under both permutations".into());
}

#[test]
fn c7e_duplicated_region_fusion_equals_single() {
    let (model, embeddings, regions) = fixture_model_and_region();
    let region = &regions[0];
    let (cls, _) = model.encode_region(&embeddings, region, false, 0).unwrap();
    let single = model.fuse_and_classify(std::slice::from_ref(&cls)).unwrap();
    let doubled = model.fuse_and_classify(&[cls.clone(), cls.clone()]).unwrap();
    for (a, b) in single.iter().zip(&doubled) {
        assert!((a - b).abs() <= 1e-12, "duplication moved logits: {a} vs {b}");
    }
    pass("C7e", "mean-pool fusion idempotent at 1e-12".into());
}

#[test]
fn c7f_pipeline_rerun_is_byte_identical() {
    // A smaller dataset exercises the same full stage chain.
    const SMALL: &str = r#"
seed = 21

[synth]
n_slides = 16
slide_px = 1024

[train]
k_folds = 3
max_epochs = 2
patience = 2
lr = 1e-3

[metrics]
bootstrap_b = 50
"#;
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let out_a = dir_a.path().join("run");
    let out_b = dir_b.path().join("run");
    run_pipeline(SMALL, &out_a);
    run_pipeline(SMALL, &out_b);

    fn walk(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, base, out);
            } else {
                out.push(path.strip_prefix(base).unwrap().to_path_buf());
            }
        }
    }
    let mut files_a = Vec::new();
    walk(&out_a, &out_a, &mut files_a);
    files_a.sort();
    let mut files_b = Vec::new();
    walk(&out_b, &out_b, &mut files_b);
    files_b.sort();
    assert_eq!(files_a, files_b, "file trees differ");
    for rel in &files_a {
        let a = std::fs::read(out_a.join(rel)).unwrap();
        let b = std::fs::read(out_b.join(rel)).unwrap();
        assert_eq!(a, b, "file {} differs between reruns", rel.display());
    }
    pass("C7f", format!("{} artifacts byte-identical across reruns", files_a.len()));
}

// ---------------------------------------------------------------------
// Criterion 8: bootstrap behavior.
// ---------------------------------------------------------------------
#[test]
fn c8_bootstrap_determinism_ordering_and_containment() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xc8);
    let make_records = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<PredictionRecord> {
        let n = rng.gen_range(40..120);
        (0..n)
            .map(|i| {
                let t = rng.gen_range(0..4usize);
                // Mostly correct with noise, so F1 varies but stays defined.
                let p = if rng.gen_bool(0.75) { t } else { rng.gen_range(0..4) };
                let mut probs = [0.05; 4];
                probs[p] = 0.85;
                PredictionRecord {
                    slide_id: format!("s{i}"),
                    patient_id: format!("p{i}"),
                    fold: 0,
                    true_label: ActivityClass::ALL[t],
                    probabilities: probs,
                    predicted_label: ActivityClass::ALL[p],
                }
            })
            .collect()
    };

    // Fixed-seed determinism, exact.
    let records = make_records(&mut rng);
    let f = |r: &[PredictionRecord]| weighted_f1(r);
    let a = bootstrap_ci(&records, &f, 500, 0.05, 42).unwrap();
    let b = bootstrap_ci(&records, &f, 500, 0.05, 42).unwrap();
    assert_eq!(a, b, "same seed must give the identical interval");

    // lo <= hi always and point-estimate containment in >= 99/100 sets.
    let mut contained = 0;
    for trial in 0..100u64 {
        let records = make_records(&mut rng);
        let point = weighted_f1(&records).unwrap();
        let (lo, hi) = bootstrap_ci(&records, &f, 200, 0.05, 1000 + trial).unwrap();
        assert!(lo <= hi, "interval inverted: [{lo}, {hi}]");
        if lo <= point && point <= hi {
            contained += 1;
        }
    }
    assert!(contained >= 99, "containment {contained}/100 below 99");
    pass(
        "C8",
        format!("deterministic; lo<=hi; point estimate contained in {contained}/100"),
    );
}

// ---------------------------------------------------------------------
// Criterion 9: synthetic neutrophil trend.
// ---------------------------------------------------------------------
#[test]
fn c9_neutrophil_trend_on_synthetic_dataset() {
    let fx = fixture();
    let comparisons: Vec<PairwiseComparison> =
        serde_json::from_str(&std::fs::read_to_string(fx.out.join("stats/mwu.json")).unwrap())
            .unwrap();
    assert_eq!(comparisons.len(), 3);
    let by_key = |key: &str| -> &PairwiseComparison {
        comparisons
            .iter()
            .find(|c| c.key == key)
            .unwrap_or_else(|| panic!("missing comparison {key}"))
    };
    for key in ["mild_vs_inactive", "moderate_vs_mild", "severe_vs_moderate"] {
        let c = by_key(key);
        assert!(
            c.result.p_one_sided < 0.01,
            "{key}: p = {}",
            c.result.p_one_sided
        );
        assert!(c.result.ps > 0.55, "{key}: PS = {}", c.result.ps);
    }
    // The generator's density gaps increase with grade, so the separation
    // must too.
    let first = by_key("mild_vs_inactive").result.ps;
    let last = by_key("severe_vs_moderate").result.ps;
    assert!(
        last > first,
        "PS(severe/moderate) = {last} not above PS(mild/inactive) = {first}"
    );
    pass(
        "C9",
        format!(
            "PS {:.3}/{:.3}/{:.3}, all p < 0.01",
            first,
            by_key("moderate_vs_mild").result.ps,
            last
        ),
    );
}
