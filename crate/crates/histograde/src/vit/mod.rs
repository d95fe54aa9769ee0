//! CLS-token region encoder and slide classifier.
//!
//! Patch embeddings are projected to the model width, tagged with a fixed 2D
//! sinusoidal positional encoding, prefixed with a learned CLS token, and run
//! through a pre-norm multi-head self-attention stack. Region CLS vectors are
//! average-pooled into a slide vector and classified into the four activity
//! grades. The CLS attention row of every layer and head is exportable.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelCheckpoint};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ClassWeights, Graph, NodeId, Tensor};
use crate::embed::EmbeddingMatrix;
use crate::util::derive_seed;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    /// Patches per region edge; a region is a `region_side`^2 grid window.
    pub region_side: u32,
}

impl ModelConfig {
    /// Small preset sized for CPU runs.
    pub fn desk_scale(input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            mlp_ratio: 4.0,
            dropout: 0.1,
            region_side: 4,
        }
    }

    /// The full-size configuration: 8 heads, 12 layers, dropout 0.1.
    pub fn paper_scale(input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            d_model: 512,
            n_heads: 8,
            n_layers: 12,
            mlp_ratio: 4.0,
            dropout: 0.1,
            region_side: 4,
        }
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        let fail = |message: String| {
            Err(AutodiffError::Parameter {
                op: "model_config",
                message,
            })
        };
        if self.input_dim == 0 || self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return fail("dimensions and depth must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 4 != 0 {
            return fail(format!(
                "d_model {} must be divisible by 4 for 2D positional encoding",
                self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.mlp_ratio > 0.0) {
            return fail("mlp_ratio must be positive".into());
        }
        if self.region_side == 0 {
            return fail("region_side must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.d_model as f64) * self.mlp_ratio).round() as usize
    }
}

/// The sampling unit fed to the encoder: retained patches inside one
/// `region_side`^2 window of the patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub slide_id: String,
    pub origin: (u32, u32),
    /// Indices into the patch grid's record list.
    pub members: Vec<usize>,
    /// Grid coordinates relative to `origin`, aligned with `members`.
    pub rel_coords: Vec<(u32, u32)>,
}

impl Region {
    pub fn new(
        slide_id: String,
        origin: (u32, u32),
        members: Vec<usize>,
        rel_coords: Vec<(u32, u32)>,
        region_side: u32,
    ) -> Result<Region, AutodiffError> {
        if members.is_empty() || members.len() != rel_coords.len() {
            return Err(AutodiffError::Contract(
                "region must have matching, nonempty members and coordinates".into(),
            ));
        }
        if rel_coords
            .iter()
            .any(|(x, y)| *x >= region_side || *y >= region_side)
        {
            return Err(AutodiffError::Contract(format!(
                "relative coordinates must lie inside the {region_side}x{region_side} window"
            )));
        }
        Ok(Region {
            slide_id,
            origin,
            members,
            rel_coords,
        })
    }
}

/// CLS attention rows captured during a forward pass:
/// `rows[layer][head]` has `k + 1` softmax weights, index 0 being CLS->CLS.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAttention {
    pub rows: Vec<Vec<Vec<f64>>>,
}

/// Per-member CLS attention, normalized over patches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub region: Region,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionAggregation {
    /// Mean over heads of the final layer (default).
    LastLayer,
    /// Mean over all layers and heads.
    MeanAllLayers,
}

/// Fixed 2D sinusoidal positional encoding: the first half of the channels
/// encodes x, the second half y, each with the standard geometric frequency
/// ladder (sin on even channels, cos on odd).
pub fn positional_encode(rel_coords: &[(u32, u32)], d_model: usize) -> Result<Tensor, AutodiffError> {
    if d_model % 4 != 0 {
        return Err(AutodiffError::Parameter {
            op: "positional_encode",
            message: format!("d_model {d_model} must be divisible by 4"),
        });
    }
    let half = d_model / 2;
    let pairs = half / 2;
    let mut data = vec![0.0; rel_coords.len() * d_model];
    for (row, (x, y)) in rel_coords.iter().enumerate() {
        for (offset, pos) in [(0usize, f64::from(*x)), (half, f64::from(*y))] {
            for i in 0..pairs {
                let omega = 10000f64.powf(-(2.0 * i as f64) / half as f64);
                data[row * d_model + offset + 2 * i] = (pos * omega).sin();
                data[row * d_model + offset + 2 * i + 1] = (pos * omega).cos();
            }
        }
    }
    Ok(Tensor::matrix(rel_coords.len(), d_model, data))
}

/// Per-dimension standardization of input embeddings, fitted on the
/// training split (the backbone features arrive unnormalized and their
/// discriminative variation is tiny against the shared component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> FeatureNorm {
        FeatureNorm {
            mean: vec![0.0; dim],
            inv_std: vec![1.0; dim],
        }
    }

    /// Fits mean and 1/std per dimension over the given rows; constant
    /// dimensions get inv_std 0 (dropped).
    pub fn fit(rows: &[&[f64]], dim: usize) -> FeatureNorm {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(*row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for (i, v) in row.iter().enumerate() {
                let d = v - mean[i];
                var[i] += d * d;
            }
        }
        let inv_std = var
            .iter()
            .map(|v| {
                let std = (v / n).sqrt();
                if std > 1e-12 {
                    1.0 / std
                } else {
                    0.0
                }
            })
            .collect();
        FeatureNorm { mean, inv_std }
    }

    pub fn apply(&self, matrix: &mut Tensor) {
        let dim = self.mean.len();
        for (i, v) in matrix.data_mut().iter_mut().enumerate() {
            let c = i % dim;
            *v = (*v - self.mean[c]) * self.inv_std[c];
        }
    }
}

/// Parameters and architecture; the single owner of the named tensor map.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    /// Input standardization; identity until fitted by the trainer.
    pub feature_norm: FeatureNorm,
}

/// Node handles for one registration of the parameters into a graph.
pub struct ParamNodes {
    pub by_name: BTreeMap<String, NodeId>,
}

impl Model {
    /// Random initialization: Xavier-scaled weights (std 1/sqrt(fan_in)),
    /// biases zero, layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, AutodiffError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model-init"));
        let mut params = BTreeMap::new();
        let d = config.d_model;
        fn w(
            params: &mut BTreeMap<String, Tensor>,
            name: String,
            shape: &[usize],
            rng: &mut ChaCha8Rng,
        ) {
            let std = 1.0 / (shape[0] as f64).sqrt();
            params.insert(name, Tensor::randn(shape, std, rng));
        }

        w(&mut params, "input_proj.w".into(), &[config.input_dim, d], &mut rng);
        params.insert("input_proj.b".into(), Tensor::zeros(&[d]));
        w(&mut params, "cls_token".into(), &[1, d], &mut rng);
        for layer in 0..config.n_layers {
            let p = format!("layer{layer}");
            params.insert(format!("{p}.ln1.gamma"), Tensor::ones(&[d]));
            params.insert(format!("{p}.ln1.beta"), Tensor::zeros(&[d]));
            w(&mut params, format!("{p}.attn.wq"), &[d, d], &mut rng);
            params.insert(format!("{p}.attn.bq"), Tensor::zeros(&[d]));
            w(&mut params, format!("{p}.attn.wk"), &[d, d], &mut rng);
            params.insert(format!("{p}.attn.bk"), Tensor::zeros(&[d]));
            w(&mut params, format!("{p}.attn.wv"), &[d, d], &mut rng);
            params.insert(format!("{p}.attn.bv"), Tensor::zeros(&[d]));
            w(&mut params, format!("{p}.attn.wo"), &[d, d], &mut rng);
            params.insert(format!("{p}.attn.bo"), Tensor::zeros(&[d]));
            params.insert(format!("{p}.ln2.gamma"), Tensor::ones(&[d]));
            params.insert(format!("{p}.ln2.beta"), Tensor::zeros(&[d]));
            w(&mut params, format!("{p}.mlp.w1"), &[d, config.mlp_hidden()], &mut rng);
            params.insert(format!("{p}.mlp.b1"), Tensor::zeros(&[config.mlp_hidden()]));
            w(&mut params, format!("{p}.mlp.w2"), &[config.mlp_hidden(), d], &mut rng);
            params.insert(format!("{p}.mlp.b2"), Tensor::zeros(&[d]));
        }
        params.insert("final_ln.gamma".into(), Tensor::ones(&[d]));
        params.insert("final_ln.beta".into(), Tensor::zeros(&[d]));
        w(&mut params, "head.w".into(), &[d, NUM_CLASSES], &mut rng);
        params.insert("head.b".into(), Tensor::zeros(&[NUM_CLASSES]));

        Ok(Model {
            config,
            params,
            feature_norm: FeatureNorm::identity(config.input_dim),
        })
    }

    /// Expected parameter shapes implied by the config.
    pub fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        // Cheap to build from a throwaway init at fixed seed.
        let model = Model::init(*config, 0).expect("validated config");
        model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn register_params(&self, g: &mut Graph) -> ParamNodes {
        let by_name = self
            .params
            .iter()
            .map(|(name, tensor)| (name.clone(), g.param(tensor.clone())))
            .collect();
        ParamNodes { by_name }
    }

    fn p(&self, nodes: &ParamNodes, name: &str) -> NodeId {
        nodes.by_name[name]
    }

    /// Builds the encoder for one region on an existing graph. Returns the
    /// CLS output (1 x d_model) and the CLS attention row node per
    /// layer/head.
    pub fn build_region(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        member_embeddings: Tensor,
        rel_coords: &[(u32, u32)],
    ) -> Result<(NodeId, Vec<Vec<NodeId>>), AutodiffError> {
        let cfg = &self.config;
        let k = member_embeddings.rows_cols().0;
        if member_embeddings.rows_cols().1 != cfg.input_dim {
            return Err(AutodiffError::Shape {
                op: "encode_region",
                lhs: member_embeddings.shape().to_vec(),
                rhs: vec![k, cfg.input_dim],
            });
        }
        let mut member_embeddings = member_embeddings;
        self.feature_norm.apply(&mut member_embeddings);
        let emb = g.input(member_embeddings);
        let projected = g.linear(emb, self.p(nodes, "input_proj.w"), self.p(nodes, "input_proj.b"))?;
        // Content tokens enter at sqrt(d_model) scale so the positional
        // encoding does not dominate them.
        let scaled = g.scale(projected, (cfg.d_model as f64).sqrt())?;
        let pe = g.input(positional_encode(rel_coords, cfg.d_model)?);
        let tokens = g.embedding_add(scaled, pe)?;
        // The CLS token carries no positional encoding.
        let mut x = g.concat_rows(&[self.p(nodes, "cls_token"), tokens])?;

        let head_dim = cfg.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut attention_rows = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let pfx = format!("layer{layer}");
            let normed = g.layer_norm(
                x,
                self.p(nodes, &format!("{pfx}.ln1.gamma")),
                self.p(nodes, &format!("{pfx}.ln1.beta")),
                1e-5,
            )?;
            let q = g.linear(
                normed,
                self.p(nodes, &format!("{pfx}.attn.wq")),
                self.p(nodes, &format!("{pfx}.attn.bq")),
            )?;
            let key = g.linear(
                normed,
                self.p(nodes, &format!("{pfx}.attn.wk")),
                self.p(nodes, &format!("{pfx}.attn.bk")),
            )?;
            let v = g.linear(
                normed,
                self.p(nodes, &format!("{pfx}.attn.wv")),
                self.p(nodes, &format!("{pfx}.attn.bv")),
            )?;

            let mut head_outputs = Vec::with_capacity(cfg.n_heads);
            let mut head_attention = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = g.slice_cols(q, h * head_dim, head_dim)?;
                let kh = g.slice_cols(key, h * head_dim, head_dim)?;
                let vh = g.slice_cols(v, h * head_dim, head_dim)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scaled = g.scale(scores, scale)?;
                let attn = g.softmax(scaled, 1)?;
                head_attention.push(attn);
                head_outputs.push(g.matmul(attn, vh)?);
            }
            attention_rows.push(head_attention);

            let merged = g.concat_cols(&head_outputs)?;
            let projected = g.linear(
                merged,
                self.p(nodes, &format!("{pfx}.attn.wo")),
                self.p(nodes, &format!("{pfx}.attn.bo")),
            )?;
            let dropped = g.dropout(projected, cfg.dropout)?;
            x = g.add(x, dropped)?;

            let normed2 = g.layer_norm(
                x,
                self.p(nodes, &format!("{pfx}.ln2.gamma")),
                self.p(nodes, &format!("{pfx}.ln2.beta")),
                1e-5,
            )?;
            let hidden = g.linear(
                normed2,
                self.p(nodes, &format!("{pfx}.mlp.w1")),
                self.p(nodes, &format!("{pfx}.mlp.b1")),
            )?;
            let activated = g.gelu(hidden)?;
            let mlp_out = g.linear(
                activated,
                self.p(nodes, &format!("{pfx}.mlp.w2")),
                self.p(nodes, &format!("{pfx}.mlp.b2")),
            )?;
            let dropped = g.dropout(mlp_out, cfg.dropout)?;
            x = g.add(x, dropped)?;
        }

        let final_norm = g.layer_norm(
            x,
            self.p(nodes, "final_ln.gamma"),
            self.p(nodes, "final_ln.beta"),
            1e-5,
        )?;
        let cls = g.slice_rows(final_norm, 0, 1)?;
        Ok((cls, attention_rows))
    }

    /// Average-pool fusion over region CLS rows followed by the linear head.
    pub fn build_fusion_head(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        cls_rows: &[NodeId],
    ) -> Result<NodeId, AutodiffError> {
        if cls_rows.is_empty() {
            return Err(AutodiffError::Contract(
                "fusion requires at least one region vector".into(),
            ));
        }
        let stacked = g.concat_rows(cls_rows)?;
        let slide_vector = g.mean(stacked, 0)?;
        g.linear(slide_vector, self.p(nodes, "head.w"), self.p(nodes, "head.b"))
    }

    /// Full slide loss: encode each region, fuse, classify, and apply the
    /// weighted cross-entropy for `label`.
    #[allow(clippy::too_many_arguments)]
    pub fn build_slide_loss(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        regions: &[(Tensor, Vec<(u32, u32)>)],
        label: usize,
        weights: &ClassWeights,
    ) -> Result<NodeId, AutodiffError> {
        let mut cls_rows = Vec::with_capacity(regions.len());
        for (emb, coords) in regions {
            let (cls, _) = self.build_region(g, nodes, emb.clone(), coords)?;
            cls_rows.push(cls);
        }
        let logits = self.build_fusion_head(g, nodes, &cls_rows)?;
        g.weighted_cross_entropy(logits, label, weights.weight(label))
    }

    /// Inference for one region: the CLS vector and all attention rows.
    pub fn encode_region(
        &self,
        embeddings: &EmbeddingMatrix,
        region: &Region,
        train: bool,
        dropout_seed: u64,
    ) -> Result<(Vec<f64>, RegionAttention), AutodiffError> {
        let member_matrix = gather_members(embeddings, region)?;
        let mut g = Graph::new(train, dropout_seed);
        let nodes = self.register_params(&mut g);
        let (cls, attn_ids) = self.build_region(&mut g, &nodes, member_matrix, &region.rel_coords)?;
        let cls_vector = g.value(cls).data().to_vec();
        let rows = attn_ids
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|id| g.value(*id).row(0).to_vec())
                    .collect()
            })
            .collect();
        Ok((cls_vector, RegionAttention { rows }))
    }

    /// Average-pool fusion and classification of region CLS vectors.
    pub fn fuse_and_classify(&self, cls_vectors: &[Vec<f64>]) -> Result<[f64; NUM_CLASSES], AutodiffError> {
        if cls_vectors.is_empty() {
            return Err(AutodiffError::Contract(
                "fusion requires at least one region vector".into(),
            ));
        }
        let d = self.config.d_model;
        let mut g = Graph::new(false, 0);
        let nodes = self.register_params(&mut g);
        let rows: Vec<NodeId> = cls_vectors
            .iter()
            .map(|v| g.input(Tensor::matrix(1, d, v.clone())))
            .collect();
        let logits = self.build_fusion_head(&mut g, &nodes, &rows)?;
        let out = g.value(logits).data();
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// Slide-level class probabilities from a set of regions (eval mode).
    pub fn predict_slide(
        &self,
        embeddings: &EmbeddingMatrix,
        regions: &[Region],
    ) -> Result<[f64; NUM_CLASSES], AutodiffError> {
        let mut g = Graph::new(false, 0);
        let nodes = self.register_params(&mut g);
        let mut cls_rows = Vec::with_capacity(regions.len());
        for region in regions {
            let member_matrix = gather_members(embeddings, region)?;
            let (cls, _) = self.build_region(&mut g, &nodes, member_matrix, &region.rel_coords)?;
            cls_rows.push(cls);
        }
        let logits = self.build_fusion_head(&mut g, &nodes, &cls_rows)?;
        Ok(softmax4(g.value(logits).data()))
    }
}

/// Rows of the embedding matrix for a region's members.
pub fn gather_members(
    embeddings: &EmbeddingMatrix,
    region: &Region,
) -> Result<Tensor, AutodiffError> {
    let mut data = Vec::with_capacity(region.members.len() * embeddings.dim);
    for &idx in &region.members {
        if idx >= embeddings.n_rows() {
            return Err(AutodiffError::Contract(format!(
                "region member {idx} outside embedding matrix with {} rows",
                embeddings.n_rows()
            )));
        }
        data.extend_from_slice(embeddings.row(idx));
    }
    Ok(Tensor::matrix(region.members.len(), embeddings.dim, data))
}

pub fn softmax4(logits: &[f64]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (i, l) in logits.iter().enumerate() {
        out[i] = (l - max).exp();
        sum += out[i];
    }
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Aggregates captured attention into a per-patch map: mean over heads of
/// the selected layers' CLS rows, CLS->CLS excluded, renormalized to sum 1.
pub fn extract_cls_attention(
    attention: &RegionAttention,
    region: &Region,
    aggregation: AttentionAggregation,
) -> AttentionMap {
    let n_members = region.members.len();
    let mut weights = vec![0.0; n_members];
    let layers: Vec<&Vec<Vec<f64>>> = match aggregation {
        AttentionAggregation::LastLayer => vec![attention.rows.last().expect("nonempty stack")],
        AttentionAggregation::MeanAllLayers => attention.rows.iter().collect(),
    };
    let mut contributions = 0usize;
    for layer in layers {
        for head in layer {
            for (i, w) in head[1..].iter().enumerate() {
                weights[i] += w;
            }
            contributions += 1;
        }
    }
    for w in &mut weights {
        *w /= contributions as f64;
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        for w in &mut weights {
            *w /= total;
        }
    }
    AttentionMap {
        region: region.clone(),
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingMatrix;
    use rand::Rng;

    fn test_embeddings(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingMatrix {
            slide_id: "s".into(),
            dim,
            embedder_id: "test".into(),
            data: (0..n * dim).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    fn small_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            input_dim: 12,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            mlp_ratio: 2.0,
            dropout: 0.0,
            region_side: 4,
        };
        Model::init(cfg, seed).unwrap()
    }

    fn region(members: Vec<usize>, coords: Vec<(u32, u32)>) -> Region {
        Region::new("s".into(), (0, 0), members, coords, 4).unwrap()
    }

    #[test]
    fn positional_encoding_analytic_at_zero() {
        let pe = positional_encode(&[(0, 0)], 16).unwrap();
        for i in 0..4 {
            assert_eq!(pe.data()[2 * i], 0.0, "sin channel {i}");
            assert_eq!(pe.data()[2 * i + 1], 1.0, "cos channel {i}");
        }
        // y half too
        for i in 0..4 {
            assert_eq!(pe.data()[8 + 2 * i], 0.0);
            assert_eq!(pe.data()[8 + 2 * i + 1], 1.0);
        }
    }

    #[test]
    fn positional_encoding_equal_coords_equal_rows() {
        let pe = positional_encode(&[(3, 5), (3, 5)], 32).unwrap();
        assert_eq!(pe.row(0), pe.row(1));
    }

    #[test]
    fn positional_encoding_x_block_depends_only_on_x() {
        let d = 24;
        for x in 0..6u32 {
            let mut reference: Option<Vec<f64>> = None;
            for y in 0..6u32 {
                let pe = positional_encode(&[(x, y)], d).unwrap();
                let x_block = pe.data()[..d / 2].to_vec();
                match &reference {
                    None => reference = Some(x_block),
                    Some(r) => assert_eq!(r, &x_block, "x block must ignore y"),
                }
            }
        }
        // And the x block must distinguish different x.
        let a = positional_encode(&[(1, 0)], d).unwrap().data()[..d / 2].to_vec();
        let b = positional_encode(&[(2, 0)], d).unwrap().data()[..d / 2].to_vec();
        assert_ne!(a, b);
    }

    #[test]
    fn positional_encoding_requires_divisible_dim() {
        assert!(positional_encode(&[(0, 0)], 18).is_err());
    }

    #[test]
    fn single_patch_region_attends_fully_to_it() {
        let model = small_model(1);
        let emb = test_embeddings(1, 12, 2);
        let r = region(vec![0], vec![(0, 0)]);
        let (_, attention) = model.encode_region(&emb, &r, false, 0).unwrap();
        for layer in &attention.rows {
            for head in layer {
                assert_eq!(head.len(), 2);
                assert!((head[0] + head[1] - 1.0).abs() < 1e-9);
            }
        }
        // With CLS->CLS excluded, the lone patch carries all the mass at
        // every layer/head and in every aggregation.
        for aggregation in [AttentionAggregation::LastLayer, AttentionAggregation::MeanAllLayers] {
            let map = extract_cls_attention(&attention, &r, aggregation);
            assert_eq!(map.weights.len(), 1);
            assert!((map.weights[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let model = small_model(3);
        let emb = test_embeddings(5, 12, 4);
        let r = region(vec![0, 1, 2, 3, 4], vec![(0, 0), (1, 0), (2, 0), (0, 1), (1, 1)]);
        let (_, attention) = model.encode_region(&emb, &r, false, 0).unwrap();
        for layer in &attention.rows {
            for head in layer {
                let sum: f64 = head.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(head.iter().all(|w| *w >= 0.0));
            }
        }
        let map = extract_cls_attention(&attention, &r, AttentionAggregation::MeanAllLayers);
        let sum: f64 = map.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn permuting_members_preserves_cls_vector() {
        let model = small_model(5);
        let emb = test_embeddings(4, 12, 6);
        let r1 = region(vec![0, 1, 2, 3], vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        let r2 = region(vec![3, 1, 0, 2], vec![(1, 1), (1, 0), (0, 0), (0, 1)]);
        let (cls1, _) = model.encode_region(&emb, &r1, false, 0).unwrap();
        let (cls2, _) = model.encode_region(&emb, &r2, false, 0).unwrap();
        for (a, b) in cls1.iter().zip(&cls2) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_attention_construction_matches_naive_oracle() {
        // Restricted 1-layer config: wq = wk = 0 makes attention exactly
        // uniform; wv = wo = I and a zeroed MLP make the block output the
        // mean of the normalized tokens. The oracle recomputes that forward
        // with plain loops, independent of the graph machinery.
        let cfg = ModelConfig {
            input_dim: 8,
            d_model: 8,
            n_heads: 1,
            n_layers: 1,
            mlp_ratio: 2.0,
            dropout: 0.0,
            region_side: 4,
        };
        let mut model = Model::init(cfg, 7).unwrap();
        let d = cfg.d_model;
        let eye = {
            let mut data = vec![0.0; d * d];
            for i in 0..d {
                data[i * d + i] = 1.0;
            }
            Tensor::matrix(d, d, data)
        };
        model.params.insert("layer0.attn.wq".into(), Tensor::zeros(&[d, d]));
        model.params.insert("layer0.attn.wk".into(), Tensor::zeros(&[d, d]));
        model.params.insert("layer0.attn.wv".into(), eye.clone());
        model.params.insert("layer0.attn.wo".into(), eye.clone());
        model.params.insert("layer0.mlp.w1".into(), Tensor::zeros(&[d, cfg.mlp_hidden()]));
        model.params.insert("layer0.mlp.w2".into(), Tensor::zeros(&[cfg.mlp_hidden(), d]));
        // Identity input projection so tokens are the raw embeddings + PE.
        model.params.insert("input_proj.w".into(), eye);
        model.params.insert("input_proj.b".into(), Tensor::zeros(&[d]));

        let emb = test_embeddings(3, 8, 9);
        let r = region(vec![0, 1, 2], vec![(0, 0), (1, 0), (2, 0)]);
        let (cls, attention) = model.encode_region(&emb, &r, false, 0).unwrap();

        // Attention uniform over 4 tokens at the single layer/head.
        for w in &attention.rows[0][0] {
            assert!((w - 0.25).abs() < 1e-12);
        }

        // Naive oracle for the restricted forward.
        let ln = |row: &[f64], gamma: &[f64], beta: &[f64]| -> Vec<f64> {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * rstd * gamma[i] + beta[i])
                .collect()
        };
        let pe = positional_encode(&r.rel_coords, d).unwrap();
        let embed_scale = (d as f64).sqrt();
        let mut tokens: Vec<Vec<f64>> = vec![model.params["cls_token"].data().to_vec()];
        for i in 0..3 {
            let row: Vec<f64> = emb
                .row(i)
                .iter()
                .zip(pe.row(i))
                .map(|(e, p)| e * embed_scale + p)
                .collect();
            tokens.push(row);
        }
        let g1 = model.params["layer0.ln1.gamma"].data();
        let b1 = model.params["layer0.ln1.beta"].data();
        let normed: Vec<Vec<f64>> = tokens.iter().map(|t| ln(t, g1, b1)).collect();
        let mean_v: Vec<f64> = (0..d)
            .map(|c| normed.iter().map(|row| row[c]).sum::<f64>() / 4.0)
            .collect();
        // Residual: x = token + mean(normed); MLP contributes only b2 = 0.
        let cls_pre: Vec<f64> = tokens[0].iter().zip(&mean_v).map(|(t, m)| t + m).collect();
        let expected = ln(
            &cls_pre,
            model.params["final_ln.gamma"].data(),
            model.params["final_ln.beta"].data(),
        );
        for (got, want) in cls.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn fusion_is_identity_for_one_region_and_idempotent_for_duplicates() {
        let model = small_model(11);
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let one = model.fuse_and_classify(std::slice::from_ref(&v)).unwrap();
        let two = model.fuse_and_classify(&[v.clone(), v.clone()]).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_order_invariant() {
        let model = small_model(13);
        let a: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let ab = model.fuse_and_classify(&[a.clone(), b.clone()]).unwrap();
        let ba = model.fuse_and_classify(&[b, a]).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_fusion_is_contract_error() {
        let model = small_model(15);
        assert!(matches!(
            model.fuse_and_classify(&[]),
            Err(AutodiffError::Contract(_))
        ));
    }

    #[test]
    fn dominant_key_takes_almost_all_attention() {
        // Build the softmax arithmetic directly: one logit +20 over zeros.
        let mut g = Graph::new(false, 0);
        let x = g.input(Tensor::vector(vec![20.0, 0.0, 0.0, 0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert!(g.value(s).data()[0] > 0.99);
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let model = small_model(17);
        let emb = test_embeddings(4, 12, 18);
        let r = region(vec![0, 1, 2, 3], vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        let (a, _) = model.encode_region(&emb, &r, false, 0).unwrap();
        let (b, _) = model.encode_region(&emb, &r, false, 99).unwrap();
        assert_eq!(a, b, "eval forward must not depend on the dropout seed");
    }

    #[test]
    fn full_model_gradient_passes_finite_difference_check() {
        // Tiny config per the gradient-correctness gate: d_model 16, 1 layer,
        // 2 heads, 3 patches; checked with dropout active and inactive.
        let cfg = ModelConfig {
            input_dim: 6,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            mlp_ratio: 2.0,
            dropout: 0.1,
            region_side: 4,
        };
        let model = Model::init(cfg, 23).unwrap();
        let emb = test_embeddings(3, 6, 24);
        let coords = vec![(0u32, 0u32), (1, 0), (2, 1)];
        let weights = ClassWeights::new([0.8026, 0.5867, 1.4504, 2.7767]).unwrap();

        let names: Vec<String> = model.params.keys().cloned().collect();
        let values: Vec<Tensor> = model.params.values().cloned().collect();
        for train in [false, true] {
            let err = crate::autodiff::gradcheck::max_relative_error(
                &|g, ids| {
                    let by_name: BTreeMap<String, NodeId> = names
                        .iter()
                        .cloned()
                        .zip(ids.iter().copied())
                        .collect();
                    let nodes = ParamNodes { by_name };
                    let regions = vec![
                        (gather_members(&emb, &region(vec![0, 1, 2], coords.clone())).unwrap(), coords.clone()),
                        (gather_members(&emb, &region(vec![2, 0], vec![(0, 0), (3, 3)])).unwrap(),
                         vec![(0, 0), (3, 3)]),
                    ];
                    model.build_slide_loss(g, &nodes, &regions, 2, &weights)
                },
                &values,
                train,
                0x7a3e,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "composed model rel err {err} (train={train})");
        }
    }
}
