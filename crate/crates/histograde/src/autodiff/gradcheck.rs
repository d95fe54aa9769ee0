//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker rebuilds the graph from scratch for every probe, so node ids
//! (and therefore dropout masks) are identical between the analytic and
//! numerical paths.

use super::graph::{AutodiffError, Graph, NodeId};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds a scalar loss from registered parameters. The closure must
/// register parameters in the order given and return the loss node.
pub type LossBuilder<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError> + 'a;

/// Compares reverse-mode gradients against central finite differences and
/// returns the maximum relative error over all parameter elements, where
/// `rel = |analytic - numeric| / max(1, |numeric|)`.
pub fn max_relative_error(
    build: &LossBuilder,
    param_values: &[Tensor],
    train: bool,
    dropout_seed: u64,
    h: f64,
) -> Result<f64, AutodiffError> {
    let forward = |values: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new(train, dropout_seed);
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    // Analytic gradients.
    let mut g = Graph::new(train, dropout_seed);
    let ids: Vec<NodeId> = param_values.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(param_values)
        .map(|(id, p)| g.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut probe = param_values.to_vec();
    let mut max_rel: f64 = 0.0;
    for (pi, param) in param_values.iter().enumerate() {
        for ei in 0..param.len() {
            let orig = param.data()[ei];
            probe[pi].data_mut()[ei] = orig + h;
            let plus = forward(&probe)?;
            probe[pi].data_mut()[ei] = orig - h;
            let minus = forward(&probe)?;
            probe[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
