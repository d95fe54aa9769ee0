//! Class weights for the imbalance-aware loss.

use serde::{Deserialize, Serialize};

use super::graph::AutodiffError;

/// Per-class loss weights; all strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: [f64; 4],
}

impl ClassWeights {
    pub fn uniform() -> ClassWeights {
        ClassWeights { w: [1.0; 4] }
    }

    pub fn new(w: [f64; 4]) -> Result<ClassWeights, AutodiffError> {
        if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(AutodiffError::Parameter {
                op: "class_weights",
                message: format!("weights {w:?} must all be positive"),
            });
        }
        Ok(ClassWeights { w })
    }

    pub fn weight(&self, class: usize) -> f64 {
        self.w[class]
    }
}
