//! Desk-scale whole-slide-image activity grading pipeline.
//!
//! The crate covers the full path from raw slides to reports:
//!
//! * [`slide`] — tiled slide storage, manifests, and a deterministic
//!   synthetic slide generator,
//! * [`preprocess`] — tissue masking and fixed-size patch extraction,
//! * [`embed`] — per-patch feature vectors and a binary embedding store,
//! * [`autodiff`] — a minimal reverse-mode tape with the tensor ops the
//!   transformer needs, plus Adam and weighted cross-entropy,
//! * [`vit`] — the CLS-token region encoder and slide classifier,
//! * [`trainer`] — patient-grouped cross-validation and the training loop,
//! * [`metrics`] — confusion/PRF/AUC evaluation with bootstrap intervals,
//! * [`cytostats`] — cell counting and Mann-Whitney rank statistics,
//! * [`attnviz`] — attention heatmap overlays.

pub mod attnviz;
pub mod autodiff;
pub mod cytostats;
pub mod embed;
pub mod metrics;
pub mod preprocess;
pub mod slide;
pub mod trainer;
pub mod util;
pub mod vit;

pub use slide::{ActivityClass, SlideEntry, SlideImage, SlideManifest};
