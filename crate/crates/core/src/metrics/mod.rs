//! Segmentation quality measures.
//!
//! Pixel metrics and ROC are computed inside the field-of-view mask; the
//! connectivity/area/length score compares whole masks.

pub mod cal;
pub mod confusion;
pub mod morphology;
pub mod roc;

pub use cal::{cal, CalConfig, CalScore};
pub use confusion::{basic_metrics, confusion, BasicMetrics, ConfusionCounts, Ratio};
pub use roc::{pooled_roc, roc, Roc, RocPoint};
