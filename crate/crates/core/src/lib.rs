//! partlabel-core: human-in-the-loop labeling of pre-segmented 3D shapes.
//!
//! Part labels are proposed by a per-node classifier, confirmed by a human
//! (or a simulated oracle) through batch verification and per-shape
//! modification, and refined top-down over an AND/OR label taxonomy. Human
//! effort is accounted with a linear time model and every state change is
//! written to an append-only audit log that can be replayed.

pub mod ablation;
pub mod audit;
pub mod cost;
pub mod dataset;
pub mod geometry;
pub mod label_tree;
pub mod metrics;
pub mod oracle;
pub mod proposer;
pub mod scheduler;
pub mod session;
pub mod synthetic;

pub use cost::{CostLedger, SessionLedger};
pub use dataset::{DatasetManifest, PartRecord, PreparedDataset, PreparedShape, ShapeRecord};
pub use label_tree::{LabelNode, LabelTree, NodeKind};
pub use metrics::EvalReport;
pub use scheduler::SessionConfig;
pub use session::{Session, SessionState};

/// Shape identifiers are the string ids of the shape files.
pub type ShapeId = String;
/// Part identifiers are unique within a shape.
pub type PartId = u32;
