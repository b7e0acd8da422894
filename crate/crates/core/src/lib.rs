//! Windowed multi-object tracking as differentiable min-cost flow.
//!
//! Detections in a short window of frames become a graph whose real edges
//! link consecutive frames. Soft flows over those edges are optimized against
//! a flow/spatial/temporal loss whose term weights come from the algebraic
//! connectivity of flow-dependent graphs, then decoded into hard links.

pub mod assign;
pub mod decode;
pub mod detection;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod scenario;
pub mod spectral;
pub mod surface;

pub use detection::{DetRef, Detection};
pub use error::{Error, Result};
pub use flow::{descend, init_flows, FlowState, SolverConfig};
pub use graph::{build_graph, GraphConfig, TrackingGraph};
pub use loss::{total_loss, DetectionQuality, LossBreakdown};
pub use spectral::{AdaptiveWeights, WeightsMode};
