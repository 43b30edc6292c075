//! Single-shot detection with multiple-receptive-field predictors and
//! small-object-focusing weakly-supervised segmentation.

pub mod anchors;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod mrf;
pub mod net;
pub mod sws;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{ConvSpec, Tensor};
