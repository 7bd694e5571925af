//! Differentiable tensor substrate and the attention/modulation primitives
//! shared by every network in the crate.

pub mod adaln;
pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub(crate) mod linalg;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rope;
pub mod tensor;

pub use adaln::{adaln_block, AdaLnModulation, TimeEmbedding};
pub use attention::attention;
pub use gradcheck::finite_diff_check;
pub use graph::{Gradients, Graph, Var};
pub use linalg::cosine;
pub use params::{GradBuffer, Init, ParamId, ParamStore, Precision};
pub use rope::{apply_rope, ROPE_BASE};
pub use tensor::Tensor;
