//! Networks and the autodiff engine they run on.

pub mod checkpoint;
pub mod conv;
pub mod discriminator;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod segmentor;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, ArchSpec, CheckpointRef, NamedNet, RngState};
pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{Generator, GeneratorSpec};
pub use graph::{Graph, ScalarObjective, Var};
pub use params::{ForwardCtx, Norm, ParamSet};
pub use segmentor::{Segmentor, SegmentorSpec};
pub use tensor::{Scalar, Tensor};
