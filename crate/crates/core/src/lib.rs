pub mod analysis;
pub mod convert;
pub mod distill;
pub mod error;
pub mod layers;
pub mod model;
pub mod numcore;
pub mod persist;
pub mod scan;
pub mod tasks;

pub use error::{Error, Result};
pub use model::{HeadKind, HiddenTrace, MixerKind, Model, ModelSpec};
pub use numcore::{Rng, Tape, Tensor, Var};
