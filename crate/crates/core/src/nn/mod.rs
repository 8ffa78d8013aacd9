pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;

pub use params::{Bound, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tape::{BufId, Gradients, Tape};
