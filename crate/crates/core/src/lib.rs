pub mod blocks;
pub mod data;
pub mod error;
pub mod network;
pub mod nn;
pub mod oracle;
pub mod simam;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod zoo;

pub use error::{Error, Result};
pub use simam::{simam_energy, simam_refine, EnergyMap, EnergyParams};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape4, Tensor4};
