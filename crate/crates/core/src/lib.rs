//! Layout counting and correction over serialized diffusion attention tensors.

pub mod error;
pub mod eval;
pub mod grid;
pub mod guidance;
pub mod layout;
pub mod localize;
pub mod relayout;
pub mod relayout_net;
pub mod synthdata;
pub mod tensor_io;
pub mod viz;

pub use error::{Error, Result};
pub use grid::{Map2, Mask, CANONICAL_SIZE};
pub use layout::InstanceLayout;
