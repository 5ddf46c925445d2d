//! Dense tensors, a reverse-mode tape, RMSProp, and parameter snapshots.

mod optim;
mod snapshot;
mod tape;
mod tensor;

pub use optim::{RmsProp, RmsPropConfig};
pub use snapshot::{from_bytes, read_snapshot, to_bytes, write_snapshot};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
