//! Sparse convolutional network engine: parameter layouts, a reverse-mode
//! tape, the model architectures, Adam, and model (de)serialization.

pub mod adam;
pub mod arch;
pub mod layers;
pub mod model_io;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use arch::{
    forward_dfa, forward_embed_dfa, forward_ool, forward_up2, ArchId, ArchPlan, DfaSpec, Network,
    OolSpec,
};
pub use layers::{
    center_kernel, child_kernel, down2_pairs, full_kernel, up2_coords, up2_pairs, ConvSpec,
    NeighborMap, Pair, ScalarBlock,
};
pub use model_io::{load_model, read_model, save_model, write_model};
pub use tape::{NodeId, Tape};
