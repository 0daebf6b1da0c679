//! The cross-U transformer backbone.
//!
//! Encoder levels run first and each stores its output. Decoder level `d`
//! then opens with a block whose cross-attention reads encoder state
//! `n_depth - d + 1`, so the deepest state feeds the first decoder level and
//! the shallowest feeds the last. `N` plain blocks precede the U-loop and `M`
//! follow it. Token routing, when active, covers exactly the U-loop.

mod adaln;
mod block;
mod config;
mod model;
mod patch;

pub use adaln::{shared_adaln, Modulation, SharedAdaLn, TimestepEmbedder};
pub use block::{Block, StreamCtx};
pub use config::{derived_counts, DerivedCounts, XutConfig};
pub use model::{BlockEvent, BlockRole, ForwardTrace, Xut, XutInput};
pub use patch::{patchify, unpatchify};
