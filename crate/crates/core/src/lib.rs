//! 3D criss-cross attention over spatiotemporal feature maps.
//!
//! A criss-cross module lets every position of a `(C, T, H, W)` map attend
//! to the `T + H + W - 2` positions that share two of its three coordinates.
//! Stacking the module with shared weights (three times by default) makes
//! every output depend on every input at a cost linear in the path length
//! instead of quadratic in the number of positions.
//!
//! The crate provides the forward pass, analytic gradients checked against
//! central differences, dense reference implementations, and a closed-form
//! cost model.

pub mod backward;
pub mod bench;
pub mod cost;
pub mod criss_cross;
pub mod error;
pub mod influence;
pub mod init;
pub mod io;
pub mod nonlocal;
pub mod rcca;
pub mod tensor;
pub mod verify;

pub use criss_cross::{aggregate, affinity, cca3d_forward, path_indices, softmax_over_path, AttentionMap, CcaCache, CcaWeights, CrissCrossPath};
pub use error::{Error, Result};
pub use rcca::{influence_set, rcca_forward, ChannelFraction, CcaWeightsC, ModuleWeights, RccaConfig, RccaWeights, Variant};
pub use tensor::{axpy, channel_project, max_abs_diff, FeatureMap4D, Grid, Matrix, Position, Scalar};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/paths.md")]
    mod paths {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/recurrence.md")]
    mod recurrence {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
