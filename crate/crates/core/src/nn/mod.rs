//! Network building blocks on top of [`crate::autodiff`].
//!
//! Parameters live in a [`ParamStore`]; layers keep [`ParamId`]s into it and
//! read the bound values from a [`Bound`] view during a forward pass.

pub mod attention;
pub mod gmsf;
pub mod layers;
pub mod params;
pub mod transnext;

pub use attention::{AttentionConfig, AttentionVariant, EfficientAttention};
pub use gmsf::Gmsf;
pub use layers::{downsample, Conv2d, LayerNorm, PureConvBlock, Upsample};
pub use params::{Bound, ParamId, ParamStore};
pub use transnext::TransNextBlock;
