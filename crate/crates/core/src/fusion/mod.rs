//! The Conv-Former fusion module.
//!
//! A unit runs a CNN stream over the image feature map `I: [H, W, C]` and a
//! transformer stream over the class embeddings `T: [K, C]`, joined by two
//! lightweight cross-attention bridges:
//!
//! - `Conv2Former` injects image context into each class token. Queries come
//!   from `T` through `W_Q`; keys and values are the raw stride-3 patch tokens
//!   of `I`; heads are merged by `W_O`.
//! - `Former2Conv` injects text context into each pixel. Queries are the raw
//!   pixels; keys and values come from `T` through `W_K` and `W_V`.
//!
//! The image operand is never projected, in either direction.

mod accounting;
mod attention;
mod blocks;
mod config;
mod unit;

pub use accounting::{count_params, estimate_flops, MacTable, ParamCounts};
pub use attention::{
    cross_attention_c2f, cross_attention_f2c, downsample_patches, inner_product_attend, multi_head_attention,
    padded_extent,
};
pub use blocks::{ConvBlock, FormerBlock};
pub use config::{BridgeVariant, ConvFormerConfig};
pub use unit::{BridgeC2f, BridgeF2c, ConvFormerUnit, FusionStack};
