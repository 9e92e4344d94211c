//! Operator-graph IR, rewrite passes that apply the kernel fusions, and an
//! interpreter that checks every rewrite preserves semantics.

pub mod fixtures;
mod graph;
mod interpret;
mod passes;
mod shapes;

pub use graph::{Attrs, GraphBuilder, Node, OpGraph, OpKind};
pub use interpret::{interpret, tiling_config};
pub use passes::{
    default_flash_dims, fuse_gelu, fuse_group_norm, rewrite_attention, rewrite_winograd, run_pipeline,
    select_flash_attention, Pass, PassReport, DEFAULT_FLASH_DIMS,
};
