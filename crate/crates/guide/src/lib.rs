//! The guide's chapters, compiled as doc comments so `cargo test` runs every
//! snippet in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/base-space.md")]
pub mod base_space {}
#[doc = include_str!("../../../book/src/desirability.md")]
pub mod desirability {}
#[doc = include_str!("../../../book/src/jump-operators.md")]
pub mod jump_operators {}
#[doc = include_str!("../../../book/src/tasks.md")]
pub mod tasks {}
#[doc = include_str!("../../../book/src/solving.md")]
pub mod solving {}
#[doc = include_str!("../../../book/src/transfer.md")]
pub mod transfer {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
