//! The book in `book/` cannot compile listings that depend on workspace
//! crates, so every chapter is pulled in here and `cargo test` runs its
//! code blocks as doc-tests. One module per chapter keeps failures
//! traceable to their page.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/backbone.md")]
pub mod backbone {}

#[doc = include_str!("../../../book/src/missing.md")]
pub mod missing {}

#[doc = include_str!("../../../book/src/replay.md")]
pub mod replay {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
