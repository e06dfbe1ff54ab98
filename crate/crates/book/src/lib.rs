//! The guide in `book/` is plain mdbook Markdown. mdbook cannot run listings
//! that depend on an external crate, so each chapter is pulled in here as the
//! doc comment of an empty module and `cargo test --doc` runs its listings.
//! One module per chapter keeps failures traceable to a file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/volumes.md")]
pub mod volumes {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/roi.md")]
pub mod roi {}

#[doc = include_str!("../../../book/src/uncertainty.md")]
pub mod uncertainty {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
