//! The user guide, compiled.
//!
//! Each module embeds one chapter of the mdbook guide (`book/src/`) as its
//! documentation, so every Rust snippet in the book runs under `cargo test`
//! and the book can never drift from the library it describes.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/perturbations.md")]
pub mod perturbations {}

#[doc = include_str!("../../../book/src/surrogate-attack.md")]
pub mod surrogate_attack {}

#[doc = include_str!("../../../book/src/prompts.md")]
pub mod prompts {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
