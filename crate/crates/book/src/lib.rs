//! The guide's chapters, included as module docs so that `cargo test`
//! compiles and runs every Rust listing in `book/src`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensor.md")]
pub mod tensor {}
#[doc = include_str!("../../../book/src/corruption.md")]
pub mod corruption {}
#[doc = include_str!("../../../book/src/architectures.md")]
pub mod architectures {}
#[doc = include_str!("../../../book/src/flops.md")]
pub mod flops {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/probes.md")]
pub mod probes {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
