pub mod alignment;
pub mod audit;
pub mod error;
pub mod faithfulness;
pub mod generator;
mod parallel;
pub mod gateway;
pub mod retriever;
pub mod shapley;

pub use error::{Error, Result};

/// Book chapters, compiled so their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/shapley.md")]
    mod shapley {}
    #[doc = include_str!("../../../book/src/retriever.md")]
    mod retriever {}
    #[doc = include_str!("../../../book/src/generator.md")]
    mod generator {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/faithfulness.md")]
    mod faithfulness {}
    #[doc = include_str!("../../../book/src/gateway.md")]
    mod gateway {}
    #[doc = include_str!("../../../book/src/audit.md")]
    mod audit {}
}
