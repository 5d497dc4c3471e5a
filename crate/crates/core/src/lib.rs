//! Teacher smoothing (temporal moving average, spatial ensemble and their
//! combination) on small networks, with training tasks, diagnostics and an
//! experiment harness.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod param_store;
pub mod rng;
pub mod smoothing;
pub mod tinynn;
pub mod trainers;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/param-store.md")]
    mod param_store {}
    #[doc = include_str!("../../../book/src/smoothing.md")]
    mod smoothing {}
    #[doc = include_str!("../../../book/src/tinynn.md")]
    mod tinynn {}
    #[doc = include_str!("../../../book/src/trainers.md")]
    mod trainers {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
