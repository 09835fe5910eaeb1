//! Multi-UAV image-based target tracking with control barrier function safety.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod cbf;
pub mod control;
pub mod estimator;
pub mod filter;
pub mod geometry;
pub mod motion;
pub mod nmpc;
pub mod qp;
pub mod scenario;
pub mod ukf;
pub mod vision;
pub mod world;

/// Compiles the guide's code blocks as doctests so the book cannot drift
/// from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/frames.md")]
    mod frames {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/tracking.md")]
    mod tracking {}
    #[doc = include_str!("../../../book/src/barriers.md")]
    mod barriers {}
    #[doc = include_str!("../../../book/src/filter.md")]
    mod filter {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/logs.md")]
    mod logs {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
