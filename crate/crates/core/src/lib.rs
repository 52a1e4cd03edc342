//! Birth-death processes in interactive random environments.

pub mod convergence;
pub mod diffusive;
pub mod joint;
pub mod jump;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod stats;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/product-form.md")]
    mod product_form {}
    #[doc = include_str!("../../../book/src/jump-environments.md")]
    mod jump_environments {}
    #[doc = include_str!("../../../book/src/diffusive-environments.md")]
    mod diffusive_environments {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/convergence.md")]
    mod convergence {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
