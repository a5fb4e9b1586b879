//! Sets of locally independent predictors trained under on-manifold gradient
//! constraints, used to expose underspecification and recover features that
//! plain risk minimization ignores.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod manifold;
pub mod math;
pub mod pipeline;
pub mod specialize;
pub mod training;

pub use error::{Error, LossTerm, Result};
