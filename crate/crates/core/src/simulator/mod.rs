//! Synthetic finite populations and repeated sampling from them.

mod monte_carlo;
mod population;
mod spec;

pub use monte_carlo::*;
pub use population::*;
pub use spec::*;
