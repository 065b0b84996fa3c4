//! Gradient leakage laboratory.
//!
//! Iterative gradient inversion attacks against networks trained with dropout,
//! including the joint data-and-mask Dropout Inversion Attack, together with the
//! pieces needed to run them end to end: a reverse-mode autodiff engine whose
//! backward pass is itself differentiable, mask-parameterized models, mask
//! algebra, image quality metrics, MNIST ingestion, a FedAvg simulator, and an
//! experiment runner.
//!
//! The runnable programs under `examples/` walk through each capability:
//!
//! ```text
//! cargo run --release -p gradleak --example double_backward
//! cargo run --release -p gradleak --example client_gradient
//! cargo run --release -p gradleak --example analytic_recovery
//! cargo run --release -p gradleak --example invert_mlp
//! cargo run --release -p gradleak --example dropout_inversion
//! cargo run --release -p gradleak --example lenet_dia
//! cargo run --release -p gradleak --example fedavg_utility
//! cargo run --release -p gradleak --example metrics_tour
//! cargo run --release -p gradleak --example render_grid
//! ```

pub mod attacks;
pub mod autodiff;
pub mod data;
mod error;
pub mod experiment;
pub mod fedsim;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod selfcheck;

pub use error::{Error, Result};
