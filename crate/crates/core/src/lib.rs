pub mod error;
pub mod experiments;
pub mod kernels;
pub mod particles;
pub mod sampling;
pub mod snapshot;
pub mod transport;
pub mod vlasov;

pub use error::{Error, Result};
pub use kernels::{Cutoff, ForceLaw, KernelSpec};
pub use particles::{ParticleState, TrajectoryWindow};
