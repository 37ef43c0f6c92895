//! Ring-allreduce collectives over TCP with tensor fusion, a Chrome-trace
//! timeline, an `mpirun`-style launcher and a data-parallel SGD harness.
//!
//! A typical worker:
//!
//! ```no_run
//! use ringweave::{ReduceOp, Runtime, Tensor};
//!
//! let rt = Runtime::init()?;
//! let grad = Tensor::new("grad/w", vec![0.5f64; 8])?;
//! let averaged = rt.allreduce(grad, ReduceOp::Average)?;
//! rt.shutdown()?;
//! # Ok::<(), ringweave::Error>(())
//! ```

#[cfg(target_endian = "big")]
compile_error!("ringweave puts element bytes on the wire as-is and requires a little-endian target");

pub mod bench;
pub mod collectives;
pub mod error;
pub mod fusion;
pub mod launcher;
pub mod runtime;
pub mod tensor;
pub mod timeline;
pub mod train;
pub mod transport;

pub use collectives::{make_partition, ring_allreduce, ring_broadcast, ChunkPartition, ReduceOp};
pub use error::{Error, Result};
pub use fusion::{CompletionToken, FusionPlan, Runtime};
pub use runtime::{Config, RingContext};
pub use tensor::{DType, Element, Tensor, TensorData};
