//! Desk-scale experiment harness: synthetic layers, error metrics, grid
//! sweeps and the binary tensor container.

pub mod container;
pub mod metrics;
pub mod sweep;
pub mod synth;

pub use container::{Container, FloatDtype, Payload, Section};
pub use metrics::{relative_output_error, relative_reconstruction_error};
pub use sweep::{run_sweep, LayerShape, Method, SweepConfig, SweepRecord, SweepReport};
pub use synth::{gen_synthetic_layer, SynthSpec, SyntheticLayer};
