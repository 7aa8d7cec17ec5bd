pub mod class;
pub mod conduction;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod gbt;
pub mod interpretation;
pub mod pipeline;
pub mod preprocess;
pub mod render;
pub mod rnn;
pub mod signal_io;
pub mod spectral;
pub mod stats;
pub mod synth;

pub use class::{Class, ClassProbabilities, NUM_CLASSES};
pub use error::{Error, Result};
pub use signal_io::{Record, CANONICAL_FS};
