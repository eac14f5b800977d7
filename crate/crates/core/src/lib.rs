pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod msfe;
pub mod pgffm;
pub mod spg;
pub mod stcfm;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
