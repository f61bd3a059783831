//! Networks, objectives and the adaptation trainer for weakly supervised
//! domain-adaptive segmentation.

pub mod config;
pub mod conv;
pub mod error;
pub mod inference;
pub mod losses;
pub mod networks;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod trainer;

pub use config::{AblationFlags, AblationModel, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use networks::{BlockKind, Discriminator, G1Output, NetworkConfig, G1, G2};
pub use trainer::{LossRecord, TrainState, Trainer};
