pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod growth;
pub mod harness;
pub mod packing;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{contract, DType, SuperDiagonal, Tensor};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use growth::{compose_cores, full_apply, mango_apply, GrowthOperator, LigoOperator, MangoCores};
pub use harness::{flops_saving_ratio, Experiment, FlopsLedger, Task, TaskSpec, TrainBudget};
pub use packing::{pack, unpack, PackedShape, PackedWeights};
pub use training::{grow, GrowOptions, GrowthMethod, WarmupConfig};
pub use transformer::{ModelConfig, ModelWeights, TokenBatch};
