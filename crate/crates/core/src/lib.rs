pub mod datasets;
pub mod error;
pub mod io;
pub mod label_gen;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub use datasets::{Sample, SynthConfig};
pub use io::RgbImage;
pub use label_gen::{
    direction_map_conv, direction_map_reference, structure_target, BinaryMask, DirectionMap, DirectionParams,
    StructureTarget,
};
pub use losses::{hybrid_loss, LossReport, LossWeights};
pub use metrics::{Aggregation, ConfusionCounts, Metrics, ProbMap};
pub use network::{count_parameters, load_checkpoint, save_checkpoint, Architecture, Model, NetworkConfig};
pub use nn::Mode;
pub use tensor::{Shape, Tensor};
pub use trainer::{train, TrainConfig};
