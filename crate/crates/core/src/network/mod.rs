//! Point-cloud encoder, occupancy decoder and training loop.

mod config;
mod fps;
mod layers;
mod model;
mod train;

pub use config::{NetworkConfig, TrainConfig, DEFAULT_OFFSET_SCALE};
pub use fps::farthest_point_sample;
pub use layers::{occupancy_head, IndicatorLayer, TensorformerBlock};
pub use model::{
    Encoded, MeshSettings, Model, Network, Normalization, PredictedField, Reconstruction, NORMALIZED_EXTENT,
};
pub use train::{batch_loss, flip_axis, make_example, train, Example, TrainLog, TrainRecord};

#[cfg(test)]
mod tests;
