//! Active-learning-guided online domain adaptation for streaming
//! segmentation.

pub mod acquisition;
pub mod adaptation;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod pruning;
pub mod segcore;
