//! Small decoder stack for initialisation-time collapse measurements and
//! toy-task gradient histories.

mod config;
mod faithfulness;
mod stack;
mod train;

pub use config::{NormPlacement, StackConfig};
pub use faithfulness::{faithfulness_test, profile_forward, seed_streams, CollapseProfile, LayerMetrics};
pub use stack::{build_stack, positional_encoding, LayerOutputs, Stack, StackForward, StackNodes, EMBEDDING_STD};
pub use train::{train_stack, train_toy, GradHistory, Task, TrainOptions};
