//! Network operators with forward and backward rules.

mod conv;
mod dropblock;
mod norm;
mod pool;

use serde::{Deserialize, Serialize};

pub use conv::{conv2d, conv2d_with, upsample_conv, ConvAlgorithm, ConvSpec};
pub use dropblock::{dropblock, dropblock_mask, DropBlockSpec};
pub use norm::{batchnorm2d, BatchNormState, BN_EPSILON, BN_MOMENTUM};
pub use pool::{channel_pool, maxpool2d, nearest_source, upsample_nearest};

/// Whether stochastic and batch-statistic layers run in training or inference form.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}
