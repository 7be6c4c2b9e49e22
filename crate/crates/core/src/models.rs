//! Named architectures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerSpec, LossKind, NetworkGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelName {
    #[serde(rename = "lenet5-like")]
    Lenet5Like,
    #[serde(rename = "cifar10-quick-like")]
    Cifar10QuickLike,
}

impl ModelName {
    pub const ALL: [ModelName; 2] = [ModelName::Lenet5Like, ModelName::Cifar10QuickLike];

    pub fn name(self) -> &'static str {
        match self {
            ModelName::Lenet5Like => "lenet5-like",
            ModelName::Cifar10QuickLike => "cifar10-quick-like",
        }
    }

    pub fn input_shape(self) -> [usize; 3] {
        match self {
            ModelName::Lenet5Like => [1, 16, 16],
            ModelName::Cifar10QuickLike => [3, 16, 16],
        }
    }

    pub fn layers(self) -> Vec<LayerSpec> {
        match self {
            // 16x16 -> conv5 12x12 -> pool 6x6 -> conv3 4x4 -> pool 2x2.
            ModelName::Lenet5Like => vec![
                LayerSpec::conv(1, 8, 5, 1, 0),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::conv(8, 16, 3, 1, 0),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::flatten(),
                LayerSpec::dense(64, 32),
                LayerSpec::relu(),
                LayerSpec::dense(32, 10),
            ],
            // 16x16 -> 8x8 -> 4x4 -> 2x2, each stage conv5 (pad 2), relu, pool.
            ModelName::Cifar10QuickLike => vec![
                LayerSpec::conv(3, 16, 5, 1, 2),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::conv(16, 16, 5, 1, 2),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::conv(16, 32, 5, 1, 2),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::flatten(),
                LayerSpec::dense(128, 32),
                LayerSpec::relu(),
                LayerSpec::dense(32, 10),
            ],
        }
    }

    /// The network with zero parameters; call
    /// [`NetworkGraph::init_params`] before training.
    pub fn build(self) -> Result<NetworkGraph> {
        NetworkGraph::new(self.input_shape(), &self.layers(), LossKind::SoftmaxCrossEntropy)
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelName::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected lenet5-like or cifar10-quick-like)")))
    }
}
