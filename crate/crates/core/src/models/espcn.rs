//! Equal-size ESPCN: the input is folded into `r²` low-resolution channels
//! with space-to-depth, passed through three convolutions, and unfolded
//! by the sub-pixel (depth-to-space) layer.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{depth_to_space, space_to_depth, Conv2d, Layer, Relu};
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EspcnConfig {
    pub shuffle_factor: usize,
    pub feature_channels: [usize; 2],
}

impl Default for EspcnConfig {
    fn default() -> Self {
        Self {
            shuffle_factor: 2,
            feature_channels: [64, 32],
        }
    }
}

impl EspcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shuffle_factor < 1 {
            return Err(Error::InvalidParam("shuffle_factor must be >= 1".into()));
        }
        if self.feature_channels.contains(&0) {
            return Err(Error::InvalidParam("feature_channels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Espcn<T> {
    config: EspcnConfig,
    conv1: Conv2d<T>,
    act1: Relu<T>,
    conv2: Conv2d<T>,
    act2: Relu<T>,
    conv3: Conv2d<T>,
}

impl<T: Scalar> Espcn<T> {
    pub fn new(config: EspcnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let rr = config.shuffle_factor * config.shuffle_factor;
        let [f0, f1] = config.feature_channels;
        Ok(Self {
            conv1: Conv2d::same(rr, f0, 5, rng),
            act1: Relu::new(),
            conv2: Conv2d::same(f0, f1, 3, rng),
            act2: Relu::new(),
            conv3: Conv2d::same(f1, rr, 3, rng),
            config,
        })
    }

    pub fn config(&self) -> &EspcnConfig {
        &self.config
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        super::check_single_channel(shape)?;
        let r = self.config.shuffle_factor;
        for (name, v) in [("height", shape[2]), ("width", shape[3])] {
            if v == 0 || v % r != 0 {
                return Err(Error::Shape(format!(
                    "{name} {v} is not divisible by shuffle factor {r}"
                )));
            }
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let r = self.config.shuffle_factor;
        let h = space_to_depth(x, r);
        let h = self.act1.infer(&self.conv1.infer(&h));
        let h = self.act2.infer(&self.conv2.infer(&h));
        depth_to_space(&self.conv3.infer(&h), r)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let r = self.config.shuffle_factor;
        let h = space_to_depth(x, r);
        let h = self.conv1.forward(&h);
        let h = self.act1.forward(&h);
        let h = self.conv2.forward(&h);
        let h = self.act2.forward(&h);
        depth_to_space(&self.conv3.forward(&h), r)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let r = self.config.shuffle_factor;
        let g = space_to_depth(dy, r);
        let g = self.conv3.backward(&g);
        let g = self.act2.backward(&g);
        let g = self.conv2.backward(&g);
        let g = self.act1.backward(&g);
        let g = self.conv1.backward(&g);
        depth_to_space(&g, r)
    }

    pub fn named_layers(&self) -> Vec<(String, &dyn Layer<T>)> {
        vec![
            ("conv1".into(), &self.conv1),
            ("conv2".into(), &self.conv2),
            ("conv3".into(), &self.conv3),
        ]
    }

    pub fn named_layers_mut(&mut self) -> Vec<(String, &mut dyn Layer<T>)> {
        vec![
            ("conv1".into(), &mut self.conv1),
            ("conv2".into(), &mut self.conv2),
            ("conv3".into(), &mut self.conv3),
        ]
    }
}
