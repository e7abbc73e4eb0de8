//! Size-preserving SRGAN: a residual generator with every upscaling stage
//! removed, and a strided classification discriminator.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    global_avg_pool, global_avg_pool_backward, BatchNorm2d, Conv2d, Dense, Layer, LeakyRelu, Prelu,
    Sigmoid,
};
use crate::nn::{Scalar, Tensor};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrganConfig {
    pub residual_blocks: usize,
    pub gen_channels: usize,
    pub disc_base_channels: usize,
    /// Width of the discriminator's hidden dense layer.
    #[serde(default = "default_dense_width")]
    pub disc_dense_width: usize,
    pub adversarial_weight: f64,
}

fn default_dense_width() -> usize {
    1024
}

impl Default for SrganConfig {
    fn default() -> Self {
        Self {
            residual_blocks: 8,
            gen_channels: 64,
            disc_base_channels: 64,
            disc_dense_width: default_dense_width(),
            adversarial_weight: 1e-3,
        }
    }
}

impl SrganConfig {
    pub fn validate(&self) -> Result<()> {
        if self.residual_blocks < 1 {
            return Err(Error::InvalidParam("residual_blocks must be >= 1".into()));
        }
        if self.gen_channels < 1 || self.disc_base_channels < 1 || self.disc_dense_width < 1 {
            return Err(Error::InvalidParam("channel widths must be >= 1".into()));
        }
        if !(self.adversarial_weight >= 0.0 && self.adversarial_weight.is_finite()) {
            return Err(Error::InvalidParam("adversarial_weight must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// `(out_channels, stride)` for each discriminator convolution.
    pub fn disc_layout(&self) -> [(usize, usize); 8] {
        let b = self.disc_base_channels;
        [(b, 1), (b, 2), (2 * b, 1), (2 * b, 2), (4 * b, 1), (4 * b, 2), (8 * b, 1), (8 * b, 2)]
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    act: Prelu<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::same(ch, ch, 3, rng),
            bn1: BatchNorm2d::new(ch),
            act: Prelu::new(ch),
            conv2: Conv2d::same(ch, ch, 3, rng),
            bn2: BatchNorm2d::new(ch),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.act.infer(&self.bn1.infer(&self.conv1.infer(x)));
        let mut y = self.bn2.infer(&self.conv2.infer(&h));
        y.add_assign(x);
        y
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv1.forward(x);
        let h = self.bn1.forward(&h);
        let h = self.act.forward(&h);
        let h = self.conv2.forward(&h);
        let mut y = self.bn2.forward(&h);
        y.add_assign(x);
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.bn2.backward(dy);
        let g = self.conv2.backward(&g);
        let g = self.act.backward(&g);
        let g = self.bn1.backward(&g);
        let mut dx = self.conv1.backward(&g);
        dx.add_assign(dy);
        dx
    }
}

#[derive(Debug, Clone)]
pub struct SrganGenerator<T> {
    config: SrganConfig,
    input_conv: Conv2d<T>,
    input_act: Prelu<T>,
    blocks: Vec<ResidualBlock<T>>,
    post_conv: Conv2d<T>,
    post_bn: BatchNorm2d<T>,
    output_conv: Conv2d<T>,
}

impl<T: Scalar> SrganGenerator<T> {
    pub fn new(config: SrganConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let ch = config.gen_channels;
        let input_conv = Conv2d::same(1, ch, 9, rng);
        let blocks = (0..config.residual_blocks).map(|_| ResidualBlock::new(ch, rng)).collect();
        let post_conv = Conv2d::same(ch, ch, 3, rng);
        let output_conv = Conv2d::same(ch, 1, 9, rng);
        Ok(Self {
            input_conv,
            input_act: Prelu::new(ch),
            blocks,
            post_conv,
            post_bn: BatchNorm2d::new(ch),
            output_conv,
            config,
        })
    }

    pub fn config(&self) -> &SrganConfig {
        &self.config
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        super::check_single_channel(shape)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let skip = self.input_act.infer(&self.input_conv.infer(x));
        let mut h = skip.clone();
        for b in &self.blocks {
            h = b.infer(&h);
        }
        let mut z = self.post_bn.infer(&self.post_conv.infer(&h));
        z.add_assign(&skip);
        self.output_conv.infer(&z)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.input_conv.forward(x);
        let skip = self.input_act.forward(&h);
        let mut h = skip.clone();
        for b in &mut self.blocks {
            h = b.forward(&h);
        }
        let z = self.post_conv.forward(&h);
        let mut z = self.post_bn.forward(&z);
        z.add_assign(&skip);
        self.output_conv.forward(&z)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let gz = self.output_conv.backward(dy);
        let g = self.post_bn.backward(&gz);
        let mut g = self.post_conv.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        g.add_assign(&gz);
        let g = self.input_act.backward(&g);
        self.input_conv.backward(&g)
    }

    pub fn named_layers(&self) -> Vec<(String, &dyn Layer<T>)> {
        let mut out: Vec<(String, &dyn Layer<T>)> = vec![
            ("input.conv".into(), &self.input_conv),
            ("input.prelu".into(), &self.input_act),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv1"), &b.conv1));
            out.push((format!("block{i}.bn1"), &b.bn1));
            out.push((format!("block{i}.prelu"), &b.act));
            out.push((format!("block{i}.conv2"), &b.conv2));
            out.push((format!("block{i}.bn2"), &b.bn2));
        }
        out.push(("post.conv".into(), &self.post_conv));
        out.push(("post.bn".into(), &self.post_bn));
        out.push(("output.conv".into(), &self.output_conv));
        out
    }

    pub fn named_layers_mut(&mut self) -> Vec<(String, &mut dyn Layer<T>)> {
        let mut out: Vec<(String, &mut dyn Layer<T>)> = vec![
            ("input.conv".into(), &mut self.input_conv),
            ("input.prelu".into(), &mut self.input_act),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.conv1"), &mut b.conv1));
            out.push((format!("block{i}.bn1"), &mut b.bn1));
            out.push((format!("block{i}.prelu"), &mut b.act));
            out.push((format!("block{i}.conv2"), &mut b.conv2));
            out.push((format!("block{i}.bn2"), &mut b.bn2));
        }
        out.push(("post.conv".into(), &mut self.post_conv));
        out.push(("post.bn".into(), &mut self.post_bn));
        out.push(("output.conv".into(), &mut self.output_conv));
        out
    }
}

/// Eight strided 3×3 convolutions with LeakyReLU, global average pooling,
/// then dense → LeakyReLU → dense → sigmoid. Output shape `[N, 1, 1, 1]`.
#[derive(Debug, Clone)]
pub struct SrganDiscriminator<T> {
    config: SrganConfig,
    convs: Vec<Conv2d<T>>,
    norms: Vec<Option<BatchNorm2d<T>>>,
    acts: Vec<LeakyRelu<T>>,
    pooled_from: Option<[usize; 4]>,
    dense1: Dense<T>,
    dense_act: LeakyRelu<T>,
    dense2: Dense<T>,
    sigmoid: Sigmoid<T>,
}

impl<T: Scalar> SrganDiscriminator<T> {
    pub fn new(config: SrganConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = 1;
        for (i, (out_ch, stride)) in config.disc_layout().into_iter().enumerate() {
            convs.push(Conv2d::new(in_ch, out_ch, 3, stride, 1, rng));
            norms.push((i > 0).then(|| BatchNorm2d::new(out_ch)));
            in_ch = out_ch;
        }
        let dense1 = Dense::new(in_ch, config.disc_dense_width, rng);
        let dense2 = Dense::new(config.disc_dense_width, 1, rng);
        Ok(Self {
            acts: (0..convs.len()).map(|_| LeakyRelu::new(LEAKY_SLOPE)).collect(),
            convs,
            norms,
            pooled_from: None,
            dense1,
            dense_act: LeakyRelu::new(LEAKY_SLOPE),
            dense2,
            sigmoid: Sigmoid::new(),
            config,
        })
    }

    pub fn config(&self) -> &SrganConfig {
        &self.config
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        super::check_single_channel(shape)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for i in 0..self.convs.len() {
            h = self.convs[i].infer(&h);
            if let Some(bn) = &self.norms[i] {
                h = bn.infer(&h);
            }
            h = self.acts[i].infer(&h);
        }
        let p = global_avg_pool(&h);
        let d = self.dense_act.infer(&self.dense1.infer(&p));
        self.sigmoid.infer(&self.dense2.infer(&d))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for i in 0..self.convs.len() {
            h = self.convs[i].forward(&h);
            if let Some(bn) = self.norms[i].as_mut() {
                h = bn.forward(&h);
            }
            h = self.acts[i].forward(&h);
        }
        self.pooled_from = Some(h.shape());
        let p = global_avg_pool(&h);
        let d = self.dense1.forward(&p);
        let d = self.dense_act.forward(&d);
        let z = self.dense2.forward(&d);
        self.sigmoid.forward(&z)
    }

    /// `dy` is the gradient with respect to the output probability.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.sigmoid.backward(dy);
        let g = self.dense2.backward(&g);
        let g = self.dense_act.backward(&g);
        let g = self.dense1.backward(&g);
        let shape = self.pooled_from.take().expect("discriminator backward without forward");
        let mut g = global_avg_pool_backward(&g, shape);
        for i in (0..self.convs.len()).rev() {
            g = self.acts[i].backward(&g);
            if let Some(bn) = self.norms[i].as_mut() {
                g = bn.backward(&g);
            }
            g = self.convs[i].backward(&g);
        }
        g
    }

    pub fn named_layers(&self) -> Vec<(String, &dyn Layer<T>)> {
        let mut out: Vec<(String, &dyn Layer<T>)> = Vec::new();
        for (i, (c, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.push((format!("conv{i}"), c));
            if let Some(bn) = bn {
                out.push((format!("bn{i}"), bn));
            }
        }
        out.push(("dense1".into(), &self.dense1));
        out.push(("dense2".into(), &self.dense2));
        out
    }

    pub fn named_layers_mut(&mut self) -> Vec<(String, &mut dyn Layer<T>)> {
        let mut out: Vec<(String, &mut dyn Layer<T>)> = Vec::new();
        for (i, (c, bn)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            out.push((format!("conv{i}"), c));
            if let Some(bn) = bn {
                out.push((format!("bn{i}"), bn));
            }
        }
        out.push(("dense1".into(), &mut self.dense1));
        out.push(("dense2".into(), &mut self.dense2));
        out
    }
}
