//! Network architectures and the [`Model`] wrapper shared by training,
//! conversion and checkpointing.
//!
//! Parameters are addressed by stable dotted names, `<layer>.<param>`:
//!
//! | architecture | layers |
//! |---|---|
//! | `uconvert` | `enc{i}.conv`, `bottleneck.conv`, `dec{i}.up`, `dec{i}.conv`, `head.conv` |
//! | `srgan_generator` | `input.conv`, `input.prelu`, `block{i}.{conv1,bn1,prelu,conv2,bn2}`, `post.conv`, `post.bn`, `output.conv` |
//! | `srgan_discriminator` | `conv{i}`, `bn{i}` (i ≥ 1), `dense1`, `dense2` |
//! | `espcn` | `conv1`, `conv2`, `conv3` |
//!
//! Convolutions and dense layers hold `weight` and `bias`, batch-norm
//! layers `gamma`, `beta`, `running_mean`, `running_var`, PReLU `alpha`.

pub mod espcn;
pub mod srgan;
pub mod uconvert;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamKind, Scalar, Tensor};

pub use espcn::{Espcn, EspcnConfig};
pub use srgan::{SrganConfig, SrganDiscriminator, SrganGenerator};
pub use uconvert::{UConvertNet, UConvertNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Uconvert,
    SrganGenerator,
    SrganDiscriminator,
    Espcn,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::Uconvert => "uconvert",
            Architecture::SrganGenerator => "srgan_generator",
            Architecture::SrganDiscriminator => "srgan_discriminator",
            Architecture::Espcn => "espcn",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// The model families a user can train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Uconvert,
    Srgan,
    Espcn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Uconvert => "uconvert",
            ModelKind::Srgan => "srgan",
            ModelKind::Espcn => "espcn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uconvert" | "u-convert-net" | "uconvertnet" => Ok(ModelKind::Uconvert),
            "srgan" => Ok(ModelKind::Srgan),
            "espcn" => Ok(ModelKind::Espcn),
            "prsr" => Err(Error::InvalidParam("model not supported (out of scope)".into())),
            other => Err(Error::InvalidParam(format!("unknown model '{other}'"))),
        }
    }
}

/// Architecture plus configuration: everything needed to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", content = "config", rename_all = "snake_case")]
pub enum ModelSpec {
    Uconvert(UConvertNetConfig),
    SrganGenerator(SrganConfig),
    SrganDiscriminator(SrganConfig),
    Espcn(EspcnConfig),
}

impl ModelSpec {
    pub fn architecture(&self) -> Architecture {
        match self {
            ModelSpec::Uconvert(_) => Architecture::Uconvert,
            ModelSpec::SrganGenerator(_) => Architecture::SrganGenerator,
            ModelSpec::SrganDiscriminator(_) => Architecture::SrganDiscriminator,
            ModelSpec::Espcn(_) => Architecture::Espcn,
        }
    }

    pub fn build<T: Scalar>(&self, seed: u64) -> Result<Model<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = match self {
            ModelSpec::Uconvert(c) => Model::Uconvert(UConvertNet::new(c.clone(), &mut rng)?),
            ModelSpec::SrganGenerator(c) => Model::SrganGenerator(SrganGenerator::new(c.clone(), &mut rng)?),
            ModelSpec::SrganDiscriminator(c) => {
                Model::SrganDiscriminator(SrganDiscriminator::new(c.clone(), &mut rng)?)
            }
            ModelSpec::Espcn(c) => Model::Espcn(Espcn::new(c.clone(), &mut rng)?),
        };
        model.reseed_dropout(seed);
        Ok(model)
    }
}

pub fn build_uconvertnet<T: Scalar>(config: UConvertNetConfig, seed: u64) -> Result<Model<T>> {
    ModelSpec::Uconvert(config).build(seed)
}

/// Generator and discriminator, initialized from independent streams of `seed`.
pub fn build_srgan<T: Scalar>(config: SrganConfig, seed: u64) -> Result<(Model<T>, Model<T>)> {
    let generator = ModelSpec::SrganGenerator(config.clone()).build(seed)?;
    let discriminator = ModelSpec::SrganDiscriminator(config).build(crate::derive_seed(seed, 0xD15C))?;
    Ok((generator, discriminator))
}

pub fn build_espcn<T: Scalar>(config: EspcnConfig, seed: u64) -> Result<Model<T>> {
    ModelSpec::Espcn(config).build(seed)
}

fn check_single_channel(shape: [usize; 4]) -> Result<()> {
    let [n, c, h, w] = shape;
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if c != 1 {
        return Err(Error::Shape(format!("expected 1 input channel, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("empty spatial extent {h}x{w}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Model<T> {
    Uconvert(UConvertNet<T>),
    SrganGenerator(SrganGenerator<T>),
    SrganDiscriminator(SrganDiscriminator<T>),
    Espcn(Espcn<T>),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            Model::Uconvert($m) => $body,
            Model::SrganGenerator($m) => $body,
            Model::SrganDiscriminator($m) => $body,
            Model::Espcn($m) => $body,
        }
    };
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Uconvert(m) => ModelSpec::Uconvert(m.config().clone()),
            Model::SrganGenerator(m) => ModelSpec::SrganGenerator(m.config().clone()),
            Model::SrganDiscriminator(m) => ModelSpec::SrganDiscriminator(m.config().clone()),
            Model::Espcn(m) => ModelSpec::Espcn(m.config().clone()),
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.spec().architecture()
    }

    /// Whether the model maps slices to slices of the same shape.
    pub fn is_image_to_image(&self) -> bool {
        !matches!(self, Model::SrganDiscriminator(_))
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        dispatch!(self, m => m.check_input(shape))
    }

    /// Run the network on a `[N, 1, H, W]` batch. Training mode enables
    /// dropout, uses batch statistics, and caches activations for
    /// [`Model::backward`].
    pub fn forward(&mut self, batch: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        Ok(if training {
            dispatch!(self, m => m.forward(batch))
        } else {
            dispatch!(self, m => m.infer(batch))
        })
    }

    /// Evaluation-mode forward; deterministic and free of side effects.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        Ok(dispatch!(self, m => m.infer(batch)))
    }

    /// Backpropagate through the most recent training-mode forward,
    /// accumulating parameter gradients; returns the input gradient.
    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Tensor<T> {
        dispatch!(self, m => m.backward(grad_output))
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        if let Model::Uconvert(m) = self {
            m.reseed(crate::derive_seed(seed, 0xD0D0));
        }
    }

    /// All parameters and buffers by stable name.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let layers = dispatch!(self, m => m.named_layers());
        layers
            .into_iter()
            .flat_map(|(prefix, layer)| {
                layer
                    .params()
                    .into_iter()
                    .map(move |(name, p)| (format!("{prefix}.{name}"), p))
            })
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let layers = dispatch!(self, m => m.named_layers_mut());
        layers
            .into_iter()
            .flat_map(|(prefix, layer)| {
                layer
                    .params_mut()
                    .into_iter()
                    .map(move |(name, p)| (format!("{prefix}.{name}"), p))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Total learnable scalars, including biases and batch-norm affine terms.
    pub fn count_parameters(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Learnable)
            .map(|(_, p)| p.len())
            .sum()
    }
}

pub fn count_parameters<T: Scalar>(model: &Model<T>) -> usize {
    model.count_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn small_uconvert() -> UConvertNetConfig {
        UConvertNetConfig {
            levels: 2,
            base_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn uconvert_preserves_shape() {
        let mut m = build_uconvertnet::<f32>(UConvertNetConfig::default(), 1).unwrap();
        let y = m.forward(&random_batch([1, 1, 64, 64], 2), false).unwrap();
        assert_eq!(y.shape(), [1, 1, 64, 64]);
    }

    #[test]
    fn uconvert_rejects_indivisible_input() {
        let m = build_uconvertnet::<f32>(UConvertNetConfig::default(), 1).unwrap();
        // 48 = 3·16 is a valid extent for four pooling levels
        assert!(m.infer(&random_batch([1, 1, 48, 48], 2)).is_ok());
        let msg = match m.infer(&random_batch([1, 1, 40, 48], 2)) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("40x48 input accepted"),
        };
        assert!(msg.contains("height 40") && msg.contains("16"), "{msg}");
        let err = m.infer(&random_batch([1, 1, 64, 40], 2)).err().expect("width 40 rejected");
        assert!(err.to_string().contains("width 40"));
    }

    #[test]
    fn srgan_shapes() {
        let cfg = SrganConfig {
            residual_blocks: 2,
            gen_channels: 8,
            disc_base_channels: 4,
            disc_dense_width: 16,
            ..Default::default()
        };
        let (g, d) = build_srgan::<f32>(cfg, 3).unwrap();
        let x = random_batch([2, 1, 64, 64], 4);
        assert_eq!(g.infer(&x).unwrap().shape(), [2, 1, 64, 64]);
        let p = d.infer(&x).unwrap();
        assert_eq!(p.shape(), [2, 1, 1, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // arbitrary slice sizes are accepted by the discriminator
        let p = d.infer(&random_batch([1, 1, 13, 7], 5)).unwrap();
        assert!(p.data()[0] > 0.0 && p.data()[0] < 1.0);
    }

    #[test]
    fn default_srgan_generator_preserves_shape() {
        let (g, _) = build_srgan::<f32>(SrganConfig::default(), 3).unwrap();
        assert_eq!(g.infer(&random_batch([1, 1, 64, 64], 4)).unwrap().shape(), [1, 1, 64, 64]);
    }

    #[test]
    fn espcn_shapes() {
        let m1 = build_espcn::<f32>(EspcnConfig { shuffle_factor: 1, ..Default::default() }, 0).unwrap();
        assert_eq!(m1.infer(&random_batch([1, 1, 32, 32], 1)).unwrap().shape(), [1, 1, 32, 32]);
        let m2 = build_espcn::<f32>(EspcnConfig::default(), 0).unwrap();
        assert_eq!(m2.infer(&random_batch([1, 1, 64, 64], 1)).unwrap().shape(), [1, 1, 64, 64]);
        assert!(m2.infer(&random_batch([1, 1, 63, 64], 1)).is_err());
    }

    #[test]
    fn eval_mode_is_repeatable_and_batch_preserving() {
        let mut m = build_uconvertnet::<f32>(small_uconvert(), 9).unwrap();
        let x = random_batch([3, 1, 16, 16], 1);
        let a = m.forward(&x, false).unwrap();
        let b = m.forward(&x, false).unwrap();
        assert_eq!(a.shape(), [3, 1, 16, 16]);
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }

    #[test]
    fn training_mode_dropout_is_stochastic() {
        let mut m = build_uconvertnet::<f32>(small_uconvert(), 9).unwrap();
        let x = random_batch([1, 1, 16, 16], 1);
        let a = m.forward(&x, true).unwrap();
        let b = m.forward(&x, true).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = build_uconvertnet::<f32>(small_uconvert(), 9).unwrap();
        for p in m.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let y = m.infer(&random_batch([2, 1, 16, 16], 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = build_uconvertnet::<f32>(small_uconvert(), 5).unwrap();
        let b = build_uconvertnet::<f32>(small_uconvert(), 5).unwrap();
        let c = build_uconvertnet::<f32>(small_uconvert(), 6).unwrap();
        let x = random_batch([1, 1, 16, 16], 1);
        assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
        assert_ne!(a.infer(&x).unwrap(), c.infer(&x).unwrap());
    }

    #[test]
    fn parameter_names_are_unique() {
        let (g, d) = build_srgan::<f32>(SrganConfig { residual_blocks: 2, ..Default::default() }, 0).unwrap();
        for m in [g, d, build_uconvertnet(small_uconvert(), 0).unwrap(), build_espcn(EspcnConfig::default(), 0).unwrap()] {
            let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
            let mut dedup = names.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), names.len());
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(build_uconvertnet::<f32>(UConvertNetConfig { levels: 0, ..Default::default() }, 0).is_err());
        assert!(build_uconvertnet::<f32>(UConvertNetConfig { dropout_rate: 1.0, ..Default::default() }, 0).is_err());
        assert!(build_uconvertnet::<f32>(UConvertNetConfig { kernel_size: 5, ..Default::default() }, 0).is_err());
        assert!(build_srgan::<f32>(SrganConfig { residual_blocks: 0, ..Default::default() }, 0).is_err());
        assert!(build_espcn::<f32>(EspcnConfig { shuffle_factor: 0, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn model_kind_parsing() {
        assert_eq!("uconvert".parse::<ModelKind>().unwrap(), ModelKind::Uconvert);
        let err = "prsr".parse::<ModelKind>().unwrap_err();
        assert!(err.to_string().contains("model not supported (out of scope)"));
    }
}
