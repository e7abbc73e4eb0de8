//! Encoder–decoder FCN with one padded 3×3 convolution per level, skip
//! concatenation, dropout on the deepest upsampling outputs and a single
//! linear 3×3 output filter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvTranspose2x2, Dropout, Layer, MaxPool2, Relu};
use crate::nn::tensor::{concat_channels, split_channels};
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UConvertNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    /// Number of decoder levels, counted from the deepest, that apply
    /// dropout to their upsampled features.
    pub dropout_decoder_levels: usize,
}

impl Default for UConvertNetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 32,
            kernel_size: 3,
            dropout_rate: 0.5,
            dropout_decoder_levels: 2,
        }
    }
}

impl UConvertNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidParam("levels must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::InvalidParam("base_channels must be >= 1".into()));
        }
        if self.kernel_size != 3 {
            return Err(Error::InvalidParam("kernel_size is fixed at 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParam("dropout_rate must lie in [0, 1)".into()));
        }
        if self.dropout_decoder_levels > self.levels {
            return Err(Error::InvalidParam(
                "dropout_decoder_levels cannot exceed levels".into(),
            ));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    /// Channel width at encoder level `i` (`i == levels` is the bottleneck).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone)]
pub struct UConvertNet<T> {
    config: UConvertNetConfig,
    enc: Vec<Conv2d<T>>,
    enc_act: Vec<Relu<T>>,
    pools: Vec<MaxPool2<T>>,
    bottleneck: Conv2d<T>,
    bottleneck_act: Relu<T>,
    ups: Vec<ConvTranspose2x2<T>>,
    drops: Vec<Option<Dropout<T>>>,
    dec: Vec<Conv2d<T>>,
    dec_act: Vec<Relu<T>>,
    head: Conv2d<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> UConvertNet<T> {
    pub fn new(config: UConvertNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let levels = config.levels;
        let k = config.kernel_size;
        let mut enc = Vec::with_capacity(levels);
        let mut in_ch = 1;
        for i in 0..levels {
            enc.push(Conv2d::same(in_ch, config.width(i), k, rng));
            in_ch = config.width(i);
        }
        let bottleneck = Conv2d::same(in_ch, config.width(levels), k, rng);
        let mut ups = Vec::with_capacity(levels);
        let mut dec = Vec::with_capacity(levels);
        let mut drops = Vec::with_capacity(levels);
        for i in 0..levels {
            ups.push(ConvTranspose2x2::new(config.width(i + 1), config.width(i), rng));
            dec.push(Conv2d::same(2 * config.width(i), config.width(i), k, rng));
            let with_dropout = i + config.dropout_decoder_levels >= levels;
            drops.push(with_dropout.then(|| Dropout::new(config.dropout_rate)));
        }
        let head = Conv2d::same(config.base_channels, 1, k, rng);
        Ok(Self {
            enc,
            enc_act: (0..levels).map(|_| Relu::new()).collect(),
            pools: (0..levels).map(|_| MaxPool2::new()).collect(),
            bottleneck,
            bottleneck_act: Relu::new(),
            ups,
            drops,
            dec,
            dec_act: (0..levels).map(|_| Relu::new()).collect(),
            head,
            rng: ChaCha8Rng::seed_from_u64(0),
            config,
        })
    }

    pub fn config(&self) -> &UConvertNetConfig {
        &self.config
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        super::check_single_channel(shape)?;
        let d = self.config.divisor();
        for (name, v) in [("height", shape[2]), ("width", shape[3])] {
            if v == 0 || v % d != 0 {
                return Err(Error::Shape(format!(
                    "{name} {v} is not divisible by {d} (2^{} pooling levels)",
                    self.config.levels
                )));
            }
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut h = x.clone();
        for i in 0..self.config.levels {
            let a = self.enc_act[i].infer(&self.enc[i].infer(&h));
            h = self.pools[i].infer(&a);
            skips.push(a);
        }
        let mut y = self.bottleneck_act.infer(&self.bottleneck.infer(&h));
        for i in (0..self.config.levels).rev() {
            let u = self.ups[i].infer(&y);
            let cat = concat_channels(&u, &skips[i]);
            y = self.dec_act[i].infer(&self.dec[i].infer(&cat));
        }
        self.head.infer(&y)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut h = x.clone();
        for i in 0..levels {
            let a = self.enc[i].forward(&h);
            let a = self.enc_act[i].forward(&a);
            h = self.pools[i].forward(&a);
            skips.push(a);
        }
        let b = self.bottleneck.forward(&h);
        let mut y = self.bottleneck_act.forward(&b);
        for i in (0..levels).rev() {
            let mut u = self.ups[i].forward(&y);
            if let Some(drop) = self.drops[i].as_mut() {
                u = drop.forward(&u, &mut self.rng);
            }
            let cat = concat_channels(&u, &skips[i]);
            let d = self.dec[i].forward(&cat);
            y = self.dec_act[i].forward(&d);
        }
        self.head.forward(&y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let levels = self.config.levels;
        let mut g = self.head.backward(dy);
        let mut skip_grads = Vec::with_capacity(levels);
        for i in 0..levels {
            g = self.dec_act[i].backward(&g);
            g = self.dec[i].backward(&g);
            let (gu, gs) = split_channels(&g, self.config.width(i));
            skip_grads.push(gs);
            let gu = match self.drops[i].as_mut() {
                Some(drop) => drop.backward(&gu),
                None => gu,
            };
            g = self.ups[i].backward(&gu);
        }
        g = self.bottleneck_act.backward(&g);
        g = self.bottleneck.backward(&g);
        for i in (0..levels).rev() {
            let mut ga = self.pools[i].backward(&g);
            ga.add_assign(&skip_grads[i]);
            let ga = self.enc_act[i].backward(&ga);
            g = self.enc[i].backward(&ga);
        }
        g
    }

    pub fn named_layers(&self) -> Vec<(String, &dyn Layer<T>)> {
        let mut out: Vec<(String, &dyn Layer<T>)> = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}.conv"), c));
        }
        out.push(("bottleneck.conv".into(), &self.bottleneck));
        for i in (0..self.config.levels).rev() {
            out.push((format!("dec{i}.up"), &self.ups[i]));
            out.push((format!("dec{i}.conv"), &self.dec[i]));
        }
        out.push(("head.conv".into(), &self.head));
        out
    }

    pub fn named_layers_mut(&mut self) -> Vec<(String, &mut dyn Layer<T>)> {
        let mut out: Vec<(String, &mut dyn Layer<T>)> = Vec::new();
        for (i, c) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc{i}.conv"), c));
        }
        out.push(("bottleneck.conv".into(), &mut self.bottleneck));
        let mut ups: Vec<_> = self.ups.iter_mut().map(Some).collect();
        let mut dec: Vec<_> = self.dec.iter_mut().map(Some).collect();
        for i in (0..self.config.levels).rev() {
            out.push((format!("dec{i}.up"), ups[i].take().unwrap()));
            out.push((format!("dec{i}.conv"), dec[i].take().unwrap()));
        }
        out.push(("head.conv".into(), &mut self.head));
        out
    }
}
