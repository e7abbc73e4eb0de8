//! Training loops and slice-wise volume conversion.
//!
//! Every epoch visits all slices of all training volumes along one view, in
//! an order shuffled by a generator seeded from the run seed. Runs are
//! bit-reproducible on a single execution stream.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelKind};
use crate::nn::{bce_loss, mse_loss, Adam, Tensor};
use crate::phantoms::SubjectPair;
use crate::volumes::{extract_slices, stack_slices, Axis, Slice2D, Volume};

const SHUFFLE_STREAM: u64 = 0x5EED_5101;
/// Slices per inference batch in [`convert_volume`].
const INFER_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub view: Axis,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adversarial_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Uconvert,
            view: Axis::Sagittal,
            learning_rate: 0.001,
            batch_size: 4,
            epochs: 40,
            seed: 0,
            adversarial_weight: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParam("epochs must be >= 1".into()));
        }
        if !(self.adversarial_weight >= 0.0 && self.adversarial_weight.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "adversarial_weight {} must be >= 0",
                self.adversarial_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub name: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&Adam> for OptimizerInfo {
    fn from(a: &Adam) -> Self {
        Self {
            name: "adam".into(),
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-slice training loss (generator objective for GAN runs).
    pub loss: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub optimizer: OptimizerInfo,
    pub n_slices: usize,
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// All source/target slice pairs of `pairs` along `view`, flattened.
struct SliceSet {
    source: Vec<f32>,
    target: Vec<f32>,
    hw: [usize; 2],
    len: usize,
}

impl SliceSet {
    fn build(pairs: &[SubjectPair], view: Axis, model: &Model<f32>) -> Result<Self> {
        let first = pairs.first().ok_or(Error::EmptyDataset)?;
        let shape = first.source.shape();
        let (a, b) = view.in_plane();
        let hw = [shape[a], shape[b]];
        check_view_input(model, view, hw)?;
        let mut set = Self {
            source: Vec::new(),
            target: Vec::new(),
            hw,
            len: 0,
        };
        for p in pairs {
            if p.source.shape() != shape || p.target.shape() != shape {
                return Err(Error::Shape(format!(
                    "subject {} has shape {:?}, expected {shape:?}",
                    p.subject_id,
                    p.source.shape()
                )));
            }
            for s in extract_slices(&p.source, view) {
                set.source.extend(s.data.iter());
            }
            for s in extract_slices(&p.target, view) {
                set.target.extend(s.data.iter());
            }
            set.len += shape[view.index()];
        }
        if set.len == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(set)
    }

    fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let plane = self.hw[0] * self.hw[1];
        let gather = |data: &[f32]| {
            let mut v = Vec::with_capacity(indices.len() * plane);
            for &i in indices {
                v.extend_from_slice(&data[i * plane..(i + 1) * plane]);
            }
            Tensor::from_vec([indices.len(), 1, self.hw[0], self.hw[1]], v).expect("batch shape")
        };
        (gather(&self.source), gather(&self.target))
    }
}

fn check_view_input(model: &Model<f32>, view: Axis, hw: [usize; 2]) -> Result<()> {
    model
        .check_input([1, 1, hw[0], hw[1]])
        .map_err(|e| Error::Shape(format!("{view} view: {e}")))
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, batch })
    }
}

/// Seeded per-epoch slice orders, shared by both training loops so that a
/// GAN run with zero adversarial weight replays an MSE run exactly.
struct EpochOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl EpochOrder {
    fn new(seed: u64, len: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, SHUFFLE_STREAM)),
            order: (0..len).collect(),
        }
    }

    fn next(&mut self) -> &[usize] {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        &self.order
    }
}

/// Minimize pixel MSE with Adam. Updates `model` in place.
pub fn train_mse(model: &mut Model<f32>, pairs: &[SubjectPair], config: &TrainConfig) -> Result<TrainHistory> {
    train_mse_with(model, pairs, config, |_| {})
}

/// [`train_mse`] with a callback after every epoch.
pub fn train_mse_with(
    model: &mut Model<f32>,
    pairs: &[SubjectPair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    config.validate()?;
    let data = SliceSet::build(pairs, config.view, model)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut order = EpochOrder::new(config.seed, data.len);
    model.reseed_dropout(config.seed);
    let mut history = TrainHistory {
        config: config.clone(),
        optimizer: OptimizerInfo::from(&adam),
        n_slices: data.len,
        records: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        for (b, chunk) in order.next().chunks(config.batch_size).enumerate() {
            let (x, t) = data.batch(chunk);
            model.zero_grad();
            let y = model.forward(&x, true)?;
            let (loss, grad) = mse_loss(&y, &t);
            check_finite(loss, epoch, b)?;
            model.backward(&grad);
            adam.step(model.params_mut());
            total += loss * chunk.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            loss: total / data.len as f64,
            seconds: start.elapsed().as_secs_f64(),
            d_loss: None,
            adv_loss: None,
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok(history)
}

/// Alternating discriminator/generator updates, one of each per batch.
/// The generator minimizes `mse + w·(−log D(G(x)))`.
pub fn train_gan(
    generator: &mut Model<f32>,
    discriminator: &mut Model<f32>,
    pairs: &[SubjectPair],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    train_gan_with(generator, discriminator, pairs, config, |_| {})
}

pub fn train_gan_with(
    generator: &mut Model<f32>,
    discriminator: &mut Model<f32>,
    pairs: &[SubjectPair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    config.validate()?;
    if discriminator.is_image_to_image() || !generator.is_image_to_image() {
        return Err(Error::InvalidParam(
            "train_gan needs an image-to-image generator and a discriminator".into(),
        ));
    }
    let data = SliceSet::build(pairs, config.view, generator)?;
    let mut adam_g = Adam::new(config.learning_rate);
    let mut adam_d = Adam::new(config.learning_rate);
    let mut order = EpochOrder::new(config.seed, data.len);
    generator.reseed_dropout(config.seed);
    let w = config.adversarial_weight;
    let mut history = TrainHistory {
        config: config.clone(),
        optimizer: OptimizerInfo::from(&adam_g),
        n_slices: data.len,
        records: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let (mut g_total, mut d_total, mut a_total) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.next().chunks(config.batch_size).enumerate() {
            let (x, t) = data.batch(chunk);
            generator.zero_grad();
            let fake = generator.forward(&x, true)?;

            discriminator.zero_grad();
            let p_real = discriminator.forward(&t, true)?;
            let (l_real, g_real) = bce_loss(&p_real, 1.0);
            discriminator.backward(&g_real);
            let p_fake = discriminator.forward(&fake, true)?;
            let (l_fake, g_fake) = bce_loss(&p_fake, 0.0);
            discriminator.backward(&g_fake);
            let d_loss = l_real + l_fake;
            check_finite(d_loss, epoch, b)?;
            adam_d.step(discriminator.params_mut());

            let (content, mut grad) = mse_loss(&fake, &t);
            discriminator.zero_grad();
            let p = discriminator.forward(&fake, true)?;
            let (adv, g_adv) = bce_loss(&p, 1.0);
            if w != 0.0 {
                let d_fake = discriminator.backward(&g_adv.map(|v| v * w as f32));
                grad.add_assign(&d_fake);
            }
            let g_loss = content + w * adv;
            check_finite(g_loss, epoch, b)?;
            generator.backward(&grad);
            adam_g.step(generator.params_mut());

            let k = chunk.len() as f64;
            g_total += g_loss * k;
            d_total += d_loss * k;
            a_total += adv * k;
        }
        let n = data.len as f64;
        let record = EpochRecord {
            epoch,
            loss: g_total / n,
            seconds: start.elapsed().as_secs_f64(),
            d_loss: Some(d_total / n),
            adv_loss: Some(a_total / n),
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok(history)
}

/// Convert a volume slice by slice along `view` in evaluation mode, clamp
/// to `[0, 1]` and restack with the source spacing.
pub fn convert_volume(model: &Model<f32>, source: &Volume, view: Axis) -> Result<Volume> {
    if !model.is_image_to_image() {
        return Err(Error::InvalidParam(format!(
            "{} does not map slices to slices",
            model.architecture()
        )));
    }
    let slices = extract_slices(source, view);
    let (h, w) = slices[0].shape();
    check_view_input(model, view, [h, w])?;
    let converted = slices
        .par_chunks(INFER_BATCH)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * h * w);
            for s in chunk {
                data.extend(s.data.iter());
            }
            let x = Tensor::from_vec([chunk.len(), 1, h, w], data)?;
            let y = model.infer(&x)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let plane = y.sample(i).iter().map(|v| v.clamp(0.0, 1.0)).collect();
                    Slice2D {
                        data: ndarray::Array2::from_shape_vec((h, w), plane).expect("slice shape"),
                        source_axis: view,
                        index: s.index,
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let slices: Vec<Slice2D> = converted.into_iter().flatten().collect();
    let mut out = stack_slices(&slices, view, source.spacing())?;
    out.set_intensity_range([0.0, 1.0]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_espcn, build_srgan, build_uconvertnet, EspcnConfig, SrganConfig, UConvertNetConfig};
    use crate::phantoms::{generate_pair, DegradeParams, PhantomParams};
    use crate::nn::ParamKind;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_uconvert() -> UConvertNetConfig {
        UConvertNetConfig {
            levels: 2,
            base_channels: 4,
            ..Default::default()
        }
    }

    fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| rng.random::<f32>());
        Volume::new(data, [1.0; 3], [0.0, 1.0]).unwrap()
    }

    fn identity_pairs(n: u32, shape: [usize; 3]) -> Vec<SubjectPair> {
        (0..n)
            .map(|i| {
                let v = random_volume(shape, u64::from(i));
                SubjectPair::new(i, v.clone(), v).unwrap()
            })
            .collect()
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            seed: 11,
            ..Default::default()
        }
    }

    fn params_of(m: &Model<f32>) -> Vec<f32> {
        m.named_params().iter().flat_map(|(_, p)| p.value.clone()).collect()
    }

    #[test]
    fn identity_task_loss_decreases() {
        let pairs = identity_pairs(2, [4, 8, 8]);
        let mut model = build_espcn::<f32>(EspcnConfig { shuffle_factor: 1, feature_channels: [8, 8] }, 1).unwrap();
        let h = train_mse(&mut model, &pairs, &config(5)).unwrap();
        assert_eq!(h.records.len(), 5);
        assert!(h.records[4].loss < h.records[0].loss, "{:?}", h.losses());
    }

    #[test]
    fn constant_target_beats_best_constant_baseline_of_source() {
        let pairs: Vec<SubjectPair> = (0..2)
            .map(|i| {
                let src = random_volume([16, 16, 16], i);
                let tgt = Volume::filled([16, 16, 16], 0.5).unwrap();
                SubjectPair::new(i as u32, src, tgt).unwrap()
            })
            .collect();
        // Loss of the identity map against the constant target.
        let baseline: f64 = pairs
            .iter()
            .flat_map(|p| p.source.as_slice().iter())
            .map(|&v| (f64::from(v) - 0.5).powi(2))
            .sum::<f64>()
            / (2 * 16 * 16 * 16) as f64;
        let mut model = build_uconvertnet::<f32>(tiny_uconvert(), 2).unwrap();
        let cfg = TrainConfig { batch_size: 1, ..config(10) };
        let h = train_mse(&mut model, &pairs, &cfg).unwrap();
        let last = h.records.last().unwrap().loss;
        assert!(last < baseline, "final {last} vs baseline {baseline}");
    }

    #[test]
    fn history_echoes_defaults() {
        let pairs = identity_pairs(1, [2, 16, 16]);
        let mut model = build_uconvertnet::<f32>(tiny_uconvert(), 0).unwrap();
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let h = train_mse(&mut model, &pairs, &cfg).unwrap();
        assert_eq!(h.config.learning_rate, 0.001);
        assert_eq!(h.config.batch_size, 4);
        assert_eq!(TrainConfig::default().epochs, 40);
        assert_eq!(h.optimizer.name, "adam");
        assert_eq!(h.n_slices, 2);
        let lines = h.to_jsonl().unwrap();
        assert_eq!(lines.lines().count(), 1);
        let rec: EpochRecord = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(rec, h.records[0]);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let pairs = identity_pairs(2, [3, 16, 16]);
        let run = || {
            let mut m = build_uconvertnet::<f32>(tiny_uconvert(), 4).unwrap();
            let h = train_mse(&mut m, &pairs, &config(2)).unwrap();
            (h.losses(), params_of(&m))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_and_invalid_inputs() {
        let mut model = build_uconvertnet::<f32>(tiny_uconvert(), 0).unwrap();
        assert!(matches!(train_mse(&mut model, &[], &config(1)), Err(Error::EmptyDataset)));
        let bad = TrainConfig { batch_size: 0, ..config(1) };
        assert!(train_mse(&mut model, &identity_pairs(1, [2, 8, 8]), &bad).is_err());
        let err = train_mse(&mut model, &identity_pairs(1, [2, 8, 6]), &config(1)).unwrap_err();
        assert!(err.to_string().contains("sagittal view"), "{err}");
    }

    #[test]
    fn gan_with_zero_weight_replays_mse_training() {
        let pairs = identity_pairs(2, [3, 8, 8]);
        let srgan = SrganConfig {
            residual_blocks: 1,
            gen_channels: 4,
            disc_base_channels: 2,
            disc_dense_width: 8,
            adversarial_weight: 0.0,
        };
        let cfg = TrainConfig { adversarial_weight: 0.0, model: ModelKind::Srgan, ..config(2) };
        let (mut g1, mut d) = build_srgan::<f32>(srgan.clone(), 5).unwrap();
        let (mut g2, _) = build_srgan::<f32>(srgan, 5).unwrap();
        let hg = train_gan(&mut g1, &mut d, &pairs, &cfg).unwrap();
        let hm = train_mse(&mut g2, &pairs, &cfg).unwrap();
        assert_eq!(params_of(&g1), params_of(&g2));
        assert_eq!(hg.losses(), hm.losses());
        assert!(hg.records.iter().all(|r| r.d_loss.unwrap().is_finite() && r.adv_loss.unwrap().is_finite()));
    }

    #[test]
    fn gan_updates_discriminator() {
        let pairs = identity_pairs(1, [2, 8, 8]);
        let srgan = SrganConfig {
            residual_blocks: 1,
            gen_channels: 2,
            disc_base_channels: 2,
            disc_dense_width: 4,
            adversarial_weight: 1e-3,
        };
        let (mut g, mut d) = build_srgan::<f32>(srgan, 1).unwrap();
        let before = params_of(&d);
        train_gan(&mut g, &mut d, &pairs, &config(1)).unwrap();
        assert_ne!(before, params_of(&d));
        assert!(train_gan(&mut d.clone(), &mut g, &pairs, &config(1)).is_err());
    }

    #[test]
    fn zero_weight_model_converts_to_zero() {
        let mut model = build_uconvertnet::<f32>(tiny_uconvert(), 0).unwrap();
        for p in model.params_mut() {
            if p.kind == ParamKind::Learnable {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let src = random_volume([5, 8, 12], 3);
        let out = convert_volume(&model, &src, Axis::Sagittal).unwrap();
        assert_eq!(out.shape(), src.shape());
        assert_eq!(out.spacing(), src.spacing());
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conversion_range_shape_and_view_errors() {
        let model = build_uconvertnet::<f32>(tiny_uconvert(), 0).unwrap();
        let src = random_volume([6, 8, 12], 3);
        let out = convert_volume(&model, &src, Axis::Sagittal).unwrap();
        assert_eq!(out.shape(), src.shape());
        let (lo, hi) = out.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert_eq!(out, convert_volume(&model, &src, Axis::Sagittal).unwrap());
        for (axis, name) in [(Axis::Coronal, "coronal view"), (Axis::Axial, "axial view")] {
            let err = convert_volume(&model, &src, axis).unwrap_err();
            assert!(err.to_string().contains(name) && err.to_string().contains("height 6"), "{err}");
        }
    }

    #[test]
    fn identity_trained_model_reproduces_its_input() {
        let pp = PhantomParams { size: 16, ..Default::default() };
        let pair = generate_pair(0, 1, &pp, &DegradeParams::default()).unwrap();
        let src = pair.source.clone();
        let pairs = vec![SubjectPair::new(0, src.clone(), src.clone()).unwrap()];
        let mut model = build_espcn::<f32>(EspcnConfig { shuffle_factor: 1, feature_channels: [16, 16] }, 2).unwrap();
        let cfg = TrainConfig { epochs: 150, batch_size: 4, learning_rate: 0.003, ..config(1) };
        train_mse(&mut model, &pairs, &cfg).unwrap();
        let out = convert_volume(&model, &src, Axis::Sagittal).unwrap();
        let psnr = crate::metrics::psnr(out.data(), src.data(), 1.0).unwrap();
        assert!(psnr > 40.0, "psnr {psnr}");
    }
}
