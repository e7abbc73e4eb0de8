//! Flat run configurations. Each command resolves defaults, then an
//! optional TOML file, then explicit flags, and writes the result next to
//! its outputs so the run can be repeated with `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uconvert_core::{Axis, DegradeParams, PhantomParams};

/// Merge `overrides` (flags that were given) over the keys of `file`, then
/// fill everything else from the type's defaults.
pub fn resolve<T, O>(file: Option<&Path>, overrides: &O) -> Result<T>
where
    T: DeserializeOwned,
    O: Serialize,
{
    let mut table = match file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    let flags = toml::Table::try_from(overrides).context("encoding flags")?;
    table.extend(flags);
    let resolved = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid configuration: {}", e.message()))?;
    Ok(resolved)
}

pub fn write_resolved<T: Serialize>(config: &T, path: &Path) -> Result<()> {
    let text = toml::to_string(config).context("encoding resolved config")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `dir/name.ckpt` → `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    match value {
        Some(p) => Ok(p),
        None => bail!("missing --{flag}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub subjects: usize,
    pub size: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub wm_intensity: f64,
    pub gm_intensity: f64,
    pub csf_intensity: f64,
    pub bias_amplitude: f64,
    pub deform_amplitude: f64,
    pub blur_sigma: f64,
    pub contrast_alpha: f64,
    pub noise_sigma: f64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let p = PhantomParams::default();
        let d = DegradeParams::default();
        Self {
            subjects: 20,
            size: p.size,
            seed: 0,
            out: None,
            wm_intensity: p.wm_intensity,
            gm_intensity: p.gm_intensity,
            csf_intensity: p.csf_intensity,
            bias_amplitude: p.bias_amplitude,
            deform_amplitude: p.deform_amplitude,
            blur_sigma: d.blur_sigma,
            contrast_alpha: d.contrast_alpha,
            noise_sigma: d.noise_sigma,
        }
    }
}

impl GenDataConfig {
    pub fn phantom_params(&self) -> PhantomParams {
        PhantomParams {
            size: self.size,
            wm_intensity: self.wm_intensity,
            gm_intensity: self.gm_intensity,
            csf_intensity: self.csf_intensity,
            bias_amplitude: self.bias_amplitude,
            deform_amplitude: self.deform_amplitude,
        }
    }

    pub fn degrade_params(&self) -> DegradeParams {
        DegradeParams {
            blur_sigma: self.blur_sigma,
            contrast_alpha: self.contrast_alpha,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub model: String,
    pub view: Axis,
    pub data: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub adversarial_weight: f64,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let t = uconvert_core::TrainConfig::default();
        Self {
            model: t.model.name().into(),
            view: t.view,
            data: None,
            epochs: t.epochs,
            lr: t.learning_rate,
            batch: t.batch_size,
            seed: t.seed,
            adversarial_weight: t.adversarial_weight,
            train_fraction: 0.9,
            split_seed: 0,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvertConfig {
    pub ckpt: Option<PathBuf>,
    pub ckpt_coronal: Option<PathBuf>,
    pub ckpt_axial: Option<PathBuf>,
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub multiview: bool,
    pub keep_views: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub pred: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub axis: Axis,
    pub json: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            pred: None,
            target: None,
            axis: Axis::Sagittal,
            json: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub model: String,
    pub size: usize,
    pub epochs: usize,
    pub subjects: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            model: "uconvert".into(),
            size: 64,
            epochs: 1,
            subjects: 2,
            batch: 4,
            lr: 0.001,
            seed: 0,
            out: None,
        }
    }
}
