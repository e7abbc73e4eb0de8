//! Synthetic paired dataset: a brain-like phantom serves as the high-field
//! target and a blurred, contrast-compressed, noisy copy as the low-field
//! source.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{read_mvol, write_mvol, Volume};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub size: usize,
    pub wm_intensity: f64,
    pub gm_intensity: f64,
    pub csf_intensity: f64,
    pub bias_amplitude: f64,
    pub deform_amplitude: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            size: 64,
            wm_intensity: 0.70,
            gm_intensity: 0.45,
            csf_intensity: 0.20,
            bias_amplitude: 0.10,
            deform_amplitude: 2.0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.size < 16 || !self.size.is_multiple_of(16) {
            return bad(format!("phantom size {} must be >= 16 and divisible by 16", self.size));
        }
        let (c, g, w) = (self.csf_intensity, self.gm_intensity, self.wm_intensity);
        if !(0.0 < c && c < g && g < w && w <= 1.0) {
            return bad(format!(
                "tissue intensities must satisfy 0 < csf < gm < wm <= 1 (got {c}, {g}, {w})"
            ));
        }
        if !(0.0..=0.2).contains(&self.bias_amplitude) {
            return bad(format!("bias_amplitude {} outside [0, 0.2]", self.bias_amplitude));
        }
        if !(self.deform_amplitude >= 0.0 && self.deform_amplitude.is_finite()) {
            return bad(format!("deform_amplitude {} must be finite and >= 0", self.deform_amplitude));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub blur_sigma: f64,
    pub contrast_alpha: f64,
    pub noise_sigma: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            contrast_alpha: 0.6,
            noise_sigma: 0.03,
        }
    }
}

impl DegradeParams {
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            contrast_alpha: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidParam(format!("blur_sigma {} must be >= 0", self.blur_sigma)));
        }
        if !(self.contrast_alpha > 0.0 && self.contrast_alpha <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "contrast_alpha {} outside (0, 1]",
                self.contrast_alpha
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParam(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Matched low-field-like source and high-field-like target of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPair {
    pub subject_id: u32,
    pub source: Volume,
    pub target: Volume,
}

impl SubjectPair {
    pub fn new(subject_id: u32, source: Volume, target: Volume) -> Result<Self> {
        source.check_geometry(&target)?;
        Ok(Self {
            subject_id,
            source,
            target,
        })
    }
}

/// Sum of `terms` seeded sinusoids whose weights have unit absolute sum,
/// so the field is bounded by 1 in magnitude.
#[derive(Debug, Clone)]
struct SmoothField {
    terms: Vec<([f64; 3], f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, terms: usize) -> Self {
        let mut raw: Vec<([f64; 3], f64, f64)> = (0..terms)
            .map(|_| {
                // Frequencies in cycles across the unit cube, at most ~1.5.
                let f = [
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                ];
                (f, rng.random_range(0.0..TAU), rng.random_range(0.2..1.0))
            })
            .collect();
        let total: f64 = raw.iter().map(|t| t.2).sum();
        for t in &mut raw {
            t.2 /= total;
        }
        Self { terms: raw }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        self.terms
            .iter()
            .map(|(f, phase, w)| w * (TAU * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2]) + phase).sin())
            .sum()
    }
}

/// Tissue layout in normalized coordinates (`[-1, 1]` per axis).
#[derive(Debug, Clone)]
struct Anatomy {
    brain: [f64; 3],
    ribbon: f64,
    ventricles: [([f64; 3], [f64; 3]); 2],
}

impl Anatomy {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut jitter = |base: f64, rel: f64| base * (1.0 + rng.random_range(-rel..rel));
        let brain = [jitter(0.72, 0.06), jitter(0.84, 0.06), jitter(0.70, 0.06)];
        let ribbon = jitter(0.16, 0.1);
        let offset = jitter(0.16, 0.15);
        let lift = jitter(0.08, 0.5);
        let axes = [jitter(0.09, 0.15), jitter(0.30, 0.1), jitter(0.14, 0.1)];
        let axes2 = [jitter(0.09, 0.15), jitter(0.30, 0.1), jitter(0.14, 0.1)];
        Self {
            brain,
            ribbon,
            ventricles: [([-offset, 0.0, lift], axes), ([offset, 0.0, lift], axes2)],
        }
    }

    fn tissue(&self, p: [f64; 3], params: &PhantomParams) -> f64 {
        let r = ellipsoid_radius(p, [0.0; 3], self.brain);
        if r >= 1.0 {
            return 0.0;
        }
        if r >= 1.0 - self.ribbon {
            return params.gm_intensity;
        }
        if self
            .ventricles
            .iter()
            .any(|(c, a)| ellipsoid_radius(p, *c, *a) < 1.0)
        {
            return params.csf_intensity;
        }
        params.wm_intensity
    }
}

fn ellipsoid_radius(p: [f64; 3], c: [f64; 3], a: [f64; 3]) -> f64 {
    (0..3)
        .map(|i| ((p[i] - c[i]) / a[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Build a deterministic brain-like phantom with values in `[0, 1]` and an
/// exactly zero background.
pub fn generate_phantom(seed: u64, params: &PhantomParams) -> Result<Volume> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = Anatomy::new(&mut rng);
    let deform: [SmoothField; 3] = std::array::from_fn(|_| SmoothField::new(&mut rng, 3));
    let bias = SmoothField::new(&mut rng, 4);

    let n = params.size;
    let half = n as f64 / 2.0;
    let center = (n as f64 - 1.0) / 2.0;
    // Each displacement component is bounded by amp/sqrt(3), so the
    // displacement vector is bounded by amp.
    let comp_amp = params.deform_amplitude / 3f64.sqrt();
    let data = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
        let u = [i as f64 / n as f64, j as f64 / n as f64, k as f64 / n as f64];
        let mut pos = [i as f64, j as f64, k as f64];
        if comp_amp > 0.0 {
            for (d, f) in pos.iter_mut().zip(&deform) {
                *d += comp_amp * f.eval(u);
            }
        }
        let p = pos.map(|v| (v - center) / half);
        let t = anatomy.tissue(p, params);
        if t == 0.0 {
            return 0.0;
        }
        let v = if params.bias_amplitude > 0.0 {
            t * (1.0 + params.bias_amplitude * bias.eval(u))
        } else {
            t
        };
        v.clamp(0.0, 1.0) as f32
    });
    Volume::new(data, [1.0; 3], [0.0, 1.0])
}

/// Symmetric boundary extension (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur along all three axes.
pub fn gaussian_blur(data: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma == 0.0 {
        return data.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut cur = data.clone();
    for axis in 0..3 {
        let mut next = Array3::<f64>::zeros(cur.raw_dim());
        let n = cur.shape()[axis];
        for (src, mut dst) in cur
            .lanes(ndarray::Axis(axis))
            .into_iter()
            .zip(next.lanes_mut(ndarray::Axis(axis)))
        {
            for (o, out) in dst.iter_mut().enumerate() {
                *out = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * src[reflect(o as isize + t as isize - radius, n)])
                    .sum();
            }
        }
        cur = next;
    }
    cur
}

/// Low-field-like degradation: blur, contrast compression about the mean,
/// additive Gaussian noise, clamp to `[0, 1]`.
pub fn degrade(target: &Volume, params: &DegradeParams, seed: u64) -> Result<Volume> {
    params.validate()?;
    let (lo, hi) = target.min_max();
    if lo < 0.0 || hi > 1.0 {
        return Err(Error::InvalidVolume(format!(
            "degrade expects values in [0, 1], got [{lo}, {hi}]"
        )));
    }
    let mut work = gaussian_blur(&target.data().mapv(f64::from), params.blur_sigma);
    if params.contrast_alpha != 1.0 {
        let mean = work.mean().unwrap_or(0.0);
        let alpha = params.contrast_alpha;
        work.mapv_inplace(|v| mean + alpha * (v - mean));
    }
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::InvalidParam(format!("noise_sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        work.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let data = work.mapv(|v| v.clamp(0.0, 1.0) as f32);
    Volume::new(data, target.spacing(), [0.0, 1.0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: u32,
    pub src_path: String,
    pub tgt_path: String,
    pub phantom_seed: u64,
    pub degrade_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub phantom_params: PhantomParams,
    pub degrade_params: DegradeParams,
    pub subjects: Vec<SubjectEntry>,
}

impl Manifest {
    pub fn subject_ids(&self) -> Vec<u32> {
        self.subjects.iter().map(|s| s.id).collect()
    }
}

/// Seeds of subject `id` depend only on the run seed and the id.
pub fn subject_seeds(seed: u64, id: u32) -> (u64, u64) {
    let s = crate::derive_seed(seed, u64::from(id));
    (crate::derive_seed(s, 1), crate::derive_seed(s, 2))
}

pub fn generate_pair(
    id: u32,
    seed: u64,
    phantom_params: &PhantomParams,
    degrade_params: &DegradeParams,
) -> Result<SubjectPair> {
    let (ps, ds) = subject_seeds(seed, id);
    let target = generate_phantom(ps, phantom_params)?;
    let source = degrade(&target, degrade_params, ds)?;
    SubjectPair::new(id, source, target)
}

/// Write `n_subjects` MVOL pairs and `manifest.json` into `out_dir`.
/// Subjects are generated in parallel; the output does not depend on
/// scheduling.
pub fn generate_dataset(
    n_subjects: usize,
    seed: u64,
    phantom_params: &PhantomParams,
    degrade_params: &DegradeParams,
    out_dir: &Path,
) -> Result<Manifest> {
    if n_subjects < 2 {
        return Err(Error::NotEnoughSubjects);
    }
    phantom_params.validate()?;
    degrade_params.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let subjects = (0..n_subjects as u32)
        .into_par_iter()
        .map(|id| {
            let pair = generate_pair(id, seed, phantom_params, degrade_params)?;
            let (phantom_seed, degrade_seed) = subject_seeds(seed, id);
            let entry = SubjectEntry {
                id,
                src_path: format!("subject_{id}_src.mvol"),
                tgt_path: format!("subject_{id}_tgt.mvol"),
                phantom_seed,
                degrade_seed,
            };
            write_mvol(&pair.source, out_dir.join(&entry.src_path))?;
            write_mvol(&pair.target, out_dir.join(&entry.tgt_path))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        phantom_params: phantom_params.clone(),
        degrade_params: degrade_params.clone(),
        subjects,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A generated dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: serde_json::from_str(&text)?,
        })
    }

    pub fn load_pair(&self, id: u32) -> Result<SubjectPair> {
        let entry = self
            .manifest
            .subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::InvalidParam(format!("subject {id} not in manifest")))?;
        let source = read_mvol(self.dir.join(&entry.src_path))?;
        let target = read_mvol(self.dir.join(&entry.tgt_path))?;
        SubjectPair::new(id, source, target)
    }

    pub fn load_pairs(&self, ids: &[u32]) -> Result<Vec<SubjectPair>> {
        ids.iter().map(|&id| self.load_pair(id)).collect()
    }
}

/// Subject-level train/test partition. The train side holds
/// `round(train_fraction * n)` subjects, clamped so both sides are non-empty.
pub fn split_by_subject(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Vec<u32>, Vec<u32>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParam(format!(
            "train_fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut ids = manifest.subject_ids();
    let n = ids.len();
    if n < 2 {
        return Err(Error::NotEnoughSubjects);
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
