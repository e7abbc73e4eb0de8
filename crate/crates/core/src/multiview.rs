//! Multi-view ensemble: convert along all three orthogonal views with
//! per-view models and average the restacked volumes voxelwise.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::models::{Architecture, Model};
use crate::training::convert_volume;
use crate::volumes::{Axis, Volume};

fn check_inputs(volumes: &[Volume]) -> Result<&Volume> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidParam("fuse needs at least one volume".into()))?;
    for v in &volumes[1..] {
        first.check_geometry(v)?;
    }
    Ok(first)
}

/// Voxelwise `sum(w_i * v_i) / divisor`, accumulated in `f64` in input order.
fn combine(volumes: &[Volume], weights: &[f64], divisor: f64) -> Result<Volume> {
    let first = check_inputs(volumes)?;
    let mut acc = Array3::<f64>::zeros(first.data().raw_dim());
    for (v, &w) in volumes.iter().zip(weights) {
        acc.zip_mut_with(v.data(), |a, &x| *a += w * f64::from(x));
    }
    let lo = volumes.iter().map(|v| v.intensity_range()[0]).fold(f64::INFINITY, f64::min);
    let hi = volumes.iter().map(|v| v.intensity_range()[1]).fold(f64::NEG_INFINITY, f64::max);
    Volume::new(acc.mapv(|a| (a / divisor) as f32), first.spacing(), [lo, hi])
}

/// Voxelwise arithmetic mean of volumes with identical geometry.
pub fn fuse(volumes: &[Volume]) -> Result<Volume> {
    // Unit weights and a single division: sums of up to three f32 values
    // are exact in f64, so the result does not depend on input order.
    combine(volumes, &vec![1.0; volumes.len()], volumes.len().max(1) as f64)
}

/// Voxelwise weighted mean; weights must be finite, non-negative and sum
/// to one.
pub fn fuse_weighted(volumes: &[Volume], weights: &[f64]) -> Result<Volume> {
    if weights.len() != volumes.len() {
        return Err(Error::InvalidParam(format!(
            "{} weights for {} volumes",
            weights.len(),
            volumes.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidParam("fusion weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!("fusion weights sum to {total}, expected 1")));
    }
    combine(volumes, weights, 1.0)
}

/// One converter per view, indexed by [`Axis`].
#[derive(Debug, Clone)]
pub struct ViewEnsemble {
    models: [Model<f32>; 3],
}

impl ViewEnsemble {
    pub fn new(sagittal: Model<f32>, coronal: Model<f32>, axial: Model<f32>) -> Result<Self> {
        let models = [sagittal, coronal, axial];
        let arch = models[0].architecture();
        for (m, axis) in models.iter().zip(Axis::ALL) {
            if !m.is_image_to_image() {
                return Err(Error::InvalidParam(format!("{axis} model does not convert slices")));
            }
            if m.architecture() != arch {
                return Err(Error::InvalidParam(format!(
                    "{axis} model is {}, sagittal model is {arch}",
                    m.architecture()
                )));
            }
        }
        Ok(Self { models })
    }

    pub fn architecture(&self) -> Architecture {
        self.models[0].architecture()
    }

    pub fn model(&self, axis: Axis) -> &Model<f32> {
        &self.models[axis.index()]
    }
}

/// Convert `source` along each view and fuse. Per-view volumes are
/// returned in [`Axis::ALL`] order.
pub fn multi_view_convert(ensemble: &ViewEnsemble, source: &Volume) -> Result<(Volume, [Volume; 3])> {
    let views: Vec<Volume> = Axis::ALL
        .iter()
        .map(|&axis| convert_volume(ensemble.model(axis), source, axis))
        .collect::<Result<_>>()?;
    let fused = fuse(&views)?;
    let [s, c, a]: [Volume; 3] = views.try_into().expect("three views");
    Ok((fused, [s, c, a]))
}
