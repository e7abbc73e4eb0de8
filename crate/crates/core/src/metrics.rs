//! Image quality: MSE, PSNR, windowed SSIM and per-volume reports.

use ndarray::{Array2, ArrayBase, ArrayView2, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{extract_slices, Axis, Volume};

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("shape mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean of squared differences, accumulated in `f64`.
pub fn mse<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f32>,
    S2: Data<Elem = f32>,
    D: Dimension,
{
    check_shapes(a.shape(), b.shape())?;
    if a.is_empty() {
        return Err(Error::Shape("mse of empty arrays".into()));
    }
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(max² / mse)`; `f64::INFINITY` when the inputs are equal.
pub fn psnr<S1, S2, D>(pred: &ArrayBase<S1, D>, target: &ArrayBase<S2, D>, max_value: f64) -> Result<f64>
where
    S1: Data<Elem = f32>,
    S2: Data<Elem = f32>,
    D: Dimension,
{
    if !(max_value > 0.0) {
        return Err(Error::InvalidParam(format!("max_value {max_value} must be > 0")));
    }
    Ok(psnr_from_mse(mse(pred, target)?, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size.is_multiple_of(2) || self.window_size == 0 {
            return Err(Error::InvalidParam(format!(
                "window size {} must be odd",
                self.window_size
            )));
        }
        if !(self.sigma > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::InvalidParam("sigma and dynamic_range must be > 0".into()));
        }
        Ok(())
    }

    /// Normalized 1D Gaussian taps; the 2D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window_size / 2) as f64;
        let mut g: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        g
    }
}

/// Separable filtering restricted to fully overlapping window positions.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows = Array2::from_shape_fn((h, ow), |(i, j)| (0..k).map(|t| taps[t] * x[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..k).map(|t| taps[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean SSIM over valid window positions, computed in `f64`.
pub fn ssim_2d(pred: ArrayView2<f32>, target: ArrayView2<f32>, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    check_shapes(pred.shape(), target.shape())?;
    let (h, w) = pred.dim();
    let k = params.window_size;
    if h < k || w < k {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than the {k}x{k} SSIM window"
        )));
    }
    let taps = params.taps();
    let x = pred.mapv(f64::from);
    let y = target.mapv(f64::from);
    let mx = filter_valid(&x, &taps);
    let my = filter_valid(&y, &taps);
    let exx = filter_valid(&(&x * &x), &taps);
    let eyy = filter_valid(&(&y * &y), &taps);
    let exy = filter_valid(&(&x * &y), &taps);
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.nrows() {
        for j in 0..mx.ncols() {
            let (ux, uy) = (mx[[i, j]], my[[i, j]]);
            let vx = exx[[i, j]] - ux * ux;
            let vy = eyy[[i, j]] - uy * uy;
            let cov = exy[[i, j]] - ux * uy;
            total += ((2.0 * (ux * uy) + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    }
    Ok(total / mx.len() as f64)
}

/// Serialize non-finite floats as JSON `null` and read `null` back as +∞.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&x.is_finite().then_some(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Option<f64>>::deserialize(d)?
                .into_iter()
                .map(|x| x.unwrap_or(f64::INFINITY))
                .collect())
        }
    }
}

/// Per-slice and aggregate quality of a converted volume. Infinite PSNRs
/// (identical slices) are written as `null` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub axis: Axis,
    pub n_slices: usize,
    #[serde(with = "inf_as_null::vec")]
    pub psnr_per_slice: Vec<f64>,
    pub ssim_per_slice: Vec<f64>,
    /// Mean over finite per-slice PSNRs; +∞ when every slice is identical.
    #[serde(with = "inf_as_null")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub n_infinite_psnr: usize,
}

impl MetricsReport {
    pub fn from_slices(axis: Axis, psnr_per_slice: Vec<f64>, ssim_per_slice: Vec<f64>) -> Self {
        let finite: Vec<f64> = psnr_per_slice.iter().copied().filter(|v| v.is_finite()).collect();
        let psnr_mean = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let ssim_mean = ssim_per_slice.iter().sum::<f64>() / ssim_per_slice.len().max(1) as f64;
        Self {
            axis,
            n_slices: psnr_per_slice.len(),
            n_infinite_psnr: psnr_per_slice.len() - finite.len(),
            psnr_per_slice,
            ssim_per_slice,
            psnr_mean,
            ssim_mean,
        }
    }
}

/// Slice-wise PSNR (peak 1.0) and SSIM along `axis`.
pub fn evaluate_volume(pred: &Volume, target: &Volume, axis: Axis) -> Result<MetricsReport> {
    pred.check_geometry(target)?;
    let params = SsimParams::default();
    let (mut psnrs, mut ssims) = (Vec::new(), Vec::new());
    for (p, t) in extract_slices(pred, axis).iter().zip(extract_slices(target, axis).iter()) {
        psnrs.push(psnr(&p.data, &t.data, 1.0)?);
        ssims.push(ssim_2d(p.data.view(), t.data.view(), &params)?);
    }
    Ok(MetricsReport::from_slices(axis, psnrs, ssims))
}

/// MSE between two volumes of equal geometry.
pub fn volume_mse(a: &Volume, b: &Volume) -> Result<f64> {
    a.check_geometry(b)?;
    mse(a.data(), b.data())
}
