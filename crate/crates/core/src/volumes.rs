//! Scalar MR volumes, the MVOL container format, and slice bookkeeping.
//!
//! Array layout is C-contiguous `(D, H, W)` with a fixed anatomical
//! convention: array axis 0 is sagittal, 1 is coronal and 2 is axial.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes at the start of every MVOL file.
pub const MVOL_MAGIC: &[u8; 8] = b"MVOL0001";

/// Viewing plane, identified with the array axis that is held fixed
/// when slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Sagittal,
    Coronal,
    Axial,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Sagittal, Axis::Coronal, Axis::Axial];

    /// Array axis index: sagittal=0, coronal=1, axial=2.
    pub fn index(self) -> usize {
        match self {
            Axis::Sagittal => 0,
            Axis::Coronal => 1,
            Axis::Axial => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Sagittal => "sagittal",
            Axis::Coronal => "coronal",
            Axis::Axial => "axial",
        }
    }

    /// The two array axes spanning a slice taken along `self`, lower first.
    pub fn in_plane(self) -> (usize, usize) {
        match self {
            Axis::Sagittal => (1, 2),
            Axis::Coronal => (0, 2),
            Axis::Axial => (0, 1),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sagittal" => Ok(Axis::Sagittal),
            "coronal" => Ok(Axis::Coronal),
            "axial" => Ok(Axis::Axial),
            other => Err(Error::InvalidParam(format!("unknown axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f64; 3],
    intensity_range: [f64; 2],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], intensity_range: [f64; 2]) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::InvalidVolume(format!(
                "all dimensions must be >= 1, got {:?}",
                data.shape()
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        // Keep the buffer in standard layout so raw-slice access is always valid.
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self {
            data,
            spacing,
            intensity_range,
        })
    }

    /// Unit-spacing volume with nominal range `[0, 1]`.
    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        Self::new(data, [1.0; 3], [0.0, 1.0])
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Result<Self> {
        Self::from_array(Array3::from_elem(shape, value))
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn intensity_range(&self) -> [f64; 2] {
        self.intensity_range
    }

    pub fn set_intensity_range(&mut self, range: [f64; 2]) {
        self.intensity_range = range;
    }

    pub fn extent(&self, axis: Axis) -> usize {
        self.data.shape()[axis.index()]
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("volume data is kept in standard layout")
    }

    /// Same shape and spacing.
    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.shape() == other.shape() && self.spacing == other.spacing
    }

    pub fn check_geometry(&self, other: &Volume) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "shape {:?} spacing {:?} vs shape {:?} spacing {:?}",
                self.shape(),
                self.spacing,
                other.shape(),
                other.spacing
            )))
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// One 2D hyperplane of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub data: Array2<f32>,
    pub source_axis: Axis,
    pub index: usize,
}

impl Slice2D {
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MvolHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    intensity_range: [f64; 2],
}

pub fn write_mvol(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if vol.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let header = MvolHeader {
        shape: vol.shape(),
        spacing: vol.spacing,
        dtype: "f32".to_owned(),
        intensity_range: vol.intensity_range,
    };
    let header = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::InvalidVolume("header too large".into()))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MVOL_MAGIC)?;
    write(&header_len.to_le_bytes())?;
    write(&header)?;
    let mut payload = Vec::with_capacity(vol.data.len() * 4);
    for v in vol.as_slice() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write(&payload)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_mvol(&bytes)
}

/// Decode an in-memory MVOL image.
pub fn decode_mvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 8 || &bytes[..8] != MVOL_MAGIC {
        return Err(Error::NotMvol);
    }
    if bytes.len() < 12 {
        return Err(Error::Header {
            offset: bytes.len(),
            message: "missing header length".into(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Header {
            offset: bytes.len(),
            message: format!("header declares {header_len} bytes but file ends early"),
        });
    }
    let header: MvolHeader =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| Error::Header {
            offset: 12 + json_error_offset(&bytes[12..header_end], &e),
            message: e.to_string(),
        })?;
    if header.dtype != "f32" {
        return Err(Error::Header {
            offset: 12,
            message: format!("unsupported dtype '{}'", header.dtype),
        });
    }
    let [d, h, w] = header.shape;
    let expected = d
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Header {
            offset: 12,
            message: "shape overflows".into(),
        })?;
    let payload = &bytes[header_end..];
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array3::from_shape_vec((d, h, w), values)
        .map_err(|e| Error::InvalidVolume(e.to_string()))?;
    Volume::new(data, header.spacing, header.intensity_range)
}

/// Byte offset (within `text`) of a serde_json error's line/column.
fn json_error_offset(text: &[u8], err: &serde_json::Error) -> usize {
    let (line, column) = (err.line(), err.column());
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

/// All hyperplanes of `vol` along `axis`, in increasing index order.
pub fn extract_slices(vol: &Volume, axis: Axis) -> Vec<Slice2D> {
    vol.data
        .axis_iter(ndarray::Axis(axis.index()))
        .enumerate()
        .map(|(index, plane)| Slice2D {
            data: plane.to_owned(),
            source_axis: axis,
            index,
        })
        .collect()
}

/// Inverse of [`extract_slices`]. Slices may arrive in any order but must
/// cover the indices `0..n` exactly once.
pub fn stack_slices(slices: &[Slice2D], axis: Axis, spacing: [f64; 3]) -> Result<Volume> {
    let first = slices.first().ok_or(Error::NoSlices)?;
    let shape = first.shape();
    for s in slices {
        if s.shape() != shape {
            return Err(Error::InconsistentSlices(format!(
                "{:?} vs {:?}",
                shape,
                s.shape()
            )));
        }
        if s.source_axis != axis {
            return Err(Error::InconsistentSlices(format!(
                "slice {} comes from the {} axis, expected {}",
                s.index, s.source_axis, axis
            )));
        }
    }
    let n = slices.len();
    let mut order: Vec<Option<usize>> = vec![None; n];
    for (pos, s) in slices.iter().enumerate() {
        if s.index >= n {
            return Err(Error::SliceIndex(format!(
                "index {} out of range for {n} slices",
                s.index
            )));
        }
        if order[s.index].replace(pos).is_some() {
            return Err(Error::SliceIndex(format!("duplicate index {}", s.index)));
        }
    }
    let views: Vec<ArrayView2<f32>> = order
        .iter()
        .map(|p| slices[p.expect("every index filled")].data.view())
        .collect();
    let data = ndarray::stack(ndarray::Axis(axis.index()), &views)
        .map_err(|e| Error::InconsistentSlices(e.to_string()))?;
    Volume::new(data, spacing, [0.0, 1.0]).map(|mut v| {
        v.intensity_range = nominal_range(&v);
        v
    })
}

fn nominal_range(v: &Volume) -> [f64; 2] {
    let (lo, hi) = v.min_max();
    if lo >= 0.0 && hi <= 1.0 {
        [0.0, 1.0]
    } else {
        [lo as f64, hi as f64]
    }
}

/// Min-max rescale to `[0, 1]`.
pub fn normalize(vol: &Volume) -> Result<Volume> {
    let (lo, hi) = vol.min_max();
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite);
    }
    if hi <= lo {
        return Err(Error::DegenerateRange);
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    let data = vol.data.mapv(|v| ((v as f64 - lo) / span) as f32);
    Volume::new(data, vol.spacing, [0.0, 1.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn(shape, || rng.random::<f32>());
        Volume::new(data, [1.0, 1.2, 0.9], [0.0, 1.0]).unwrap()
    }

    #[test]
    fn mvol_round_trip_constant() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        let vol = Volume::filled([4, 4, 4], 0.5).unwrap();
        write_mvol(&vol, &path).unwrap();
        assert_eq!(read_mvol(&path).unwrap(), vol);
    }

    #[test]
    fn mvol_round_trip_random_64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        let vol = random_volume([64, 64, 64], 11);
        write_mvol(&vol, &path).unwrap();
        let back = read_mvol(&path).unwrap();
        let max_diff = back
            .as_slice()
            .iter()
            .zip(vol.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert_eq!(max_diff, 0.0);
        assert_eq!(back, vol);
    }

    #[test]
    fn mvol_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let mut vol = Volume::filled([2, 2, 2], 0.1).unwrap();
        vol.data_mut()[[1, 0, 1]] = f32::NAN;
        let err = write_mvol(&vol, dir.path().join("x.mvol")).unwrap_err();
        assert_eq!(err.to_string(), "non-finite data");
    }

    #[test]
    fn mvol_bad_magic() {
        let mut bytes = b"XVOL0001".to_vec();
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_mvol(&bytes), Err(Error::NotMvol)));
        assert_eq!(decode_mvol(b"MV").unwrap_err().to_string(), "not an MVOL file");
    }

    fn encode_with_payload(header: &str, payload_len: usize) -> Vec<u8> {
        let mut bytes = MVOL_MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend(std::iter::repeat_n(0u8, payload_len));
        bytes
    }

    #[test]
    fn mvol_truncated_payload() {
        let header = r#"{"shape":[2,2,2],"spacing":[1,1,1],"dtype":"f32","intensity_range":[0,1]}"#;
        let err = decode_mvol(&encode_with_payload(header, 28)).unwrap_err();
        assert!(matches!(
            err,
            Error::PayloadLength {
                expected: 32,
                actual: 28
            }
        ));
        assert!(err.to_string().starts_with("payload length mismatch"));
        assert!(decode_mvol(&encode_with_payload(header, 32)).is_ok());
    }

    #[test]
    fn mvol_malformed_header_reports_offset() {
        let header = r#"{"shape":[2,2,2],"spacing":oops}"#;
        match decode_mvol(&encode_with_payload(header, 32)) {
            Err(Error::Header { offset, .. }) => {
                let col = header.find("oops").unwrap();
                assert!(offset >= 12 + col && offset <= 12 + col + 4, "offset {offset}");
            }
            other => panic!("expected header error, got {other:?}"),
        }
        let wrong_dtype = r#"{"shape":[1,1,1],"spacing":[1,1,1],"dtype":"f64","intensity_range":[0,1]}"#;
        assert!(matches!(
            decode_mvol(&encode_with_payload(wrong_dtype, 4)),
            Err(Error::Header { .. })
        ));
    }

    #[test]
    fn mvol_layout_is_bit_exact() {
        let data = Array3::from_shape_vec((1, 1, 2), vec![1.0f32, -2.5]).unwrap();
        let vol = Volume::new(data, [1.0, 2.0, 3.0], [0.0, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        write_mvol(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"MVOL0001");
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
        assert_eq!(header["shape"], serde_json::json!([1, 1, 2]));
        assert_eq!(header["dtype"], "f32");
        assert_eq!(&bytes[12 + n..12 + n + 4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[12 + n + 4..], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn slice_shapes() {
        let vol = Volume::filled([2, 3, 4], 0.0).unwrap();
        let sag = extract_slices(&vol, Axis::Sagittal);
        assert_eq!(sag.len(), 2);
        assert!(sag.iter().all(|s| s.shape() == (3, 4)));
        let ax = extract_slices(&vol, Axis::Axial);
        assert_eq!(ax.len(), 4);
        assert!(ax.iter().all(|s| s.shape() == (2, 3)));
        assert_eq!(extract_slices(&vol, Axis::Coronal)[0].shape(), (2, 4));
    }

    #[test]
    fn slice_index_bookkeeping() {
        let mut vol = Volume::filled([2, 3, 4], 0.0).unwrap();
        vol.data_mut()[[1, 2, 3]] = 0.9;
        let cor = extract_slices(&vol, Axis::Coronal);
        assert_eq!(cor[2].index, 2);
        assert_eq!(cor[2].data[[1, 3]], 0.9);
        assert_eq!(cor[2].data[[1, 3]], vol.data()[[1, 2, 3]]);
    }

    #[test]
    fn stack_round_trip_each_axis() {
        let vol = random_volume([8, 8, 8], 3);
        for axis in Axis::ALL {
            let back = stack_slices(&extract_slices(&vol, axis), axis, vol.spacing()).unwrap();
            assert_eq!(back.data(), vol.data());
            assert_eq!(back.spacing(), vol.spacing());
        }
    }

    #[test]
    fn stack_accepts_shuffled_order() {
        let vol = random_volume([3, 4, 5], 9);
        let mut slices = extract_slices(&vol, Axis::Coronal);
        slices.reverse();
        let back = stack_slices(&slices, Axis::Coronal, vol.spacing()).unwrap();
        assert_eq!(back.data(), vol.data());
    }

    #[test]
    fn stack_errors() {
        assert_eq!(
            stack_slices(&[], Axis::Axial, [1.0; 3]).unwrap_err().to_string(),
            "no slices"
        );
        let a = Slice2D {
            data: Array2::zeros((3, 4)),
            source_axis: Axis::Sagittal,
            index: 0,
        };
        let b = Slice2D {
            data: Array2::zeros((3, 5)),
            source_axis: Axis::Sagittal,
            index: 1,
        };
        let err = stack_slices(&[a.clone(), b], Axis::Sagittal, [1.0; 3]).unwrap_err();
        assert!(err.to_string().starts_with("inconsistent slice shapes"));
        let dup = stack_slices(&[a.clone(), a.clone()], Axis::Sagittal, [1.0; 3]).unwrap_err();
        assert!(matches!(dup, Error::SliceIndex(_)));
        let mut gap = a.clone();
        gap.index = 2;
        assert!(matches!(
            stack_slices(&[a, gap], Axis::Sagittal, [1.0; 3]),
            Err(Error::SliceIndex(_))
        ));
    }

    #[test]
    fn normalize_cases() {
        let data = Array3::from_shape_vec((1, 1, 3), vec![0.0f32, 5.0, 10.0]).unwrap();
        let vol = Volume::new(data, [1.0; 3], [0.0, 10.0]).unwrap();
        let n = normalize(&vol).unwrap();
        assert_eq!(n.as_slice(), &[0.0, 0.5, 1.0]);
        assert_eq!(n.intensity_range(), [0.0, 1.0]);

        let unit = Array3::from_shape_vec((1, 2, 2), vec![0.0f32, 0.25, 0.75, 1.0]).unwrap();
        let unit = Volume::from_array(unit).unwrap();
        assert_eq!(normalize(&unit).unwrap(), unit);

        let flat = Volume::filled([2, 2, 2], 0.3).unwrap();
        assert_eq!(
            normalize(&flat).unwrap_err().to_string(),
            "degenerate intensity range"
        );
    }

    #[test]
    fn volume_invariants() {
        assert!(Volume::from_array(Array3::zeros((0, 2, 2))).is_err());
        assert!(Volume::new(Array3::zeros((1, 1, 1)), [1.0, 0.0, 1.0], [0.0, 1.0]).is_err());
        assert!(Volume::new(Array3::zeros((1, 1, 1)), [1.0, f64::NAN, 1.0], [0.0, 1.0]).is_err());
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("Coronal".parse::<Axis>().unwrap(), Axis::Coronal);
        assert!("oblique".parse::<Axis>().is_err());
        assert_eq!(Axis::Axial.to_string(), "axial");
    }
}
