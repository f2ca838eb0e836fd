//! Activation-map extraction and class-specific feature masking.
//!
//! A class activation map is the per-pixel dot product of one head
//! weight row with the feature block, rectified and max-normalized to
//! `[0, 1]`. Re-activated maps use a weight matrix resolved from the two
//! heads (`w`, `w'`, their sum, or their elementwise product).

use crate::autodiff::{self, Elem};
use crate::error::{RecamError, Result};
use crate::nets::{ClassifierState, FeatureBlock};
use crate::pipeline::atomic_write;
use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use std::path::Path;

/// A per-class response map at feature resolution.
#[derive(Debug, Clone)]
pub struct ActivationMap<T: Elem> {
    pub class_id: usize,
    /// Raw response `A_k` (pre-ReLU, unnormalized).
    pub raw: Array2<T>,
    /// `ReLU(raw) / max(ReLU(raw))`, all-zero when the rectified map is 0.
    pub normalized: Array2<T>,
}

impl<T: Elem> ActivationMap<T> {
    pub fn from_raw(class_id: usize, raw: Array2<T>) -> Self {
        let normalized = autodiff::max_normalize(raw.view());
        ActivationMap { class_id, raw, normalized }
    }

    /// Normalized map bilinearly upsampled to image resolution.
    pub fn upsampled(&self, factor: usize) -> Array2<T> {
        upsample_map(self.normalized.view(), factor)
    }

    pub fn convert<U: Elem>(&self) -> ActivationMap<U> {
        ActivationMap {
            class_id: self.class_id,
            raw: self.raw.mapv(|v| U::from_f64(v.to_f64())),
            normalized: self.normalized.mapv(|v| U::from_f64(v.to_f64())),
        }
    }
}

pub fn upsample_map<T: Elem>(map: ArrayView2<T>, factor: usize) -> Array2<T> {
    let (h, w) = map.dim();
    let as3 = map.to_owned().into_shape_with_order((1, h, w)).expect("reshape");
    let up = autodiff::bilinear_upsample(as3.view(), factor);
    up.index_axis(Axis(0), 0).to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightVariant {
    W,
    WPrime,
    Sum,
    Product,
}

impl std::str::FromStr for WeightVariant {
    type Err = RecamError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w" => Ok(WeightVariant::W),
            "wprime" | "w'" => Ok(WeightVariant::WPrime),
            "sum" => Ok(WeightVariant::Sum),
            "product" => Ok(WeightVariant::Product),
            other => Err(RecamError::Config(format!("unknown weight variant: {other}"))),
        }
    }
}

impl std::fmt::Display for WeightVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            WeightVariant::W => "w",
            WeightVariant::WPrime => "wprime",
            WeightVariant::Sum => "sum",
            WeightVariant::Product => "product",
        };
        f.write_str(s)
    }
}

/// The variant-resolved extraction weights `w''`.
#[derive(Debug, Clone)]
pub struct ReCamWeights<T: Elem> {
    pub variant: WeightVariant,
    /// `(K, C)`
    pub matrix: Array2<T>,
}

/// Resolve the extraction weights from a trained state.
pub fn resolve_weights<T: Elem>(state: &ClassifierState<T>, variant: WeightVariant) -> ReCamWeights<T> {
    let matrix = match variant {
        WeightVariant::W => state.fc1.clone(),
        WeightVariant::WPrime => state.fc2.clone(),
        WeightVariant::Sum => &state.fc1 + &state.fc2,
        WeightVariant::Product => &state.fc1 * &state.fc2,
    };
    ReCamWeights { variant, matrix }
}

/// Raw per-pixel projection of one weight row onto the feature block.
fn project<T: Elem>(f: &FeatureBlock<T>, w_k: ArrayView1<T>) -> Result<Array2<T>> {
    let (c, h, w) = f.data.dim();
    if w_k.len() != c {
        return Err(RecamError::Shape(format!(
            "weight row has {} channels, features have {c}",
            w_k.len()
        )));
    }
    let mut raw = Array2::<T>::zeros((h, w));
    for (ci, &wc) in w_k.iter().enumerate() {
        raw.zip_mut_with(&f.data.index_axis(Axis(0), ci), |o, &x| *o = *o + wc * x);
    }
    Ok(raw)
}

/// Extract the activation map of class `k` from features and one FC1
/// weight row.
pub fn extract_cam<T: Elem>(
    f: &FeatureBlock<T>,
    w_k: ArrayView1<T>,
    class_id: usize,
) -> Result<ActivationMap<T>> {
    Ok(ActivationMap::from_raw(class_id, project(f, w_k)?))
}

/// Extract the re-activated map of class `k` with resolved weights.
pub fn extract_recam<T: Elem>(
    f: &FeatureBlock<T>,
    rw: &ReCamWeights<T>,
    class_id: usize,
) -> Result<ActivationMap<T>> {
    if class_id >= rw.matrix.nrows() {
        return Err(RecamError::Contract(format!("class {class_id} out of range")));
    }
    extract_cam(f, rw.matrix.row(class_id), class_id)
}

/// Apply a normalized soft mask to every channel of a feature block.
pub fn mask_features<T: Elem>(
    f: &FeatureBlock<T>,
    mask: ArrayView2<T>,
) -> Result<FeatureBlock<T>> {
    let (_, h, w) = f.data.dim();
    if mask.dim() != (h, w) {
        return Err(RecamError::Shape(format!(
            "mask {:?} vs feature spatial {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    let mut data = f.data.clone();
    for mut plane in data.axis_iter_mut(Axis(0)) {
        plane.zip_mut_with(&mask, |p, &m| *p = *p * m);
    }
    Ok(FeatureBlock { data, stride: f.stride })
}

/// Extract maps for the given classes of one image: encode, resolve the
/// weight row per class, optionally average with the horizontally
/// flipped pass (the minimal test-time augmentation).
pub fn extract_for_image<T: Elem>(
    state: &ClassifierState<T>,
    pixels: &Array3<T>,
    classes: &[usize],
    rw: &ReCamWeights<T>,
    flip_average: bool,
) -> Result<Vec<ActivationMap<T>>> {
    let f = crate::nets::encode(pixels.view(), state)?;
    let f_flip = if flip_average {
        let flipped = flip_h(pixels);
        Some(crate::nets::encode(flipped.view(), state)?)
    } else {
        None
    };
    let half = T::from_f64(0.5);
    classes
        .iter()
        .map(|&k| {
            let mut raw = project(&f, rw.matrix.row(k))?;
            if let Some(ff) = &f_flip {
                let raw_f = project(ff, rw.matrix.row(k))?;
                let unflipped = flip_map_h(&raw_f);
                raw.zip_mut_with(&unflipped, |a, &b| *a = (*a + b) * half);
            }
            Ok(ActivationMap::from_raw(k, raw))
        })
        .collect()
}

fn flip_h<T: Elem>(pixels: &Array3<T>) -> Array3<T> {
    let (c, h, w) = pixels.dim();
    Array3::from_shape_fn((c, h, w), |(ci, i, j)| pixels[(ci, i, w - 1 - j)])
}

fn flip_map_h<T: Elem>(map: &Array2<T>) -> Array2<T> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((h, w), |(i, j)| map[(i, w - 1 - j)])
}

// ---------------------------------------------------------------------------
// Serialized maps: magic "RMAP", one record per stored class:
// (class id: u16, H': u16, W': u16, row-major little-endian f32).
// The normalized map is stored.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"RMAP";

pub fn save_rmap(path: &Path, maps: &[ActivationMap<f32>]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for m in maps {
        let (h, w) = m.normalized.dim();
        buf.extend_from_slice(&(m.class_id as u16).to_le_bytes());
        buf.extend_from_slice(&(h as u16).to_le_bytes());
        buf.extend_from_slice(&(w as u16).to_le_bytes());
        for &v in m.normalized.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn load_rmap(path: &Path) -> Result<Vec<ActivationMap<f32>>> {
    let bad = |detail: &str| RecamError::Format { format: "RMAP", detail: detail.into() };
    let data = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RecamError::MissingArtifact(path.to_path_buf()),
        _ => RecamError::io(path, e),
    })?;
    if data.len() < 4 || &data[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut maps = Vec::new();
    let mut at = 4usize;
    while at < data.len() {
        if at + 6 > data.len() {
            return Err(bad("truncated record header"));
        }
        let class_id = u16::from_le_bytes(data[at..at + 2].try_into().unwrap()) as usize;
        let h = u16::from_le_bytes(data[at + 2..at + 4].try_into().unwrap()) as usize;
        let w = u16::from_le_bytes(data[at + 4..at + 6].try_into().unwrap()) as usize;
        at += 6;
        let n = h * w;
        if at + 4 * n > data.len() {
            return Err(bad("truncated record data"));
        }
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            vals.push(f32::from_le_bytes(data[at + 4 * i..at + 4 * i + 4].try_into().unwrap()));
        }
        at += 4 * n;
        let normalized = Array2::from_shape_vec((h, w), vals).map_err(|_| bad("record shape"))?;
        maps.push(ActivationMap { class_id, raw: normalized.clone(), normalized });
    }
    Ok(maps)
}
