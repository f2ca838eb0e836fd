//! Trainable models: convolutional encoder, GAP + two linear heads, and
//! a small fully-convolutional segmentation head.
//!
//! The encoder is a fixed stack of 3x3 convolutions (ReLU after each);
//! strides multiply to the feature stride `s`, so a `(3, H, W)` image
//! becomes a `(C, H/s, W/s)` feature block. Both classification heads
//! are bias-free by default so that the per-class activation map is
//! exactly the per-pixel dot product of head weights with features; a
//! flag re-enables biases for ablation.

use crate::autodiff::{self, conv_out_dim, Elem, Tape, Var};
use crate::error::{RecamError, Result};
use crate::rngstream::{stream, Domain};
use ndarray::{Array1, Array2, Array3, ArrayView3, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// One convolution layer: 3x3 kernel, padding 1, configurable stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

pub const KERNEL: usize = 3;
pub const PAD: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub num_classes: usize,
    pub convs: Vec<ConvSpec>,
    /// Biases on FC1/FC2. Off by default: the activation map identity
    /// `A_k = w_k^T f` holds only for bias-free heads.
    pub fc_bias: bool,
}

impl ArchConfig {
    /// The default desk-scale encoder: 6 convolutions in 4 stages,
    /// stride 8 overall, 64 output channels.
    pub fn small(num_classes: usize) -> Self {
        ArchConfig {
            num_classes,
            convs: vec![
                ConvSpec { in_ch: 3, out_ch: 16, stride: 1 },
                ConvSpec { in_ch: 16, out_ch: 16, stride: 2 },
                ConvSpec { in_ch: 16, out_ch: 32, stride: 2 },
                ConvSpec { in_ch: 32, out_ch: 32, stride: 1 },
                ConvSpec { in_ch: 32, out_ch: 64, stride: 2 },
                ConvSpec { in_ch: 64, out_ch: 64, stride: 1 },
            ],
            fc_bias: false,
        }
    }

    /// A tiny encoder for oracle tests (stride 4, 8 channels).
    pub fn tiny(num_classes: usize) -> Self {
        ArchConfig {
            num_classes,
            convs: vec![
                ConvSpec { in_ch: 3, out_ch: 6, stride: 2 },
                ConvSpec { in_ch: 6, out_ch: 8, stride: 2 },
            ],
            fc_bias: false,
        }
    }

    pub fn stride(&self) -> usize {
        self.convs.iter().map(|c| c.stride).product()
    }

    pub fn feat_channels(&self) -> usize {
        self.convs.last().map(|c| c.out_ch).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(RecamError::Config("num_classes must be positive".into()));
        }
        if self.convs.is_empty() {
            return Err(RecamError::Config("encoder needs at least one conv".into()));
        }
        if self.convs[0].in_ch != 3 {
            return Err(RecamError::Config("first conv must take 3 channels".into()));
        }
        for pair in self.convs.windows(2) {
            if pair[0].out_ch != pair[1].in_ch {
                return Err(RecamError::Config("conv channel chain broken".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<T: Elem> {
    /// `(out_ch, in_ch * 9)` — matrix form used directly by im2col GEMM.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub spec: ConvSpec,
}

/// Encoder output before GAP.
#[derive(Debug, Clone)]
pub struct FeatureBlock<T: Elem> {
    /// `(C, H', W')`
    pub data: Array3<T>,
    pub stride: usize,
}

/// Encoder parameters plus the two classification heads.
#[derive(Debug, Clone)]
pub struct ClassifierState<T: Elem> {
    pub arch: ArchConfig,
    pub convs: Vec<ConvLayer<T>>,
    /// FC1 weights, `(K, C)`.
    pub fc1: Array2<T>,
    pub fc1_bias: Option<Array1<T>>,
    /// FC2 weights, `(K, C)`.
    pub fc2: Array2<T>,
    pub fc2_bias: Option<Array1<T>>,
    /// Loss-mixing coefficient carried with the model for provenance.
    pub lambda: f64,
    pub seed: u64,
}

fn he_conv<T: Elem>(spec: ConvSpec, rng: &mut impl Rng) -> ConvLayer<T> {
    let fan_in = spec.in_ch * KERNEL * KERNEL;
    let std = (2.0 / fan_in as f64).sqrt();
    let weight =
        Array2::from_shape_fn((spec.out_ch, fan_in), |_| T::from_f64(gauss(rng) * std));
    ConvLayer { weight, bias: Array1::zeros(spec.out_ch), spec }
}

fn head_init<T: Elem>(k: usize, c: usize, rng: &mut impl Rng) -> Array2<T> {
    Array2::from_shape_fn((k, c), |_| T::from_f64(gauss(rng) * 0.1))
}

/// Box-Muller; two uniform draws per sample keeps the stream layout simple.
fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl<T: Elem> ClassifierState<T> {
    pub fn init(arch: ArchConfig, lambda: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream(seed, Domain::ModelInit, 0);
        let convs = arch.convs.iter().map(|&s| he_conv(s, &mut rng)).collect();
        let k = arch.num_classes;
        let c = arch.feat_channels();
        let fc1 = head_init(k, c, &mut rng);
        let fc2 = head_init(k, c, &mut rng);
        let (fc1_bias, fc2_bias) = if arch.fc_bias {
            (Some(Array1::zeros(k)), Some(Array1::zeros(k)))
        } else {
            (None, None)
        };
        Ok(ClassifierState { arch, convs, fc1, fc1_bias, fc2, fc2_bias, lambda, seed })
    }

    /// Re-draw FC2 from the dedicated init stream (start of phase 2).
    pub fn reinit_fc2(&mut self, seed: u64) {
        let mut rng = stream(seed, Domain::Fc2Init, 0);
        self.fc2 = head_init(self.arch.num_classes, self.arch.feat_channels(), &mut rng);
        if let Some(b) = &mut self.fc2_bias {
            b.fill(T::zero());
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        names.push("fc1.weight".into());
        if self.fc1_bias.is_some() {
            names.push("fc1.bias".into());
        }
        names.push("fc2.weight".into());
        if self.fc2_bias.is_some() {
            names.push("fc2.bias".into());
        }
        names
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut v: Vec<ArrayViewD<'_, T>> = Vec::new();
        for l in &self.convs {
            v.push(l.weight.view().into_dyn());
            v.push(l.bias.view().into_dyn());
        }
        v.push(self.fc1.view().into_dyn());
        if let Some(b) = &self.fc1_bias {
            v.push(b.view().into_dyn());
        }
        v.push(self.fc2.view().into_dyn());
        if let Some(b) = &self.fc2_bias {
            v.push(b.view().into_dyn());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut v: Vec<ArrayViewMutD<'_, T>> = Vec::new();
        for l in &mut self.convs {
            v.push(l.weight.view_mut().into_dyn());
            v.push(l.bias.view_mut().into_dyn());
        }
        v.push(self.fc1.view_mut().into_dyn());
        if let Some(b) = &mut self.fc1_bias {
            v.push(b.view_mut().into_dyn());
        }
        v.push(self.fc2.view_mut().into_dyn());
        if let Some(b) = &mut self.fc2_bias {
            v.push(b.view_mut().into_dyn());
        }
        v
    }

    pub fn convert<U: Elem>(&self) -> ClassifierState<U> {
        ClassifierState {
            arch: self.arch.clone(),
            convs: self
                .convs
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.mapv(|v| U::from_f64(v.to_f64())),
                    bias: l.bias.mapv(|v| U::from_f64(v.to_f64())),
                    spec: l.spec,
                })
                .collect(),
            fc1: self.fc1.mapv(|v| U::from_f64(v.to_f64())),
            fc1_bias: self.fc1_bias.as_ref().map(|b| b.mapv(|v| U::from_f64(v.to_f64()))),
            fc2: self.fc2.mapv(|v| U::from_f64(v.to_f64())),
            fc2_bias: self.fc2_bias.as_ref().map(|b| b.mapv(|v| U::from_f64(v.to_f64()))),
            lambda: self.lambda,
            seed: self.seed,
        }
    }
}

/// Run the encoder on a `(3, H, W)` image.
pub fn encode<T: Elem>(
    pixels: ArrayView3<T>,
    state: &ClassifierState<T>,
) -> Result<FeatureBlock<T>> {
    let (c, h, w) = pixels.dim();
    if c != 3 {
        return Err(RecamError::Shape(format!("expected 3 input channels, got {c}")));
    }
    let s = state.arch.stride();
    if h % s != 0 || w % s != 0 {
        return Err(RecamError::Config(format!(
            "image {h}x{w} not divisible by encoder stride {s}"
        )));
    }
    let mut cur = pixels.to_owned();
    for layer in &state.convs {
        let (out, _) = autodiff::conv2d(
            cur.view(),
            layer.weight.view(),
            Some(layer.bias.view()),
            KERNEL,
            layer.spec.stride,
            PAD,
        );
        cur = out.mapv(|v| v.max(T::zero()));
    }
    Ok(FeatureBlock { data: cur, stride: s })
}

fn head_logits<T: Elem>(
    f: &FeatureBlock<T>,
    weight: &Array2<T>,
    bias: Option<&Array1<T>>,
) -> Result<Array1<T>> {
    if weight.ncols() != f.data.dim().0 {
        return Err(RecamError::Shape(format!(
            "head expects {} channels, features have {}",
            weight.ncols(),
            f.data.dim().0
        )));
    }
    let pooled = autodiff::gap(f.data.view());
    let mut z = weight.dot(&pooled);
    if let Some(b) = bias {
        z = z + b;
    }
    Ok(z)
}

/// FC1 logits: `w . GAP(f)` (+ bias when enabled).
pub fn classify_fc1<T: Elem>(
    f: &FeatureBlock<T>,
    state: &ClassifierState<T>,
) -> Result<Array1<T>> {
    head_logits(f, &state.fc1, state.fc1_bias.as_ref())
}

/// FC2 logits, same contract as [`classify_fc1`] with the second head.
pub fn classify_fc2<T: Elem>(
    f: &FeatureBlock<T>,
    state: &ClassifierState<T>,
) -> Result<Array1<T>> {
    head_logits(f, &state.fc2, state.fc2_bias.as_ref())
}

// ---------------------------------------------------------------------------
// Tape builders (shared by the trainer and the adversarial refiner)
// ---------------------------------------------------------------------------

/// Tape handles for every classifier parameter.
pub struct TapeParams {
    pub conv_w: Vec<Var>,
    pub conv_b: Vec<Var>,
    pub fc1: Var,
    pub fc1_bias: Option<Var>,
    pub fc2: Var,
    pub fc2_bias: Option<Var>,
}

impl TapeParams {
    /// Parameter vars in [`ClassifierState::params`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for (&w, &b) in self.conv_w.iter().zip(self.conv_b.iter()) {
            v.push(w);
            v.push(b);
        }
        v.push(self.fc1);
        if let Some(b) = self.fc1_bias {
            v.push(b);
        }
        v.push(self.fc2);
        if let Some(b) = self.fc2_bias {
            v.push(b);
        }
        v
    }
}

/// Load every parameter of `state` onto the tape as gradient leaves.
pub fn tape_params<T: Elem>(
    tape: &mut Tape<T>,
    state: &ClassifierState<T>,
    requires_grad: bool,
) -> TapeParams {
    let mut conv_w = Vec::new();
    let mut conv_b = Vec::new();
    for l in &state.convs {
        conv_w.push(tape.leaf(l.weight.clone().into_dyn(), requires_grad));
        conv_b.push(tape.leaf(l.bias.clone().into_dyn(), requires_grad));
    }
    let fc1 = tape.leaf(state.fc1.clone().into_dyn(), requires_grad);
    let fc1_bias =
        state.fc1_bias.as_ref().map(|b| tape.leaf(b.clone().into_dyn(), requires_grad));
    let fc2 = tape.leaf(state.fc2.clone().into_dyn(), requires_grad);
    let fc2_bias =
        state.fc2_bias.as_ref().map(|b| tape.leaf(b.clone().into_dyn(), requires_grad));
    TapeParams { conv_w, conv_b, fc1, fc1_bias, fc2, fc2_bias }
}

/// Encoder forward on tape: returns the feature-block var.
pub fn tape_encode<T: Elem>(
    tape: &mut Tape<T>,
    x: Var,
    params: &TapeParams,
    arch: &ArchConfig,
) -> Var {
    let mut cur = x;
    for (i, spec) in arch.convs.iter().enumerate() {
        let conv =
            tape.conv2d(cur, params.conv_w[i], Some(params.conv_b[i]), KERNEL, spec.stride, PAD);
        cur = tape.relu(conv);
    }
    cur
}

/// `FC(GAP(f))` on tape with the given head.
pub fn tape_head<T: Elem>(tape: &mut Tape<T>, f: Var, weight: Var, bias: Option<Var>) -> Var {
    let pooled = tape.gap(f);
    tape.linear(pooled, weight, bias)
}

// ---------------------------------------------------------------------------
// Segmentation head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegArchConfig {
    pub num_classes: usize,
    pub convs: Vec<ConvSpec>,
    /// Bilinear upsampling factor restoring input resolution.
    pub upsample: usize,
}

impl SegArchConfig {
    /// 3-layer FCN: one stride-2 stage, then bilinear x2 back to input size.
    pub fn small(num_classes: usize) -> Self {
        SegArchConfig {
            num_classes,
            convs: vec![
                ConvSpec { in_ch: 3, out_ch: 24, stride: 2 },
                ConvSpec { in_ch: 24, out_ch: 24, stride: 1 },
                ConvSpec { in_ch: 24, out_ch: num_classes + 1, stride: 1 },
            ],
            upsample: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmenterState<T: Elem> {
    pub arch: SegArchConfig,
    pub convs: Vec<ConvLayer<T>>,
    pub seed: u64,
}

impl<T: Elem> SegmenterState<T> {
    pub fn init(arch: SegArchConfig, seed: u64) -> Result<Self> {
        if arch.convs.is_empty() {
            return Err(RecamError::Config("segmenter needs at least one conv".into()));
        }
        let mut rng = stream(seed, Domain::SegmenterInit, 0);
        let convs = arch.convs.iter().map(|&s| he_conv(s, &mut rng)).collect();
        Ok(SegmenterState { arch, convs, seed })
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut v: Vec<ArrayViewMutD<'_, T>> = Vec::new();
        for l in &mut self.convs {
            v.push(l.weight.view_mut().into_dyn());
            v.push(l.bias.view_mut().into_dyn());
        }
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.convs.len())
            .flat_map(|i| [format!("seg{i}.weight"), format!("seg{i}.bias")])
            .collect()
    }
}

/// Per-pixel logits over `K+1` classes at input resolution.
pub fn segment<T: Elem>(pixels: ArrayView3<T>, state: &SegmenterState<T>) -> Result<Array3<T>> {
    let (h, w) = (pixels.dim().1, pixels.dim().2);
    let mut cur = pixels.to_owned();
    for (i, layer) in state.convs.iter().enumerate() {
        let (out, _) = autodiff::conv2d(
            cur.view(),
            layer.weight.view(),
            Some(layer.bias.view()),
            KERNEL,
            layer.spec.stride,
            PAD,
        );
        // Logit layer stays linear.
        cur = if i + 1 == state.convs.len() { out } else { out.mapv(|v| v.max(T::zero())) };
    }
    let up = autodiff::bilinear_upsample(cur.view(), state.arch.upsample);
    debug_assert_eq!((up.dim().1, up.dim().2), (h, w));
    Ok(up)
}

/// Segmenter forward on tape. Returns (param vars, logits var).
pub fn tape_segment<T: Elem>(
    tape: &mut Tape<T>,
    x: Var,
    state: &SegmenterState<T>,
) -> (Vec<Var>, Var) {
    let mut params = Vec::new();
    let mut cur = x;
    let n = state.convs.len();
    for (i, layer) in state.convs.iter().enumerate() {
        let w = tape.leaf(layer.weight.clone().into_dyn(), true);
        let b = tape.leaf(layer.bias.clone().into_dyn(), true);
        params.push(w);
        params.push(b);
        cur = tape.conv2d(cur, w, Some(b), KERNEL, layer.spec.stride, PAD);
        if i + 1 != n {
            cur = tape.relu(cur);
        }
    }
    let up = tape.bilinear_up(cur, state.arch.upsample);
    (params, up)
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "RCAM1"
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 5] = b"RCAM1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    classifier: Option<ArchConfig>,
    segmenter: Option<SegArchConfig>,
    lambda: f64,
    seed: u64,
}

fn write_arrays<W: Write>(
    out: &mut W,
    names: &[String],
    arrays: &[ArrayViewD<'_, f32>],
) -> std::io::Result<()> {
    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, arr) in names.iter().zip(arrays.iter()) {
        let nb = name.as_bytes();
        out.write_all(&(nb.len() as u16).to_le_bytes())?;
        out.write_all(nb)?;
        out.write_all(&(arr.ndim() as u8).to_le_bytes())?;
        for &d in arr.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in arr.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_arrays<R: Read>(inp: &mut R) -> Result<Vec<(String, ndarray::ArrayD<f32>)>> {
    let bad = |detail: &str| RecamError::Format { format: "RCAM1", detail: detail.into() };
    let mut u32buf = [0u8; 4];
    inp.read_exact(&mut u32buf).map_err(|_| bad("truncated array count"))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        inp.read_exact(&mut u16buf).map_err(|_| bad("truncated name length"))?;
        let mut name = vec![0u8; u16::from_le_bytes(u16buf) as usize];
        inp.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name not utf-8"))?;
        let mut d = [0u8; 1];
        inp.read_exact(&mut d).map_err(|_| bad("truncated ndim"))?;
        let mut shape = Vec::with_capacity(d[0] as usize);
        for _ in 0..d[0] {
            inp.read_exact(&mut u32buf).map_err(|_| bad("truncated shape"))?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0f32; len];
        for v in data.iter_mut() {
            inp.read_exact(&mut u32buf).map_err(|_| bad("truncated data"))?;
            *v = f32::from_le_bytes(u32buf);
        }
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|_| bad("shape/data mismatch"))?;
        arrays.push((name, arr));
    }
    Ok(arrays)
}

fn write_container(
    path: &Path,
    header: &CheckpointHeader,
    names: &[String],
    arrays: &[ArrayViewD<'_, f32>],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let hjson = serde_json::to_vec(header)
        .map_err(|e| RecamError::Format { format: "RCAM1", detail: e.to_string() })?;
    buf.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hjson);
    write_arrays(&mut buf, names, arrays).map_err(|e| RecamError::io(path, e))?;
    crate::pipeline::atomic_write(path, &buf)
}

fn read_container(path: &Path) -> Result<(CheckpointHeader, Vec<(String, ndarray::ArrayD<f32>)>)> {
    let bad = |detail: String| RecamError::Format { format: "RCAM1", detail };
    let data = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RecamError::MissingArtifact(path.to_path_buf()),
        _ => RecamError::io(path, e),
    })?;
    if data.len() < 9 || &data[..5] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(data[5..9].try_into().unwrap()) as usize;
    if data.len() < 9 + hlen {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&data[9..9 + hlen]).map_err(|e| bad(e.to_string()))?;
    let mut rest = &data[9 + hlen..];
    let arrays = read_arrays(&mut rest)?;
    Ok((header, arrays))
}

pub fn save_classifier(path: &Path, state: &ClassifierState<f32>) -> Result<()> {
    let header = CheckpointHeader {
        kind: "classifier".into(),
        classifier: Some(state.arch.clone()),
        segmenter: None,
        lambda: state.lambda,
        seed: state.seed,
    };
    write_container(path, &header, &state.param_names(), &state.params())
}

pub fn load_classifier(path: &Path) -> Result<ClassifierState<f32>> {
    let bad = |detail: String| RecamError::Format { format: "RCAM1", detail };
    let (header, arrays) = read_container(path)?;
    if header.kind != "classifier" {
        return Err(bad(format!("expected classifier checkpoint, found {}", header.kind)));
    }
    let arch = header.classifier.ok_or_else(|| bad("missing arch".into()))?;
    let mut state = ClassifierState::<f32>::init(arch, header.lambda, header.seed)?;
    let names = state.param_names();
    if names.len() != arrays.len() {
        return Err(bad(format!("expected {} arrays, found {}", names.len(), arrays.len())));
    }
    for ((name, arr), (expect_name, mut slot)) in
        arrays.into_iter().zip(names.iter().zip(state.params_mut()))
    {
        if &name != expect_name {
            return Err(bad(format!("array order: expected {expect_name}, found {name}")));
        }
        if slot.shape() != arr.shape() {
            return Err(bad(format!("shape mismatch on {name}")));
        }
        slot.assign(&arr);
    }
    Ok(state)
}

pub fn save_segmenter(path: &Path, state: &SegmenterState<f32>) -> Result<()> {
    let header = CheckpointHeader {
        kind: "segmenter".into(),
        classifier: None,
        segmenter: Some(state.arch.clone()),
        lambda: 0.0,
        seed: state.seed,
    };
    let names = state.param_names();
    let mut views: Vec<ArrayViewD<'_, f32>> = Vec::new();
    for l in &state.convs {
        views.push(l.weight.view().into_dyn());
        views.push(l.bias.view().into_dyn());
    }
    write_container(path, &header, &names, &views)
}

pub fn load_segmenter(path: &Path) -> Result<SegmenterState<f32>> {
    let bad = |detail: String| RecamError::Format { format: "RCAM1", detail };
    let (header, arrays) = read_container(path)?;
    if header.kind != "segmenter" {
        return Err(bad(format!("expected segmenter checkpoint, found {}", header.kind)));
    }
    let arch = header.segmenter.ok_or_else(|| bad("missing arch".into()))?;
    let mut state = SegmenterState::<f32>::init(arch, header.seed)?;
    let names = state.param_names();
    if names.len() != arrays.len() {
        return Err(bad("array count mismatch".into()));
    }
    for ((name, arr), (expect_name, mut slot)) in
        arrays.into_iter().zip(names.iter().zip(state.params_mut()))
    {
        if &name != expect_name {
            return Err(bad(format!("array order: expected {expect_name}, found {name}")));
        }
        slot.assign(&arr);
    }
    Ok(state)
}

/// Feature spatial dims for an image of the given size.
pub fn feature_dims(arch: &ArchConfig, h: usize, w: usize) -> (usize, usize) {
    let mut dims = (h, w);
    for c in &arch.convs {
        dims = (
            conv_out_dim(dims.0, KERNEL, c.stride, PAD),
            conv_out_dim(dims.1, KERNEL, c.stride, PAD),
        );
    }
    dims
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn zero_image(h: usize, w: usize) -> Array3<f64> {
        Array3::zeros((3, h, w))
    }

    #[test]
    fn encode_shape_and_determinism() {
        let arch = ArchConfig::small(5);
        assert_eq!(arch.stride(), 8);
        assert_eq!(arch.feat_channels(), 64);
        let state = ClassifierState::<f64>::init(arch, 1.0, 3).unwrap();
        let x = Array3::from_shape_fn((3, 64, 64), |(c, i, j)| {
            ((c * 31 + i * 7 + j) % 13) as f64 / 13.0
        });
        let f1 = encode(x.view(), &state).unwrap();
        let f2 = encode(x.view(), &state).unwrap();
        assert_eq!(f1.data.dim(), (64, 8, 8));
        assert_eq!(f1.data, f2.data);
        assert_eq!(f1.stride, 8);
    }

    #[test]
    fn encode_rejects_indivisible_dims() {
        let state = ClassifierState::<f64>::init(ArchConfig::small(5), 1.0, 3).unwrap();
        let x = zero_image(60, 64);
        assert!(matches!(encode(x.view(), &state), Err(RecamError::Config(_))));
    }

    #[test]
    fn zero_weights_give_zero_block() {
        let mut state = ClassifierState::<f64>::init(ArchConfig::tiny(4), 1.0, 3).unwrap();
        for l in &mut state.convs {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let x = Array3::from_elem((3, 16, 16), 0.0);
        let f = encode(x.view(), &state).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
        let z = classify_fc1(&f, &state).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fc1_matches_brute_force_gap_product() {
        let state = ClassifierState::<f64>::init(ArchConfig::tiny(4), 1.0, 9).unwrap();
        let f = FeatureBlock {
            data: Array3::from_shape_fn((8, 4, 4), |(c, i, j)| {
                ((c * 17 + i * 5 + j * 3) % 23) as f64 * 0.21 - 1.1
            }),
            stride: 4,
        };
        let z = classify_fc1(&f, &state).unwrap();
        for k in 0..4 {
            let mut expect = 0.0;
            for c in 0..8 {
                let mut mean = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        mean += f.data[(c, i, j)];
                    }
                }
                mean /= 16.0;
                expect += state.fc1[(k, c)] * mean;
            }
            assert!((z[k] - expect).abs() < 1e-12);
        }
        // Constant feature block: z_k = c * sum of row weights.
        let f = FeatureBlock { data: Array3::from_elem((8, 4, 4), 2.5), stride: 4 };
        let z = classify_fc1(&f, &state).unwrap();
        for k in 0..4 {
            let expect: f64 = state.fc1.row(k).sum() * 2.5;
            assert!((z[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fc1_is_linear_in_features_when_bias_free() {
        let state = ClassifierState::<f64>::init(ArchConfig::tiny(3), 1.0, 5).unwrap();
        let f = FeatureBlock {
            data: Array3::from_shape_fn((8, 4, 4), |(c, i, j)| (c + i + j) as f64 * 0.1),
            stride: 4,
        };
        let alpha = 3.7;
        let fa = FeatureBlock { data: f.data.mapv(|v| v * alpha), stride: 4 };
        let z = classify_fc1(&f, &state).unwrap();
        let za = classify_fc1(&fa, &state).unwrap();
        for k in 0..3 {
            assert!((za[k] - alpha * z[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn fc2_uses_its_own_weights() {
        let state = ClassifierState::<f64>::init(ArchConfig::tiny(3), 1.0, 5).unwrap();
        let f = FeatureBlock {
            data: Array3::from_shape_fn((8, 4, 4), |(c, i, j)| (c * 2 + i + j) as f64 * 0.05),
            stride: 4,
        };
        let z1 = classify_fc1(&f, &state).unwrap();
        let z2 = classify_fc2(&f, &state).unwrap();
        assert_ne!(z1, z2);
        let pooled = autodiff::gap(f.data.view());
        let expect = state.fc2.dot(&pooled);
        for k in 0..3 {
            assert!((z2[k] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_inference() {
        let state = ClassifierState::<f64>::init(ArchConfig::tiny(4), 1.0, 11).unwrap();
        let x = Array3::from_shape_fn((3, 16, 16), |(c, i, j)| {
            ((c * 13 + i * 3 + j * 7) % 19) as f64 / 19.0
        });
        let f_ref = encode(x.view(), &state).unwrap();
        let z_ref = classify_fc1(&f_ref, &state).unwrap();

        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone().into_dyn());
        let params = tape_params(&mut tape, &state, true);
        let f = tape_encode(&mut tape, xv, &params, &state.arch);
        let z = tape_head(&mut tape, f, params.fc1, params.fc1_bias);
        let zt = tape.value(z).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        assert_eq!(tape.value(f).shape(), f_ref.data.shape());
        for k in 0..4 {
            assert!((zt[k] - z_ref[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rcam");
        let state = ClassifierState::<f32>::init(ArchConfig::tiny(4), 0.5, 21).unwrap();
        save_classifier(&path, &state).unwrap();
        let loaded = load_classifier(&path).unwrap();
        assert_eq!(loaded.arch, state.arch);
        assert_eq!(loaded.lambda, state.lambda);
        assert_eq!(loaded.seed, state.seed);
        assert_eq!(loaded.fc1, state.fc1);
        assert_eq!(loaded.fc2, state.fc2);
        for (a, b) in loaded.convs.iter().zip(state.convs.iter()) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
        // Magic check.
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"RCAM1");
    }

    #[test]
    fn load_classifier_missing_file_is_missing_artifact() {
        let e = load_classifier(Path::new("/nonexistent/model.rcam"));
        assert!(matches!(e, Err(RecamError::MissingArtifact(_))));
    }

    #[test]
    fn segmenter_shapes_and_round_trip() {
        let arch = SegArchConfig::small(4);
        let state = SegmenterState::<f32>::init(arch, 7).unwrap();
        let x = Array3::from_shape_fn((3, 32, 32), |(c, i, j)| ((c + i * 2 + j) % 9) as f32 / 9.0);
        let z = segment(x.view(), &state).unwrap();
        assert_eq!(z.dim(), (5, 32, 32));
        let z2 = segment(x.view(), &state).unwrap();
        assert_eq!(z, z2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.rcam");
        save_segmenter(&path, &state).unwrap();
        let loaded = load_segmenter(&path).unwrap();
        assert_eq!(loaded.convs[0].weight, state.convs[0].weight);
    }

    #[test]
    fn params_roundtrip_via_views() {
        let mut state = ClassifierState::<f64>::init(ArchConfig::tiny(4), 1.0, 3).unwrap();
        let names = state.param_names();
        assert_eq!(names.len(), state.params().len());
        let deltas: Vec<ArrayD<f64>> = state
            .params()
            .iter()
            .map(|p| ArrayD::from_elem(IxDyn(p.shape()), 0.25))
            .collect();
        let before: Vec<f64> = state.params().iter().map(|p| p.sum()).collect();
        for (mut p, d) in state.params_mut().into_iter().zip(deltas.iter()) {
            p += d;
        }
        let after: Vec<f64> = state.params().iter().map(|p| p.sum()).collect();
        for ((b, a), p) in before.iter().zip(after.iter()).zip(state.params().iter()) {
            assert!((a - b - 0.25 * p.len() as f64).abs() < 1e-9);
        }
    }
}
