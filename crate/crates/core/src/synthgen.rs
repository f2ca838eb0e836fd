//! Deterministic synthetic corpus with pixel-level ground truth.
//!
//! The corpus is built to stress class exclusion: classes inside a
//! *confusable group* share silhouette family and texture, differing
//! only in a small colored marker patch at the object center (the
//! discriminative detail). Distractor classes get distinct shapes and
//! textures. Every sample derives all of its randomness from the stream
//! `(spec.seed, DatasetSample, index)`, so regenerating any sample
//! independently yields identical pixels.

use crate::error::{RecamError, Result};
use crate::pipeline::atomic_write;
use crate::refine::BoundaryMap;
use crate::rngstream::{stream, Domain};
use ndarray::{Array2, Array3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub confusable_groups: Vec<Vec<usize>>,
    pub image_size: (usize, usize),
    /// Probability that a sample carries exactly one foreground class.
    pub single_label_fraction: f64,
    pub max_objects_per_image: usize,
    /// Number of distinct background texture styles (1..=3).
    pub background_styles: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Default corpus: a 5-class confusable group plus 3 distractors,
    /// 64x64, multi-label regime.
    pub fn default_corpus(seed: u64) -> Self {
        DatasetSpec {
            num_classes: 8,
            confusable_groups: vec![vec![0, 1, 2, 3, 4]],
            image_size: (64, 64),
            single_label_fraction: 0.4,
            max_objects_per_image: 3,
            background_styles: 3,
            seed,
        }
    }

    /// The single-label toy corpus: 5 confusable classes only.
    pub fn single_label_toy(seed: u64) -> Self {
        DatasetSpec {
            num_classes: 5,
            confusable_groups: vec![vec![0, 1, 2, 3, 4]],
            image_size: (64, 64),
            single_label_fraction: 1.0,
            max_objects_per_image: 1,
            background_styles: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(RecamError::Config(m));
        if self.num_classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_classes > 254 {
            return err("class count exceeds the 8-bit mask encoding (255 is ignore)".into());
        }
        for g in &self.confusable_groups {
            if g.len() < 2 {
                return err(format!("confusable group {g:?} has fewer than 2 classes"));
            }
            if g.iter().any(|&k| k >= self.num_classes) {
                return err(format!("confusable group {g:?} has out-of-range class index"));
            }
        }
        let mut seen = vec![false; self.num_classes];
        for g in &self.confusable_groups {
            for &k in g {
                if seen[k] {
                    return err(format!("class {k} appears in two confusable groups"));
                }
                seen[k] = true;
            }
        }
        if !(0.0..=1.0).contains(&self.single_label_fraction) {
            return err("single_label_fraction must be in [0, 1]".into());
        }
        if self.max_objects_per_image == 0 {
            return err("max_objects_per_image must be positive".into());
        }
        if self.single_label_fraction < 1.0
            && (self.max_objects_per_image < 2 || self.max_objects_per_image > self.num_classes)
        {
            return err("multi-label sampling needs 2 <= max_objects_per_image <= num_classes".into());
        }
        if self.background_styles == 0 || self.background_styles > 3 {
            return err("background_styles must be in 1..=3".into());
        }
        if self.image_size.0 < 24 || self.image_size.1 < 24 {
            return err("image_size must be at least 24x24".into());
        }
        Ok(())
    }

    /// Which confusable group (if any) a class belongs to, and its
    /// position within the group.
    fn group_membership(&self, class: usize) -> Option<(usize, usize)> {
        for (gi, g) in self.confusable_groups.iter().enumerate() {
            if let Some(pos) = g.iter().position(|&k| k == class) {
                return Some((gi, pos));
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// `(3, H, W)`, values quantized to the 8-bit grid in `[0, 1]`.
    pub pixels: Array3<f32>,
    /// Multi-hot label, length `num_classes`.
    pub label: Vec<u8>,
    /// Per-pixel class: 0 = background, `k+1` = class `k`.
    pub gt_mask: Array2<u8>,
}

impl ImageSample {
    pub fn positives(&self) -> Vec<usize> {
        self.label.iter().enumerate().filter(|(_, &v)| v == 1).map(|(k, _)| k).collect()
    }

    pub fn is_single_label(&self) -> bool {
        self.label.iter().filter(|&&v| v == 1).count() == 1
    }
}

/// Index base for validation samples: keeps the validation stream space
/// disjoint from training regardless of the training count.
pub const VAL_INDEX_BASE: u64 = 1 << 40;

const MARKER_SIZE: usize = 4;

/// Marker hues for members of a confusable group. Deliberately close:
/// the markers must be separable from their pixels (a probe on the
/// marker region reaches >0.9 accuracy) while exciting nearly the same
/// early color features, so that a non-exclusive loss lets the group
/// members' logits rise together.
const MARKER_HUE_STEP: f64 = 24.0;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct ObjectParams {
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    aspect: f64,
    rot: f64,
    wobble_phase: [f64; 2],
    tex_angle: f64,
    tex_phase: f64,
    tex_period: f64,
    base_color: [f64; 3],
    alt_color: [f64; 3],
    marker_color: Option<[f64; 3]>,
    shape: ShapeKind,
}

#[derive(Clone, Copy, PartialEq)]
enum ShapeKind {
    Blob,
    Triangle,
    Ring,
    Cross,
}

impl ObjectParams {
    fn contains(&self, i: f64, j: f64) -> bool {
        let dx = j - self.cx;
        let dy = i - self.cy;
        let (sin, cos) = self.rot.sin_cos();
        let u = (dx * cos + dy * sin) / (self.radius * self.aspect);
        let v = (-dx * sin + dy * cos) / (self.radius / self.aspect);
        match self.shape {
            ShapeKind::Blob => {
                let rr = (u * u + v * v).sqrt();
                let phi = v.atan2(u);
                rr <= 1.0
                    + 0.16 * (3.0 * phi + self.wobble_phase[0]).sin()
                    + 0.09 * (5.0 * phi + self.wobble_phase[1]).sin()
            }
            ShapeKind::Triangle => {
                // Upright triangle in the unit box.
                v >= -1.0 && v <= 1.0 && u.abs() <= (1.0 - (v + 1.0) / 2.0)
            }
            ShapeKind::Ring => {
                let rr = (u * u + v * v).sqrt();
                (0.45..=1.0).contains(&rr)
            }
            ShapeKind::Cross => u.abs() <= 0.33 || v.abs() <= 0.33,
        }
    }

    fn texture(&self, i: f64, j: f64) -> [f64; 3] {
        let (sin, cos) = self.tex_angle.sin_cos();
        let t = (j - self.cx) * cos + (i - self.cy) * sin;
        let s = 0.5 + 0.5 * (t * std::f64::consts::TAU / self.tex_period + self.tex_phase).sin();
        [
            self.base_color[0] * (1.0 - s) + self.alt_color[0] * s,
            self.base_color[1] * (1.0 - s) + self.alt_color[1] * s,
            self.base_color[2] * (1.0 - s) + self.alt_color[2] * s,
        ]
    }

    fn marker_contains(&self, i: usize, j: usize) -> bool {
        if self.marker_color.is_none() {
            return false;
        }
        let half = MARKER_SIZE as isize / 2;
        let ci = self.cy.round() as isize;
        let cj = self.cx.round() as isize;
        let di = i as isize - ci;
        let dj = j as isize - cj;
        di >= -half && di < MARKER_SIZE as isize - half && dj >= -half && dj < MARKER_SIZE as isize - half
    }
}

/// Per-class visual family. Confusable classes share everything except
/// the marker; distractors differ in shape and texture colors.
fn object_params(
    spec: &DatasetSpec,
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    rng: &mut impl Rng,
) -> ObjectParams {
    let membership = spec.group_membership(class);
    let (shape, hue, marker_color) = match membership {
        Some((gi, pos)) => {
            let hue = 35.0 + 47.0 * gi as f64;
            let marker = hsv(pos as f64 * MARKER_HUE_STEP, 0.95, 0.95);
            (ShapeKind::Blob, hue, Some(marker))
        }
        None => {
            let shapes = [ShapeKind::Triangle, ShapeKind::Ring, ShapeKind::Cross];
            (shapes[class % 3], 190.0 + 53.0 * (class % 5) as f64, None)
        }
    };
    ObjectParams {
        class,
        cx,
        cy,
        radius,
        aspect: rng.random_range(0.85..1.18),
        rot: rng.random_range(0.0..std::f64::consts::PI),
        wobble_phase: [rng.random_range(0.0..6.28), rng.random_range(0.0..6.28)],
        tex_angle: rng.random_range(0.0..std::f64::consts::PI),
        tex_phase: rng.random_range(0.0..6.28),
        tex_period: rng.random_range(5.0..9.0),
        base_color: hsv(hue, 0.55, 0.55),
        alt_color: hsv(hue + 18.0, 0.45, 0.78),
        marker_color,
        shape,
    }
}

fn paint_background(
    pixels: &mut Array3<f32>,
    style: usize,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) {
    match style {
        0 => {
            // Vertical gradient between two muted colors.
            let c1 = hsv(rng.random_range(0.0..360.0), 0.18, rng.random_range(0.25..0.5));
            let c2 = hsv(rng.random_range(0.0..360.0), 0.18, rng.random_range(0.5..0.8));
            for i in 0..h {
                let t = i as f64 / (h - 1) as f64;
                for j in 0..w {
                    for c in 0..3 {
                        pixels[(c, i, j)] = (c1[c] * (1.0 - t) + c2[c] * t) as f32;
                    }
                }
            }
        }
        1 => {
            // Low-contrast value noise around a base color.
            let base = hsv(rng.random_range(0.0..360.0), 0.15, rng.random_range(0.35..0.65));
            for i in 0..h {
                for j in 0..w {
                    let n: f64 = rng.random_range(-0.08..0.08);
                    for c in 0..3 {
                        pixels[(c, i, j)] = (base[c] + n).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
        _ => {
            // Diagonal stripes.
            let c1 = hsv(rng.random_range(0.0..360.0), 0.2, rng.random_range(0.3..0.5));
            let c2 = hsv(rng.random_range(0.0..360.0), 0.2, rng.random_range(0.5..0.75));
            let period = rng.random_range(6..13) as usize;
            for i in 0..h {
                for j in 0..w {
                    let sel = ((i + j) / period) % 2 == 0;
                    let col = if sel { &c1 } else { &c2 };
                    for c in 0..3 {
                        pixels[(c, i, j)] = col[c] as f32;
                    }
                }
            }
        }
    }
}

fn draw_object(pixels: &mut Array3<f32>, mask: &mut Array2<u8>, obj: &ObjectParams) {
    let (h, w) = mask.dim();
    for i in 0..h {
        for j in 0..w {
            if obj.contains(i as f64, j as f64) {
                let col = if obj.marker_contains(i, j) {
                    obj.marker_color.expect("marker color present")
                } else {
                    obj.texture(i as f64, j as f64)
                };
                for c in 0..3 {
                    pixels[(c, i, j)] = col[c] as f32;
                }
                mask[(i, j)] = obj.class as u8 + 1;
            }
        }
    }
}

fn silhouette_overlap(mask: &Array2<u8>, obj: &ObjectParams) -> (usize, usize) {
    let (h, w) = mask.dim();
    let mut total = 0usize;
    let mut occupied = 0usize;
    for i in 0..h {
        for j in 0..w {
            if obj.contains(i as f64, j as f64) {
                total += 1;
                if mask[(i, j)] != 0 {
                    occupied += 1;
                }
            }
        }
    }
    (total, occupied)
}

/// Generate the sample at `index`. Pure function of `(spec.seed, index)`.
pub fn generate_sample(spec: &DatasetSpec, index: u64) -> ImageSample {
    let (h, w) = spec.image_size;
    let mut rng = stream(spec.seed, Domain::DatasetSample, index);

    // Sampling rule (the documented distribution the histogram oracle
    // integrates over): Bernoulli(single_label_fraction) chooses the
    // single-label regime; multi-label images draw their object count
    // uniformly from 2..=max_objects_per_image; classes are distinct
    // and uniform over 0..K.
    let single = rng.random::<f64>() < spec.single_label_fraction;
    let n_obj = if single { 1 } else { rng.random_range(2..=spec.max_objects_per_image) };
    let mut pool: Vec<usize> = (0..spec.num_classes).collect();
    let mut classes = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let pick = rng.random_range(0..pool.len());
        classes.push(pool.swap_remove(pick));
    }

    let mut pixels = Array3::<f32>::zeros((3, h, w));
    let mut mask = Array2::<u8>::zeros((h, w));
    let style = rng.random_range(0..spec.background_styles);
    paint_background(&mut pixels, style, h, w, &mut rng);

    let d = h.min(w) as f64;
    let place = |rng: &mut rand_chacha::ChaCha8Rng| -> (f64, f64, f64) {
        let radius = rng.random_range(d / 7.5..d / 4.8);
        let margin = radius * 1.35 + 1.0;
        let cy = rng.random_range(margin..(h as f64 - margin));
        let cx = rng.random_range(margin..(w as f64 - margin));
        (cx, cy, radius)
    };

    for &class in &classes {
        let mut chosen = None;
        for _attempt in 0..20 {
            let (cx, cy, radius) = place(&mut rng);
            let candidate = object_params(spec, class, cx, cy, radius, &mut rng);
            let (total, occupied) = silhouette_overlap(&mask, &candidate);
            if total > 0 && (occupied as f64) / (total as f64) <= 0.3 {
                chosen = Some(candidate);
                break;
            }
            if chosen.is_none() {
                chosen = Some(candidate); // fallback: keep the last try
            }
        }
        draw_object(&mut pixels, &mut mask, &chosen.expect("at least one placement attempt"));
    }

    // Painter's order can occlude earlier objects; guarantee every
    // intended class keeps a visible footprint by re-placing starved
    // objects on top.
    for &class in &classes {
        for _attempt in 0..10 {
            let count = mask.iter().filter(|&&v| v == class as u8 + 1).count();
            if count >= 8 {
                break;
            }
            let (cx, cy, radius) = place(&mut rng);
            let obj = object_params(spec, class, cx, cy, radius, &mut rng);
            draw_object(&mut pixels, &mut mask, &obj);
        }
    }

    // Global pixel noise, then quantize to the 8-bit grid so the
    // in-memory corpus matches its PNG round trip bit for bit.
    for v in pixels.iter_mut() {
        let n: f64 = rng.random_range(-0.02..0.02);
        let q = ((*v as f64 + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        *v = q as f32;
    }

    let mut label = vec![0u8; spec.num_classes];
    for &v in mask.iter() {
        if v > 0 {
            label[v as usize - 1] = 1;
        }
    }

    ImageSample { id: format!("s{index:012}"), pixels, label, gt_mask: mask }
}

/// Generate `count` samples starting at stream index `base_index`.
pub fn generate_split(spec: &DatasetSpec, count: usize, base_index: u64) -> Result<Vec<ImageSample>> {
    if count == 0 {
        return Err(RecamError::Contract("count must be >= 1".into()));
    }
    spec.validate()?;
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| generate_sample(spec, base_index + i))
        .collect())
}

/// The spec-level entry point: training-style indices `0..count`.
pub fn generate_dataset(spec: &DatasetSpec, count: usize) -> Result<Vec<ImageSample>> {
    generate_split(spec, count, 0)
}

/// Ground-truth boundary map: 1 where `gt_mask` differs from any
/// 4-neighbor, 0 elsewhere; optionally blurred with a box filter of the
/// given radius (0 = no blur).
pub fn boundary_oracle(gt_mask: &Array2<u8>, blur_radius: usize) -> BoundaryMap {
    let (h, w) = gt_mask.dim();
    let mut b = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let v = gt_mask[(i, j)];
            let mut boundary = false;
            if i > 0 && gt_mask[(i - 1, j)] != v {
                boundary = true;
            }
            if i + 1 < h && gt_mask[(i + 1, j)] != v {
                boundary = true;
            }
            if j > 0 && gt_mask[(i, j - 1)] != v {
                boundary = true;
            }
            if j + 1 < w && gt_mask[(i, j + 1)] != v {
                boundary = true;
            }
            if boundary {
                b[(i, j)] = 1.0;
            }
        }
    }
    if blur_radius > 0 {
        b = box_blur(&b, blur_radius);
    }
    BoundaryMap::new(b).expect("boundary values stay in [0,1]")
}

/// Image-gradient boundary estimate (ablation alternative to the
/// oracle): Sobel magnitude on the luma channel, max-normalized.
pub fn boundary_from_image(pixels: &Array3<f32>, blur_radius: usize) -> BoundaryMap {
    let (_, h, w) = pixels.dim();
    let luma = Array2::from_shape_fn((h, w), |(i, j)| {
        0.299 * pixels[(0, i, j)] + 0.587 * pixels[(1, i, j)] + 0.114 * pixels[(2, i, j)]
    });
    let mut grad = Array2::<f32>::zeros((h, w));
    let px = |i: isize, j: isize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        luma[(i, j)]
    };
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gx = px(i - 1, j + 1) + 2.0 * px(i, j + 1) + px(i + 1, j + 1)
                - px(i - 1, j - 1)
                - 2.0 * px(i, j - 1)
                - px(i + 1, j - 1);
            let gy = px(i + 1, j - 1) + 2.0 * px(i + 1, j) + px(i + 1, j + 1)
                - px(i - 1, j - 1)
                - 2.0 * px(i - 1, j)
                - px(i - 1, j + 1);
            grad[(i as usize, j as usize)] = (gx * gx + gy * gy).sqrt();
        }
    }
    let m = grad.fold(0.0f32, |a, &b| a.max(b));
    if m > 0.0 {
        grad.mapv_inplace(|v| v / m);
    }
    if blur_radius > 0 {
        grad = box_blur(&grad, blur_radius);
    }
    BoundaryMap::new(grad).expect("normalized gradient stays in [0,1]")
}

fn box_blur(src: &Array2<f32>, radius: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let r = radius as isize;
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0f32;
            let mut n = 0u32;
            for di in -r..=r {
                for dj in -r..=r {
                    let ii = i + di;
                    let jj = j + dj;
                    if ii >= 0 && jj >= 0 && ii < h as isize && jj < w as isize {
                        acc += src[(ii as usize, jj as usize)];
                        n += 1;
                    }
                }
            }
            out[(i as usize, j as usize)] = acc / n as f32;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Corpus on disk
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: DatasetSpec,
    pub train_count: usize,
    pub val_count: usize,
    /// SHA-256 over all artifact bytes in directory order.
    pub content_hash: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: DatasetSpec,
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
}

impl Corpus {
    pub fn generate(spec: &DatasetSpec, train_count: usize, val_count: usize) -> Result<Corpus> {
        Ok(Corpus {
            spec: spec.clone(),
            train: generate_split(spec, train_count, 0)?,
            val: generate_split(spec, val_count, VAL_INDEX_BASE)?,
        })
    }
}

fn encode_png_rgb(pixels: &Array3<f32>) -> Result<Vec<u8>> {
    let (_, h, w) = pixels.dim();
    let mut raw = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                raw.push((pixels[(c, i, j)] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| RecamError::Format { format: "png", detail: "raw buffer size".into() })?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| RecamError::Format { format: "png", detail: e.to_string() })?;
    Ok(out.into_inner())
}

fn encode_png_gray(mask: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().copied().collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| RecamError::Format { format: "png", detail: "raw buffer size".into() })?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| RecamError::Format { format: "png", detail: e.to_string() })?;
    Ok(out.into_inner())
}

/// Write a corpus: `images/*.png`, `masks/*.png`, `labels.csv`,
/// `manifest.json`. Returns the manifest.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<CorpusManifest> {
    let mut hasher = Sha256::new();
    let mut labels_csv = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut labels_csv);
        let mut header = vec!["id".to_string(), "split".to_string()];
        header.extend((0..corpus.spec.num_classes).map(|k| format!("k_{k}")));
        wtr.write_record(&header)
            .map_err(|e| RecamError::Format { format: "csv", detail: e.to_string() })?;
        for (split, samples) in [("train", &corpus.train), ("val", &corpus.val)] {
            for s in samples {
                let mut rec = vec![s.id.clone(), split.to_string()];
                rec.extend(s.label.iter().map(|v| v.to_string()));
                wtr.write_record(&rec)
                    .map_err(|e| RecamError::Format { format: "csv", detail: e.to_string() })?;
            }
        }
        wtr.flush().map_err(|e| RecamError::io(dir.join("labels.csv"), e))?;
    }

    for samples in [&corpus.train, &corpus.val] {
        for s in samples {
            let png = encode_png_rgb(&s.pixels)?;
            let mpng = encode_png_gray(&s.gt_mask)?;
            hasher.update(s.id.as_bytes());
            hasher.update(&png);
            hasher.update(&mpng);
            atomic_write(&dir.join("images").join(format!("{}.png", s.id)), &png)?;
            atomic_write(&dir.join("masks").join(format!("{}.png", s.id)), &mpng)?;
        }
    }
    hasher.update(&labels_csv);
    atomic_write(&dir.join("labels.csv"), &labels_csv)?;

    let manifest = CorpusManifest {
        spec: corpus.spec.clone(),
        train_count: corpus.train.len(),
        val_count: corpus.val.len(),
        content_hash: hasher.finalize().iter().map(|b| format!("{b:02x}")).collect(),
    };
    let mjson = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| RecamError::Format { format: "json", detail: e.to_string() })?;
    atomic_write(&dir.join("manifest.json"), &mjson)?;
    Ok(manifest)
}

/// Load a corpus directory written by [`write_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let mbytes = std::fs::read(&manifest_path)
        .map_err(|_| RecamError::MissingArtifact(manifest_path.clone()))?;
    let manifest: CorpusManifest = serde_json::from_slice(&mbytes)
        .map_err(|e| RecamError::Format { format: "json", detail: e.to_string() })?;

    let labels_path = dir.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&labels_path)
        .map_err(|_| RecamError::MissingArtifact(labels_path.clone()))?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| RecamError::Format { format: "csv", detail: e.to_string() })?;
        let id = rec[0].to_string();
        let split = rec[1].to_string();
        let label: Vec<u8> = (0..manifest.spec.num_classes)
            .map(|k| rec[2 + k].parse::<u8>().unwrap_or(0))
            .collect();

        let img_path = dir.join("images").join(format!("{id}.png"));
        let img = image::open(&img_path)
            .map_err(|_| RecamError::MissingArtifact(img_path.clone()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut pixels = Array3::<f32>::zeros((3, h as usize, w as usize));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c, y as usize, x as usize)] = p.0[c] as f32 / 255.0;
            }
        }

        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let mimg = image::open(&mask_path)
            .map_err(|_| RecamError::MissingArtifact(mask_path.clone()))?
            .to_luma8();
        let gt_mask = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
            mimg.get_pixel(j as u32, i as u32).0[0]
        });

        let sample = ImageSample { id, pixels, label, gt_mask };
        if split == "train" {
            train.push(sample);
        } else {
            val.push(sample);
        }
    }
    Ok(Corpus { spec: manifest.spec, train, val })
}
