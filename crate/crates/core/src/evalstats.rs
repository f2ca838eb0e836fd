//! Pseudo-mask evaluation: thresholding, mIoU, the pixel flaw taxonomy,
//! threshold grid search, and the single/multi-label decomposition.
//!
//! IoU is aggregated from corpus-total confusion counts (not averaged
//! per image). Pixels labelled 255 in the ground truth are ignored
//! everywhere. Percentages in the flaw taxonomy use the common
//! denominator `TP + FN + FP_bg`, so those three add to 100%.

use crate::activation::ActivationMap;
use crate::autodiff::Elem;
use crate::error::{RecamError, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const IGNORE: u8 = 255;

/// Hard per-pixel assignment: 0 background, `k+1` for class `k`.
#[derive(Debug, Clone)]
pub struct PseudoMask {
    pub grid: Array2<u8>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    /// Seed method, e.g. "cam" or "recam:product".
    pub seed_method: String,
    /// Refinement steps applied, in order (e.g. "climb", "walk").
    pub refinement: Vec<String>,
    pub threshold: f64,
}

impl PseudoMask {
    pub fn new(grid: Array2<u8>, provenance: Provenance) -> Result<Self> {
        if provenance.seed_method.is_empty() {
            return Err(RecamError::Contract("provenance must name the seed method".into()));
        }
        Ok(PseudoMask { grid, provenance })
    }
}

/// Threshold per-class maps into a hard mask. Only the provided
/// (positive-label) classes participate; a pixel above `theta` on at
/// least one map gets the argmax class (ties broken by lowest class
/// index), otherwise background.
pub fn threshold_maps<T: Elem>(
    maps: &[ActivationMap<T>],
    theta: f64,
    seed_method: &str,
) -> Result<PseudoMask> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(RecamError::Contract(format!("theta must lie in (0,1), got {theta}")));
    }
    let dims = match maps.first() {
        Some(m) => m.normalized.dim(),
        None => return Err(RecamError::Contract("no maps to threshold".into())),
    };
    let mut grid = Array2::<u8>::zeros(dims);
    let th = T::from_f64(theta);
    for (idx, cell) in grid.indexed_iter_mut() {
        let mut best: Option<(usize, T)> = None;
        for m in maps {
            let v = m.normalized[idx];
            let better = match best {
                None => true,
                // Strict inequality: ties keep the earlier (lower) class.
                Some((bk, bv)) => v > bv || (v == bv && m.class_id < bk),
            };
            if better {
                best = Some((m.class_id, v));
            }
        }
        if let Some((k, v)) = best {
            if v > th {
                *cell = k as u8 + 1;
            }
        }
    }
    PseudoMask::new(
        grid,
        Provenance { seed_method: seed_method.into(), refinement: vec![], threshold: theta },
    )
}

/// Corpus-total confusion counts over `K+1` classes.
#[derive(Debug, Clone)]
pub struct ConfusionAccumulator {
    pub num_classes: usize,
    /// `counts[gt][pred]`, both in `0..=K`.
    counts: Vec<Vec<u64>>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        ConfusionAccumulator { num_classes, counts: vec![vec![0; num_classes + 1]; num_classes + 1] }
    }

    pub fn add(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(RecamError::Shape(format!(
                "pred {:?} vs gt {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == IGNORE {
                continue;
            }
            if g as usize > self.num_classes || p as usize > self.num_classes {
                return Err(RecamError::Contract(format!(
                    "mask value out of range: pred {p}, gt {g}"
                )));
            }
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    /// Per-class IoU; `None` when the class appears in neither
    /// prediction nor ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k1 = self.num_classes + 1;
        (0..k1)
            .map(|c| {
                let tp = self.counts[c][c];
                let fp: u64 = (0..k1).filter(|&g| g != c).map(|g| self.counts[g][c]).sum();
                let fn_: u64 = (0..k1).filter(|&p| p != c).map(|p| self.counts[c][p]).sum();
                if tp + fp + fn_ == 0 {
                    None
                } else {
                    Some(tp as f64 / (tp + fp + fn_) as f64)
                }
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let k1 = self.num_classes + 1;
        let correct: u64 = (0..k1).map(|c| self.counts[c][c]).sum();
        let total: u64 = self.counts.iter().flatten().sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// Macro F1 (Dice) over classes present somewhere.
    pub fn f1(&self) -> f64 {
        let k1 = self.num_classes + 1;
        let mut scores = Vec::new();
        for c in 0..k1 {
            let tp = self.counts[c][c];
            let fp: u64 = (0..k1).filter(|&g| g != c).map(|g| self.counts[g][c]).sum();
            let fn_: u64 = (0..k1).filter(|&p| p != c).map(|p| self.counts[c][p]).sum();
            if tp + fp + fn_ == 0 {
                continue;
            }
            scores.push(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64));
        }
        if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }

    pub fn flaw_counts(&self) -> FlawCounts {
        let k1 = self.num_classes + 1;
        let mut c = FlawCounts::default();
        for g in 0..k1 {
            for p in 0..k1 {
                let n = self.counts[g][p];
                match (g, p) {
                    (0, 0) => c.bg_correct += n,
                    (0, _) => c.fp_bg += n,
                    (_, 0) => c.fn_ += n,
                    (g, p) if g == p => c.tp += n,
                    _ => c.fp_obj += n,
                }
            }
        }
        c
    }
}

/// The pixel flaw taxonomy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlawCounts {
    /// Object pixels predicted with their own class.
    pub tp: u64,
    /// Predicted object `k`, actual object `j != k`.
    pub fp_obj: u64,
    /// Predicted object, actual background.
    pub fp_bg: u64,
    /// Actual object, predicted background.
    pub fn_: u64,
    /// Background predicted as background (tracked separately so every
    /// non-ignore pixel lands in exactly one bucket).
    pub bg_correct: u64,
}

impl FlawCounts {
    /// Percentages over the common denominator `TP + FN + FP_bg`.
    pub fn percentages(&self) -> FlawPercentages {
        let denom = (self.tp + self.fn_ + self.fp_bg) as f64;
        let pct = |v: u64| if denom > 0.0 { 100.0 * v as f64 / denom } else { 0.0 };
        FlawPercentages {
            tp: pct(self.tp),
            fp_obj: pct(self.fp_obj),
            fp_bg: pct(self.fp_bg),
            fn_: pct(self.fn_),
        }
    }

    pub fn total_non_ignore(&self) -> u64 {
        self.tp + self.fp_obj + self.fp_bg + self.fn_ + self.bg_correct
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlawPercentages {
    pub tp: f64,
    pub fp_obj: f64,
    pub fp_bg: f64,
    pub fn_: f64,
}

/// Evaluation summary for a mask set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub f1: f64,
    pub pixel_accuracy: f64,
    pub flaws: FlawCounts,
    pub flaw_percentages: FlawPercentages,
    /// mIoU over single-label images (absent when the subset is empty).
    pub single_miou: Option<f64>,
    /// mIoU over multi-label images (absent when the subset is empty).
    pub multi_miou: Option<f64>,
}

/// Aggregate mIoU/flaw statistics over a mask set.
pub fn evaluate_masks(
    preds: &[Array2<u8>],
    gts: &[Array2<u8>],
    num_classes: usize,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(RecamError::Contract(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut acc = ConfusionAccumulator::new(num_classes);
    for (p, g) in preds.iter().zip(gts.iter()) {
        acc.add(p, g)?;
    }
    Ok(report_from_accumulator(&acc, None, None))
}

fn report_from_accumulator(
    acc: &ConfusionAccumulator,
    single_miou: Option<f64>,
    multi_miou: Option<f64>,
) -> EvalReport {
    let flaws = acc.flaw_counts();
    EvalReport {
        per_class_iou: acc.per_class_iou(),
        mean_iou: acc.mean_iou(),
        f1: acc.f1(),
        pixel_accuracy: acc.pixel_accuracy(),
        flaws,
        flaw_percentages: flaws.percentages(),
        single_miou,
        multi_miou,
    }
}

/// Evaluate with the single/multi-label decomposition. `cardinality[i]`
/// is the positive-label count of image `i`.
pub fn evaluate_with_cardinality(
    preds: &[Array2<u8>],
    gts: &[Array2<u8>],
    cardinality: &[usize],
    num_classes: usize,
) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.len() != cardinality.len() {
        return Err(RecamError::Contract("pred/gt/cardinality length mismatch".into()));
    }
    let mut all = ConfusionAccumulator::new(num_classes);
    let mut single = ConfusionAccumulator::new(num_classes);
    let mut multi = ConfusionAccumulator::new(num_classes);
    for ((p, g), &card) in preds.iter().zip(gts.iter()).zip(cardinality.iter()) {
        all.add(p, g)?;
        if card <= 1 {
            single.add(p, g)?;
        } else {
            multi.add(p, g)?;
        }
    }
    let has = |acc: &ConfusionAccumulator| acc.counts.iter().flatten().any(|&v| v > 0);
    let single_miou = has(&single).then(|| single.mean_iou());
    let multi_miou = has(&multi).then(|| multi.mean_iou());
    Ok(report_from_accumulator(&all, single_miou, multi_miou))
}

/// Grid search for the mask threshold: returns the argmax-mIoU theta
/// (ties go to the smaller theta) and the full curve.
pub fn search_threshold<T: Elem>(
    maps_per_image: &[Vec<ActivationMap<T>>],
    gts: &[Array2<u8>],
    grid: &[f64],
    num_classes: usize,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(RecamError::Contract("threshold grid is empty".into()));
    }
    if grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(RecamError::Contract("thresholds must lie in (0,1)".into()));
    }
    if maps_per_image.len() != gts.len() {
        return Err(RecamError::Contract("maps/gt length mismatch".into()));
    }
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite thresholds"));
    for &theta in &sorted {
        let mut acc = ConfusionAccumulator::new(num_classes);
        for (maps, gt) in maps_per_image.iter().zip(gts.iter()) {
            if maps.is_empty() {
                // No positive classes: all-background prediction.
                acc.add(&Array2::zeros(gt.dim()), gt)?;
                continue;
            }
            let mask = threshold_maps(maps, theta, "search")?;
            acc.add(&mask.grid, gt)?;
        }
        let miou = acc.mean_iou();
        curve.push((theta, miou));
        // Strictly-greater keeps the smallest theta on ties.
        if best.map(|(_, b)| miou > b).unwrap_or(true) {
            best = Some((theta, miou));
        }
    }
    Ok((best.expect("nonempty grid").0, curve))
}

/// The default threshold grid: 0.05..=0.60 step 0.01.
pub fn default_threshold_grid() -> Vec<f64> {
    (5..=60).map(|i| i as f64 / 100.0).collect()
}

/// Serialize a report to CSV rows (key,value pairs plus per-class IoU).
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("mean_iou,{}\n", report.mean_iou));
    out.push_str(&format!("f1,{}\n", report.f1));
    out.push_str(&format!("pixel_accuracy,{}\n", report.pixel_accuracy));
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => out.push_str(&format!("iou_class_{c},{v}\n")),
            None => out.push_str(&format!("iou_class_{c},absent\n")),
        }
    }
    out.push_str(&format!("tp,{}\n", report.flaws.tp));
    out.push_str(&format!("fp_obj,{}\n", report.flaws.fp_obj));
    out.push_str(&format!("fp_bg,{}\n", report.flaws.fp_bg));
    out.push_str(&format!("fn,{}\n", report.flaws.fn_));
    out.push_str(&format!("bg_correct,{}\n", report.flaws.bg_correct));
    out.push_str(&format!("tp_pct,{}\n", report.flaw_percentages.tp));
    out.push_str(&format!("fp_obj_pct,{}\n", report.flaw_percentages.fp_obj));
    out.push_str(&format!("fp_bg_pct,{}\n", report.flaw_percentages.fp_bg));
    out.push_str(&format!("fn_pct,{}\n", report.flaw_percentages.fn_));
    match report.single_miou {
        Some(v) => out.push_str(&format!("single_miou,{v}\n")),
        None => out.push_str("single_miou,absent\n"),
    }
    match report.multi_miou {
        Some(v) => out.push_str(&format!("multi_miou,{v}\n")),
        None => out.push_str("multi_miou,absent\n"),
    }
    out
}

/// Human-readable summary block.
pub fn report_summary(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "mIoU {:.4}  F1 {:.4}  pixel-acc {:.4}\n",
        report.mean_iou, report.f1, report.pixel_accuracy
    ));
    s.push_str(&format!(
        "flaws: TP {} ({:.1}%)  FP-obj {} ({:.1}%)  FP-bg {} ({:.1}%)  FN {} ({:.1}%)\n",
        report.flaws.tp,
        report.flaw_percentages.tp,
        report.flaws.fp_obj,
        report.flaw_percentages.fp_obj,
        report.flaws.fp_bg,
        report.flaw_percentages.fp_bg,
        report.flaws.fn_,
        report.flaw_percentages.fn_,
    ));
    match (report.single_miou, report.multi_miou) {
        (Some(s1), Some(m)) => s.push_str(&format!("single mIoU {s1:.4}  multi mIoU {m:.4}\n")),
        (Some(s1), None) => s.push_str(&format!("single mIoU {s1:.4}  multi mIoU absent\n")),
        (None, Some(m)) => s.push_str(&format!("single mIoU absent  multi mIoU {m:.4}\n")),
        (None, None) => {}
    }
    s
}
