//! Classification and segmentation losses with closed-form gradients.
//!
//! Everything here is a pure scalar/vector computation, written in a
//! numerically stable shifted-exponent form so that logits of magnitude
//! 50 stay exact to ~1e-12. The gradient functions are closed forms, not
//! autodiff outputs; tests check them against central finite differences
//! of the loss functions.

use crate::autodiff::{log_softmax, sigmoid, softmax, Elem};
use crate::error::{RecamError, Result};
use ndarray::{Array1, ArrayView1, ArrayView2, ArrayView3};

/// Mixing configuration for the combined objective.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the SCE term; 0 degenerates to the BCE-only baseline.
    pub lambda: f64,
    pub num_classes: usize,
}

impl LossConfig {
    pub fn new(lambda: f64, num_classes: usize) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(RecamError::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        if num_classes == 0 {
            return Err(RecamError::Config("num_classes must be positive".into()));
        }
        Ok(LossConfig { lambda, num_classes })
    }
}

fn softplus<T: Elem>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_dims<T: Elem>(z: ArrayView1<T>, y: ArrayView1<T>) -> Result<()> {
    if z.len() != y.len() {
        return Err(RecamError::Contract(format!(
            "logit/label dimension mismatch: {} vs {}",
            z.len(),
            y.len()
        )));
    }
    if z.is_empty() {
        return Err(RecamError::Contract("empty logit vector".into()));
    }
    Ok(())
}

/// Mean sigmoid binary cross-entropy over the K classes.
pub fn bce_loss<T: Elem>(z: ArrayView1<T>, y: ArrayView1<T>) -> Result<T> {
    check_dims(z, y)?;
    let k_inv = T::from_f64(1.0 / z.len() as f64);
    let mut loss = T::zero();
    for (&zi, &yi) in z.iter().zip(y.iter()) {
        // -y log sig(z) - (1-y) log(1-sig(z)) == y softplus(-z) + (1-y) softplus(z)
        loss = loss + yi * softplus(-zi) + (T::one() - yi) * softplus(zi);
    }
    Ok(loss * k_inv)
}

/// Gradient of [`bce_loss`] on the logits: `(sigmoid(z) - y) / K`.
pub fn grad_bce<T: Elem>(z: ArrayView1<T>, y: ArrayView1<T>) -> Result<Array1<T>> {
    check_dims(z, y)?;
    let k_inv = T::from_f64(1.0 / z.len() as f64);
    Ok(z.iter().zip(y.iter()).map(|(&zi, &yi)| (sigmoid(zi) - yi) * k_inv).collect())
}

/// Softmax cross-entropy on class-masked features: one logit vector per
/// positive class, in ascending order of positive class index. Averaged
/// over the positive classes.
pub fn sce_loss<T: Elem>(
    per_class_logits: &[ArrayView1<T>],
    y: ArrayView1<T>,
) -> Result<T> {
    let positives: Vec<usize> =
        y.iter().enumerate().filter(|(_, &v)| v > T::zero()).map(|(i, _)| i).collect();
    if positives.is_empty() {
        return Err(RecamError::Contract("sce_loss undefined for all-zero labels".into()));
    }
    if per_class_logits.len() != positives.len() {
        return Err(RecamError::Contract(format!(
            "expected {} per-class logit vectors, got {}",
            positives.len(),
            per_class_logits.len()
        )));
    }
    let mut loss = T::zero();
    for (&k, z) in positives.iter().zip(per_class_logits.iter()) {
        if z.len() != y.len() {
            return Err(RecamError::Contract("per-class logit dimension mismatch".into()));
        }
        loss = loss - log_softmax(*z)[k];
    }
    Ok(loss * T::from_f64(1.0 / positives.len() as f64))
}

/// Plain softmax cross-entropy against a soft target distribution
/// (one-hot for the vanilla case, a normalized multi-hot for the
/// "SCE only" baseline).
pub fn sce_soft_target<T: Elem>(z: ArrayView1<T>, target: ArrayView1<T>) -> Result<T> {
    check_dims(z, target)?;
    let ls = log_softmax(z);
    let mut loss = T::zero();
    for (&li, &ti) in ls.iter().zip(target.iter()) {
        loss = loss - ti * li;
    }
    Ok(loss)
}

/// Gradient of the vanilla SCE on the logits: `softmax(z) - y`.
/// `y` must be one-hot.
pub fn grad_sce<T: Elem>(z: ArrayView1<T>, y: ArrayView1<T>) -> Result<Array1<T>> {
    check_dims(z, y)?;
    let ones = y.iter().filter(|&&v| v == T::one()).count();
    let zeros = y.iter().filter(|&&v| v == T::zero()).count();
    if ones != 1 || ones + zeros != y.len() {
        return Err(RecamError::Contract("grad_sce requires a one-hot label".into()));
    }
    let sm = softmax(z);
    Ok(sm.iter().zip(y.iter()).map(|(&si, &yi)| si - yi).collect())
}

/// Combined objective: `bce + lambda * sce`.
pub fn recam_loss(bce: f64, sce: f64, cfg: &LossConfig) -> f64 {
    bce + cfg.lambda * sce
}

/// Mean per-pixel softmax cross-entropy over `K+1` classes.
///
/// `z_grid` is `(K+1, H, W)`; `labels` holds per-pixel class indices with
/// 255 marking ignored pixels, which are excluded from the mean.
pub fn seg_loss<T: Elem>(z_grid: ArrayView3<T>, labels: ArrayView2<u8>) -> Result<T> {
    let (k1, h, w) = z_grid.dim();
    if (h, w) != labels.dim() {
        return Err(RecamError::Shape(format!(
            "seg logits {:?} vs labels {:?}",
            (h, w),
            labels.dim()
        )));
    }
    let mut loss = T::zero();
    let mut n_valid = 0usize;
    for i in 0..h {
        for j in 0..w {
            let cls = labels[(i, j)];
            if cls == 255 {
                continue;
            }
            if cls as usize >= k1 {
                return Err(RecamError::Contract(format!(
                    "label {cls} exceeds class count {k1}"
                )));
            }
            let col: Array1<T> = (0..k1).map(|k| z_grid[(k, i, j)]).collect();
            loss = loss - log_softmax(col.view())[cls as usize];
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Err(RecamError::Contract("all pixels ignored".into()));
    }
    Ok(loss * T::from_f64(1.0 / n_valid as f64))
}

/// One row of the two-class gradient-regime table.
#[derive(Debug, Clone, Copy)]
pub struct RegimeRow {
    pub z_p: f64,
    pub z_q: f64,
    /// |d L_bce / d z_p|
    pub g1: f64,
    /// |d L_bce / d z_q|
    pub g2: f64,
    /// |d L_sce / d z_p|
    pub g3: f64,
    /// |d L_sce / d z_q|
    pub g4: f64,
}

/// Gradient magnitudes of BCE and vanilla SCE for the binary case with
/// positive class `p` and negative class `q`, tabulated over the grid
/// `z_p_values x z_q_values`. Computed through [`grad_bce`]/[`grad_sce`]
/// rather than the specialized two-class formulas so the table doubles
/// as a check of the general code.
pub fn regime_table(z_p_values: &[f64], z_q_values: &[f64]) -> Result<Vec<RegimeRow>> {
    if z_p_values.is_empty() || z_q_values.is_empty() {
        return Err(RecamError::Contract("regime_table requires nonempty grids".into()));
    }
    let y = Array1::from(vec![1.0f64, 0.0]);
    let mut rows = Vec::with_capacity(z_p_values.len() * z_q_values.len());
    for &z_p in z_p_values {
        for &z_q in z_q_values {
            let z = Array1::from(vec![z_p, z_q]);
            let gb = grad_bce(z.view(), y.view())?;
            let gs = grad_sce(z.view(), y.view())?;
            rows.push(RegimeRow {
                z_p,
                z_q,
                g1: gb[0].abs(),
                g2: gb[1].abs(),
                g3: gs[0].abs(),
                g4: gs[1].abs(),
            });
        }
    }
    Ok(rows)
}

/// Serialize a regime table to the CSV consumed by the report plotter.
pub fn regime_table_csv<W: std::io::Write>(rows: &[RegimeRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["z_p", "z_q", "g1", "g2", "g3", "g4"])
        .and_then(|_| {
            for r in rows {
                w.write_record([
                    r.z_p.to_string(),
                    r.z_q.to_string(),
                    r.g1.to_string(),
                    r.g2.to_string(),
                    r.g3.to_string(),
                    r.g4.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        })
        .map_err(|e| RecamError::Format { format: "csv", detail: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    const LOG2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bce_uniform_logits() {
        let l = bce_loss(arr1(&[0.0f64, 0.0]).view(), arr1(&[1.0f64, 0.0]).view()).unwrap();
        assert!((l - LOG2).abs() < 1e-15);
    }

    #[test]
    fn bce_saturated_correct_is_zero() {
        let l = bce_loss(arr1(&[40.0f64, -40.0]).view(), arr1(&[1.0f64, 0.0]).view()).unwrap();
        assert!(l.abs() < 1e-15, "loss {l}");
    }

    #[test]
    fn bce_matches_per_term_oracle() {
        // Independent scalar evaluation, term by term.
        let z = [1.5f64, -0.5, 2.0];
        let y = [1.0f64, 0.0, 1.0];
        let mut expect = 0.0;
        for (zi, yi) in z.iter().zip(y.iter()) {
            let s = 1.0 / (1.0 + (-zi).exp());
            expect += -(yi * s.ln() + (1.0 - yi) * (1.0 - s).ln());
        }
        expect /= 3.0;
        let l = bce_loss(arr1(&z).view(), arr1(&y).view()).unwrap();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_dimension_mismatch_rejected() {
        let e = bce_loss(arr1(&[0.0f64]).view(), arr1(&[1.0f64, 0.0]).view());
        assert!(matches!(e, Err(RecamError::Contract(_))));
    }

    #[test]
    fn sce_uniform_softmax() {
        let z0 = arr1(&[0.0f64, 0.0]);
        let l = sce_loss(&[z0.view()], arr1(&[1.0f64, 0.0]).view()).unwrap();
        assert!((l - LOG2).abs() < 1e-15);
    }

    #[test]
    fn sce_two_positive_classes() {
        // -(1/2)[log softmax([5,0,0])[0] + log softmax([0,5,0])[1]]
        //   = -log(e^5/(e^5+2)) = ln(1 + 2 e^-5)
        let z0 = arr1(&[5.0f64, 0.0, 0.0]);
        let z1 = arr1(&[0.0f64, 5.0, 0.0]);
        let l = sce_loss(&[z0.view(), z1.view()], arr1(&[1.0f64, 1.0, 0.0]).view()).unwrap();
        let expect = (1.0f64 + 2.0 * (-5.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.0133859).abs() < 1e-6);
    }

    #[test]
    fn sce_shift_invariance_constant_logits() {
        for c in [-30.0, 0.0, 12.5] {
            let z0 = arr1(&[c, c, c]);
            let l = sce_loss(&[z0.view()], arr1(&[1.0f64, 0.0, 0.0]).view()).unwrap();
            assert!((l - 3.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn sce_rejects_all_zero_labels() {
        let e = sce_loss(&[], arr1(&[0.0f64, 0.0]).view());
        assert!(matches!(e, Err(RecamError::Contract(_))));
    }

    #[test]
    fn recam_loss_mixes() {
        let cfg = LossConfig::new(1.0, 2).unwrap();
        assert!((recam_loss(0.5, 0.2, &cfg) - 0.7).abs() < 1e-15);
        let cfg0 = LossConfig::new(0.0, 2).unwrap();
        assert!((recam_loss(0.5, 0.2, &cfg0) - 0.5).abs() < 1e-15);
        let cfg01 = LossConfig::new(0.1, 2).unwrap();
        assert!((recam_loss(0.3, 0.4, &cfg01) - 0.34).abs() < 1e-15);
    }

    #[test]
    fn seg_loss_examples() {
        use ndarray::{Array2, Array3};
        // 1x1 grid, two classes, uniform logits -> log 2.
        let z = Array3::from_shape_vec((2, 1, 1), vec![0.0f64, 0.0]).unwrap();
        let y = Array2::from_elem((1, 1), 0u8);
        let l = seg_loss(z.view(), y.view()).unwrap();
        assert!((l - LOG2).abs() < 1e-15);

        // Saturated correct logits -> ~0.
        let mut z = Array3::from_elem((3, 2, 2), -60.0f64);
        let y = Array2::from_shape_vec((2, 2), vec![0u8, 1, 2, 1]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                z[(y[(i, j)] as usize, i, j)] = 60.0;
            }
        }
        let l = seg_loss(z.view(), y.view()).unwrap();
        assert!(l.abs() < 1e-12);

        // Random 2x2 grid matches an independent per-pixel evaluation.
        let z = Array3::from_shape_fn((3, 2, 2), |(k, i, j)| {
            ((k * 7 + i * 3 + j * 5) % 11) as f64 * 0.37 - 1.9
        });
        let y = Array2::from_shape_vec((2, 2), vec![2u8, 0, 255, 1]).unwrap();
        let mut expect = 0.0;
        let mut n = 0;
        for i in 0..2 {
            for j in 0..2 {
                if y[(i, j)] == 255 {
                    continue;
                }
                let col = [z[(0, i, j)], z[(1, i, j)], z[(2, i, j)]];
                let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                expect += lse - col[y[(i, j)] as usize];
                n += 1;
            }
        }
        expect /= n as f64;
        let l = seg_loss(z.view(), y.view()).unwrap();
        assert!((l - expect).abs() < 1e-12);

        // All pixels ignored -> contract error.
        let y = Array2::from_elem((2, 2), 255u8);
        assert!(matches!(seg_loss(z.view(), y.view()), Err(RecamError::Contract(_))));
    }

    #[test]
    fn grad_bce_uniform() {
        let g = grad_bce(arr1(&[0.0f64, 0.0]).view(), arr1(&[1.0f64, 0.0]).view()).unwrap();
        assert!((g[0] + 0.25).abs() < 1e-15);
        assert!((g[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn grad_bce_matches_confused_case_magnitudes() {
        // z_p = z_q = 10, K = 2: magnitudes 1/(2+2e^10) and 1/(2+2e^-10).
        let g = grad_bce(arr1(&[10.0f64, 10.0]).view(), arr1(&[1.0f64, 0.0]).view()).unwrap();
        let e10 = 10.0f64.exp();
        assert!((g[0].abs() - 1.0 / (2.0 + 2.0 * e10)).abs() < 1e-15);
        assert!((g[1].abs() - 1.0 / (2.0 + 2.0 / e10)).abs() < 1e-15);
        assert!((g[0].abs() - 2.27e-5).abs() < 1e-7);
    }

    #[test]
    fn grad_sce_equal_logits_and_limits() {
        for c in [-10.0, 0.0, 10.0] {
            let g = grad_sce(arr1(&[c, c]).view(), arr1(&[1.0f64, 0.0]).view()).unwrap();
            assert!((g[0] + 0.5).abs() < 1e-15);
            assert!((g[1] - 0.5).abs() < 1e-15);
        }
        // z_p - z_q = -20: magnitudes approach 1.
        let g = grad_sce(arr1(&[-10.0f64, 10.0]).view(), arr1(&[1.0f64, 0.0]).view()).unwrap();
        assert!((g[0].abs() - 1.0).abs() < 1e-8);
        assert!((g[1].abs() - 1.0).abs() < 1e-8);
        // While BCE magnitudes stay below 0.5.
        let gb = grad_bce(arr1(&[-10.0f64, 10.0]).view(), arr1(&[1.0f64, 0.0]).view()).unwrap();
        assert!(gb[0].abs() < 0.5 && gb[1].abs() < 0.5);
    }

    #[test]
    fn grad_sce_rejects_non_one_hot() {
        let e = grad_sce(arr1(&[0.0f64, 0.0]).view(), arr1(&[1.0f64, 1.0]).view());
        assert!(matches!(e, Err(RecamError::Contract(_))));
        let e = grad_sce(arr1(&[0.0f64, 0.0]).view(), arr1(&[0.5f64, 0.5]).view());
        assert!(matches!(e, Err(RecamError::Contract(_))));
    }

    #[test]
    fn regime_table_closed_forms() {
        let rows = regime_table(&[10.0, -10.0], &[10.0, -10.0]).unwrap();
        let find = |zp: f64, zq: f64| {
            *rows.iter().find(|r| r.z_p == zp && r.z_q == zq).expect("grid row")
        };
        let e10 = 10.0f64.exp();
        let at = find(10.0, 10.0);
        assert!((at.g1 - 1.0 / (2.0 + 2.0 * e10)).abs() < 1e-12);
        assert!((at.g2 - 0.5).abs() < 1e-4);
        assert!((at.g3 - 0.5).abs() < 1e-15);
        assert!((at.g4 - 0.5).abs() < 1e-15);

        let at = find(-10.0, -10.0);
        assert!((at.g1 - 0.5).abs() < 1e-4);
        assert!((at.g2 - 1.0 / (2.0 + 2.0 * e10)).abs() < 1e-12);
        assert!((at.g3 - 0.5).abs() < 1e-15);

        // Converged case: everything tiny.
        let at = find(10.0, -10.0);
        assert!(at.g1 < 1.1e-4 && at.g2 < 1.1e-4 && at.g3 < 1.1e-4 && at.g4 < 1.1e-4);
    }

    #[test]
    fn regime_table_rejects_empty_grid() {
        assert!(matches!(regime_table(&[], &[1.0]), Err(RecamError::Contract(_))));
    }

    #[test]
    fn bce_positive_gradient_strictly_decreasing_along_diagonal() {
        // Holding z_p = z_q = c: SCE positive magnitude is exactly 0.5,
        // BCE positive magnitude strictly decreases in c.
        let mut prev = f64::INFINITY;
        for i in 0..41 {
            let c = -10.0 + 0.5 * i as f64;
            let rows = regime_table(&[c], &[c]).unwrap();
            assert!((rows[0].g3 - 0.5).abs() < 1e-15);
            assert!(rows[0].g1 < prev);
            prev = rows[0].g1;
        }
    }
}
