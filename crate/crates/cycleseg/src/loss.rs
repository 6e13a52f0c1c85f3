//! Lovász-Softmax Jaccard loss and the pixel-wise cross-entropy baseline.
//!
//! Per class, the pixel errors `m_i = 1 - p_i` (true class) or `p_i`
//! (other class) are sorted descending and weighted by the discrete
//! derivative of the Jaccard loss along that order; the sorting permutation
//! is treated as a constant, which is the standard subgradient. The loss is
//! averaged over the classes present in the ground truth.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// The discrete Jaccard-loss increments along a fixed error ordering.
/// `gt_sorted[j]` is the class membership (0/1) of the pixel with the
/// j-th largest error; `gts = sum(gt_sorted)` must be positive.
fn lovasz_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let p = gt_sorted.len();
    let gts: f64 = gt_sorted.iter().sum();
    let mut out = Vec::with_capacity(p);
    let mut inter = gts;
    let mut union = gts;
    let mut prev = 0.0;
    for &g in gt_sorted {
        inter -= g;
        union += 1.0 - g;
        let jac = 1.0 - inter / union;
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Per-pixel loss coefficients for one class, scattered back to pixel
/// order: `coeffs[i]` multiplies `errors[i]` in the loss. Ties in the
/// descending sort break by pixel index.
pub fn lovasz_coefficients(errors: &[f64], gt: &[f64]) -> Vec<f64> {
    debug_assert_eq!(errors.len(), gt.len());
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let gt_sorted: Vec<f64> = order.iter().map(|&i| gt[i]).collect();
    let grad = lovasz_grad(&gt_sorted);
    let mut coeffs = vec![0.0; errors.len()];
    for (rank, &i) in order.iter().enumerate() {
        coeffs[i] = grad[rank];
    }
    coeffs
}

/// Sorted-gradient Lovász extension of the Jaccard loss for one class,
/// evaluated on raw error values. This is the implementation route the
/// tape op uses; the definitional-extension oracle lives in test code.
pub fn lovasz_term(errors: &[f64], gt: &[f64]) -> f64 {
    lovasz_coefficients(errors, gt)
        .iter()
        .zip(errors)
        .map(|(c, m)| c * m)
        .sum()
}

fn validate_gt(logits: &Tensor, gt: &Tensor) -> Result<(usize, usize, usize)> {
    let (_, c, h, w) = logits.dims4()?;
    if c != 2 {
        return Err(Error::shape(format!("loss expects 2 classes, got {c}")));
    }
    let gs = gt.shape();
    let ok = gs == [1, 1, h, w] || gs == [h, w];
    if !ok {
        return Err(Error::shape(format!(
            "ground truth {gs:?} does not match {h}x{w} logits"
        )));
    }
    if let Some(bad) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Label(format!(
            "ground-truth values must be 0 or 1, found {bad}"
        )));
    }
    Ok((c, h, w))
}

/// `[1,C,H,W] -> [H*W, C]` pixel-major class matrix.
fn logits_to_rows(tape: &mut Tape, logits: &Tensor, c: usize, hw: usize) -> Result<Tensor> {
    let flat = tape.reshape(logits, &[c, hw])?;
    tape.transpose2d(&flat)
}

fn onehot(gt: &Tensor, hw: usize) -> Tensor {
    Tensor::from_fn(&[hw, 2], |i| {
        let px = i / 2;
        let cls = i % 2;
        let fg = gt.data()[px];
        if cls == 1 {
            fg
        } else {
            1.0 - fg
        }
    })
}

/// Lovász-Softmax loss over the classes present in the ground truth.
pub fn lovasz_softmax(tape: &mut Tape, logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (c, h, w) = validate_gt(logits, gt)?;
    let hw = h * w;
    let rows = logits_to_rows(tape, logits, c, hw)?;
    let p = tape.softmax_rows(&rows)?;

    let hot = onehot(gt, hw);
    let ones = Tensor::full(&[hw, 2], 1.0);
    // m = onehot*(1-p) + (1-onehot)*p
    let one_minus_p = tape.sub(&ones, &p)?;
    let true_part = tape.mul(&hot, &one_minus_p)?;
    let inv_hot = tape.sub(&ones, &hot)?;
    let other_part = tape.mul(&inv_hot, &p)?;
    let m = tape.add(&true_part, &other_part)?;

    // per-class coefficient matrix from the forward values of m; the
    // permutation is constant for the backward pass
    let fg: Vec<f64> = gt.data().to_vec();
    let present: Vec<usize> = (0..2)
        .filter(|&cls| {
            fg.iter()
                .any(|&v| if cls == 1 { v == 1.0 } else { v == 0.0 })
        })
        .collect();
    debug_assert!(!present.is_empty());
    let mut weights = vec![0.0; hw * 2];
    for &cls in &present {
        let errors: Vec<f64> = (0..hw).map(|px| m.data()[px * 2 + cls]).collect();
        let membership: Vec<f64> = fg
            .iter()
            .map(|&v| if cls == 1 { v } else { 1.0 - v })
            .collect();
        let coeffs = lovasz_coefficients(&errors, &membership);
        for (px, co) in coeffs.iter().enumerate() {
            weights[px * 2 + cls] = co / present.len() as f64;
        }
    }
    let wt = Tensor::new(vec![hw, 2], weights)?;
    let weighted = tape.mul(&m, &wt)?;
    Ok(tape.sum_all(&weighted))
}

/// Mean negative log-probability of the true class, stabilized through the
/// fused log-softmax.
pub fn cross_entropy(tape: &mut Tape, logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (c, h, w) = validate_gt(logits, gt)?;
    let hw = h * w;
    let rows = logits_to_rows(tape, logits, c, hw)?;
    let logp = tape.log_softmax_rows(&rows)?;
    let hot = onehot(gt, hw);
    let picked = tape.mul(&hot, &logp)?;
    let total = tape.sum_all(&picked);
    Ok(tape.scale(&total, -1.0 / hw as f64))
}
