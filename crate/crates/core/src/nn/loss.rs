//! Segmentation losses: class-weighted cross-entropy and the Lovász-Softmax
//! surrogate of the per-class Jaccard loss.

use crate::error::{Error, Result};
use crate::nn::tensor::Matrix;

fn check_labels(labels: &[u32], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::LabelCount {
            expected: rows,
            found: labels.len(),
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        return Err(Error::InvalidLabel { index, label, classes });
    }
    Ok(())
}

/// Weighted cross-entropy averaged with weights `w[y_i]`:
/// `sum_i w[y_i] * -log softmax(x_i)[y_i] / sum_i w[y_i]`.
/// Returns the loss and its gradient with respect to the logits.
pub fn weighted_cross_entropy(logits: &Matrix, labels: &[u32], class_weights: &[f64]) -> Result<(f64, Matrix)> {
    let c = logits.cols;
    if class_weights.len() != c {
        return Err(Error::shape(&[class_weights.len()], &[c]));
    }
    if let Some(bad) = class_weights.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "class weight {bad} must be positive, got {}",
            class_weights[bad]
        )));
    }
    check_labels(labels, logits.rows, c)?;
    let mut grad = Matrix::zeros(logits.rows, c);
    if logits.rows == 0 {
        return Ok((0.0, grad));
    }
    let total_w: f64 = labels.iter().map(|&y| class_weights[y as usize]).sum();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum_exp.ln();
        let w = class_weights[y as usize] / total_w;
        loss += w * (lse - row[y as usize]);
        let g = grad.row_mut(i);
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = w * (row[j] - lse).exp();
        }
        g[y as usize] -= w;
    }
    Ok((loss, grad))
}

/// Lovász gradient of the Jaccard loss for ground truth sorted by
/// decreasing error: `J_k - J_{k-1}` with `J_k = 1 - |gt \ top_k| / |gt ∪ top_k|`.
fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut grad = Vec::with_capacity(gt_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        grad.push(jac - prev);
        prev = jac;
    }
    grad
}

/// Lovász-Softmax averaged over the classes present in `labels`. The sort
/// permutation is held fixed for the gradient.
pub fn lovasz_softmax(probs: &Matrix, labels: &[u32]) -> Result<(f64, Matrix)> {
    let c = probs.cols;
    check_labels(labels, probs.rows, c)?;
    for i in 0..probs.rows {
        let r = probs.row(i);
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || r.iter().any(|&p| p < 0.0) {
            return Err(Error::Unnormalized { row: i, sum });
        }
    }
    let mut grad = Matrix::zeros(probs.rows, c);
    let present: Vec<usize> = (0..c).filter(|&k| labels.iter().any(|&y| y as usize == k)).collect();
    if present.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / present.len() as f64;
    let mut loss = 0.0;
    let n = probs.rows;
    let mut order: Vec<usize> = (0..n).collect();
    let mut errors = vec![0.0; n];
    for &k in &present {
        for i in 0..n {
            let p = probs.get(i, k);
            errors[i] = if labels[i] as usize == k { 1.0 - p } else { p };
        }
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let gt_sorted: Vec<bool> = order.iter().map(|&i| labels[i] as usize == k).collect();
        let lg = lovasz_grad(&gt_sorted);
        for (rank, &i) in order.iter().enumerate() {
            loss += scale * errors[i] * lg[rank];
            let sign = if gt_sorted[rank] { -1.0 } else { 1.0 };
            grad.data[i * c + k] += scale * sign * lg[rank];
        }
    }
    Ok((loss, grad))
}
