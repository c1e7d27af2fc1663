//! Training losses and evaluation metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing constant of the soft Jaccard term.
pub const JACCARD_EPS: f64 = 1.0;

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_binary(t: &Tensor) -> Result<()> {
    if let Some(i) = t.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("target element {i} is {} (not 0/1)", t.data()[i])));
    }
    Ok(())
}

/// Mean binary cross entropy on logits plus `1 - soft Jaccard`, both taken
/// over the whole batch. Returns the loss and its gradient w.r.t. logits.
pub fn jaccard_bce_loss(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape())));
    }
    if logits.is_empty() {
        return Err(Error::Shape("empty loss input".into()));
    }
    check_binary(targets)?;
    let n = logits.len() as f64;
    let (z, t) = (logits.data(), targets.data());
    let mut bce = 0.0;
    let (mut inter, mut sum_p, mut sum_t) = (0.0, 0.0, 0.0);
    let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    for i in 0..z.len() {
        bce += z[i].max(0.0) - z[i] * t[i] + (-z[i].abs()).exp().ln_1p();
        inter += p[i] * t[i];
        sum_p += p[i];
        sum_t += t[i];
    }
    bce /= n;
    let num = inter + JACCARD_EPS;
    let den = sum_p + sum_t - inter + JACCARD_EPS;
    let loss = bce + (1.0 - num / den);

    let mut grad = Tensor::zeros(logits.shape());
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        let dj_dp = (t[i] * den - num * (1.0 - t[i])) / (den * den);
        *g = (p[i] - t[i]) / n - dj_dp * p[i] * (1.0 - p[i]);
    }
    Ok((loss, grad))
}

/// Mean softmax cross entropy over `(N, K)` logits.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = match logits.shape()[..] {
        [n, k] => (n, k),
        _ => return Err(Error::Shape(format!("expected (N, K) logits, got {:?}", logits.shape()))),
    };
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidArgument(format!("label {label} out of {k} classes")));
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[label];
        for (j, g) in grad.data_mut()[r * k..(r + 1) * k].iter_mut().enumerate() {
            *g = ((row[j] - max).exp() / sum - (j == label) as u8 as f64) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Binary mask from logits: `sigmoid(z) > 0.5`, i.e. `z > 0`.
pub fn threshold_logits(logits: &Tensor) -> Tensor {
    let mut m = logits.clone();
    for v in m.data_mut() {
        *v = if sigmoid(*v) > 0.5 { 1.0 } else { 0.0 };
    }
    m
}

/// Per-image intersection over union averaged over the batch; an image
/// whose prediction and target are both empty scores 1.
pub fn mean_iou(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape().is_empty() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    check_binary(pred)?;
    check_binary(target)?;
    let n = pred.shape()[0];
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let per = pred.len() / n;
    let mut total = 0.0;
    for b in 0..n {
        let (mut inter, mut union) = (0usize, 0usize);
        for (p, t) in pred.data()[b * per..(b + 1) * per].iter().zip(&target.data()[b * per..(b + 1) * per]) {
            let (p, t) = (*p == 1.0, *t == 1.0);
            inter += (p && t) as usize;
            union += (p || t) as usize;
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / n as f64)
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = match logits.shape()[..] {
        [n, k] => (n, k),
        _ => return Err(Error::Shape(format!("expected (N, K) logits, got {:?}", logits.shape()))),
    };
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(&logits.data()[r * k..(r + 1) * k]) == l)
        .count();
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn bce_term_at_zero_logits() {
        let logits = Tensor::zeros(&[1, 1, 2, 2]);
        let targets = t(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let (loss, _) = jaccard_bce_loss(&logits, &targets).unwrap();
        // p = 0.5: I = 1, U = 2 + 2 - 1 = 3, J = 2/4
        let jaccard = 1.0 - (1.0 + 1.0) / (3.0 + 1.0);
        assert!((loss - (std::f64::consts::LN_2 + jaccard)).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_limit() {
        let targets = Tensor::full(&[1, 1, 4, 4], 1.0);
        let mut prev = f64::INFINITY;
        for z in [2.0, 8.0, 20.0, 40.0] {
            let (loss, _) = jaccard_bce_loss(&Tensor::full(&[1, 1, 4, 4], z), &targets).unwrap();
            assert!(loss >= 0.0 && loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_targets() {
        let z = Tensor::zeros(&[1, 1, 1, 2]);
        assert!(jaccard_bce_loss(&z, &t(&[1, 1, 1, 2], vec![0.5, 1.0])).is_err());
        assert!(jaccard_bce_loss(&z, &Tensor::zeros(&[1, 1, 2, 1])).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = t(&[1, 1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]);
        let b = t(&[1, 1, 1, 4], vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(mean_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mean_iou(&a, &b).unwrap(), 0.0);
        let empty = Tensor::zeros(&[1, 1, 1, 4]);
        assert_eq!(mean_iou(&empty, &empty).unwrap(), 1.0);
        // half of a 100-pixel target, no false positives
        let target = Tensor::full(&[1, 1, 10, 10], 1.0);
        let mut pred = Tensor::zeros(&[1, 1, 10, 10]);
        pred.data_mut()[..50].fill(1.0);
        assert_eq!(mean_iou(&pred, &target).unwrap(), 0.5);
        assert!(mean_iou(&a, &Tensor::zeros(&[1, 1, 4, 1])).is_err());
    }

    #[test]
    fn top1_examples() {
        let logits = t(&[2, 3], vec![0.1, 2.0, 0.3, 5.0, 1.0, 1.0]);
        assert_eq!(top1_accuracy(&logits, &[1, 0]).unwrap(), 1.0);
        let uniform = Tensor::zeros(&[4, 3]);
        assert_eq!(top1_accuracy(&uniform, &[0, 1, 2, 0]).unwrap(), 0.5);
        assert!(top1_accuracy(&uniform, &[0]).is_err());
    }

    #[test]
    fn threshold_at_half() {
        let m = threshold_logits(&t(&[3], vec![-0.1, 0.0, 0.1]));
        assert_eq!(m.data(), &[0.0, 0.0, 1.0]);
    }
}
