use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax of one logit row, computed in f64 with max-subtraction.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of one row against `target`, with the logit gradient
/// scaled by `scale`.
pub(crate) fn row_loss_grad(logits: &[f32], target: usize, scale: f64) -> (f64, Vec<f32>) {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = m + total.ln() - logits[target] as f64;
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let onehot = if k == target { 1.0 } else { 0.0 };
            ((e / total - onehot) * scale) as f32
        })
        .collect();
    (loss, grad)
}

pub(crate) fn check_targets(targets: &[usize], classes: usize) -> Result<()> {
    if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= classes) {
        return Err(Error::invalid(format!(
            "target {t} at position {i} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `logits` (`[N, K]`) against `targets`,
/// and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy_to_target(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k] = *logits.shape() else {
        return Err(Error::Shape(format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} logit rows", targets.len())));
    }
    check_targets(targets, k)?;
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (i, &t) in targets.iter().enumerate() {
        let (l, g) = row_loss_grad(logits.outer_slice(i), t, scale);
        loss += l;
        grad.extend(g);
    }
    Ok((loss * scale, Tensor::from_raw(vec![n, k], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::filled(&[1, 4], 0.3);
        for t in 0..4 {
            let (loss, _) = cross_entropy_to_target(&logits, &[t]).unwrap();
            assert!((loss - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logits_do_not_overflow() {
        let logits = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let (loss, grad) = cross_entropy_to_target(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.is_finite()));
        let (loss, _) = cross_entropy_to_target(&logits, &[1]).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn target_out_of_range() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(cross_entropy_to_target(&logits, &[0, 3]).is_err());
        assert!(cross_entropy_to_target(&logits, &[0]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::stream(3, &[]);
        for _ in 0..100 {
            let row: Vec<f32> = (0..7).map(|_| rng.random_range(-30.0..30.0)).collect();
            let s: f64 = softmax(&row).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = crate::rng::stream(11, &[]);
        let data: Vec<f32> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets = [4, 0, 2];
        let logits = Tensor::new(vec![3, 5], data.clone()).unwrap();
        let (_, grad) = cross_entropy_to_target(&logits, &targets).unwrap();
        // f64 oracle, independent of the f32 path
        let loss64 = |z: &[f64]| -> f64 {
            (0..3)
                .map(|r| {
                    let row = &z[r * 5..(r + 1) * 5];
                    let m = row.iter().cloned().fold(f64::MIN, f64::max);
                    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[targets[r]]
                })
                .sum::<f64>()
                / 3.0
        };
        let base: Vec<f64> = data.iter().map(|&v| v as f64).collect();
        let h = 1e-3;
        for i in 0..15 {
            let mut up = base.clone();
            let mut dn = base.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (loss64(&up) - loss64(&dn)) / (2.0 * h);
            let a = grad.data()[i] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-3, "element {i}: analytic {a} vs fd {fd}");
        }
    }
}
