use crate::error::{Error, Result};

/// Whether `label` is among the `k` largest logits.
///
/// Ties rank the lower class index first, i.e. the order of a stable
/// descending sort.
pub fn top_k_hit(logits: &[f32], label: usize, k: usize) -> Result<bool> {
    let classes = logits.len();
    if k == 0 || k > classes {
        return Err(Error::invalid(format!("k={k} outside 1..={classes}")));
    }
    if label >= classes {
        return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
    }
    let z = logits[label];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count();
    Ok(ahead < k)
}
