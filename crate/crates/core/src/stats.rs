use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    /// Two-sided, from Student's t with `n - 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
    /// Ordinary least-squares fit `ys ~ slope * xs + intercept`.
    pub slope: f64,
    pub intercept: f64,
}

/// Sample Pearson correlation with its two-sided p-value and the OLS line.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::invalid(format!("{n} xs but {} ys", ys.len())));
    }
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 points, got {n}")));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite input"));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation is undefined for constant input"));
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let dof = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        beta_reg(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
    };
    let slope = sxy / sxx;
    Ok(CorrelationResult {
        rho,
        p_value,
        n,
        slope,
        intercept: my - slope * mx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_anti_correlation() {
        let xs = [0.1, 0.5, 0.2, 0.9, 0.3];
        let r = pearson(&xs, &xs).unwrap();
        assert_eq!(r.rho, 1.0);
        assert_eq!(r.p_value, 0.0);
        assert!((r.slope - 1.0).abs() < 1e-12 && r.intercept.abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
        assert_eq!(pearson(&xs, &neg).unwrap().rho, -1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }
}
