//! Ordinary least squares line fit and central finite differences.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Euclidean norm of the residual vector.
    pub residual: f64,
}

/// Least-squares line through (xs, ys). Exact on collinear input.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("fit_line: {} xs vs {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateDesign("fit_line needs at least 2 points".into()));
    }
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - xbar) * (x - xbar);
        sxy += (x - xbar) * (y - ybar);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateDesign("all xs identical".into()));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let residual = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let d = y - (intercept + slope * x);
            d * d
        })
        .sum::<f64>()
        .sqrt();
    Ok(LineFit { slope, intercept, residual })
}

/// Default central-difference step: 1e-5 * max(1, |x|_inf).
pub fn default_step(x: &[f64]) -> f64 {
    1e-5 * x.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Central-difference gradient estimate of a scalar function.
/// `h` defaults to [`default_step`] when not given.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: Option<f64>) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let h = h.unwrap_or_else(|| default_step(x));
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("function value at coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let fit = fit_line(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((fit.slope - 2.0).abs() <= 1e-12);
        assert!((fit.intercept - 1.0).abs() <= 1e-12);
        assert!(fit.residual <= 1e-12);
    }

    #[test]
    fn exact_geometric_decay() {
        let xs: Vec<f64> = (0..6).map(|t| t as f64).collect();
        let ys: Vec<f64> = (0..6).map(|t| 0.8f64.powi(t).ln()).collect();
        let fit = fit_line(&xs, &ys).unwrap();
        assert!((fit.slope - 0.8f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn two_point_log_slope() {
        let xs = [100.0f64.ln(), 400.0f64.ln()];
        let ys = [0.1f64.ln(), 0.05f64.ln()];
        let fit = fit_line(&xs, &ys).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_xs_rejected() {
        assert!(matches!(
            fit_line(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff_grad(|w| w[0] * w[0], &[3.0], Some(1e-4)).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], None).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn product_partials() {
        let g = finite_diff_grad(|w| w[0] * w[1], &[2.0, 5.0], Some(1e-4)).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_value_rejected() {
        let res = finite_diff_grad(|w| (w[0] - 1.0).ln(), &[0.5], Some(1e-4));
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
