//! Small least-squares fits used by the robustness analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    /// `a * exp(b x) + c`
    Exponential,
    /// `k * x`
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    /// `[a, b, c]` or `[k]`.
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
}

impl FitResult {
    pub fn eval(&self, x: f64) -> f64 {
        match self.model {
            FitModel::Exponential => {
                let [a, b, c] = [self.coefficients[0], self.coefficients[1], self.coefficients[2]];
                a * (b * x).exp() + c
            }
            FitModel::Linear => self.coefficients[0] * x,
        }
    }
}

/// Coefficient of determination, clamped to `[0, 1]`.
pub fn r_squared(ys: &[f64], predicted: &[f64]) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = ys.iter().zip(predicted).map(|(y, p)| (y - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
}

fn check_data(xs: &[f64], ys: &[f64], min_len: usize) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Fit(format!("{} abscissae for {} values", xs.len(), ys.len())));
    }
    if xs.len() < min_len {
        return Err(Error::Fit(format!("need at least {min_len} points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite data".into()));
    }
    Ok(())
}

/// Least-squares `k` for `y = k x`.
pub fn fit_linear_origin(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    check_data(xs, ys, 2)?;
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all abscissae are zero".into()));
    }
    let k = xs.iter().zip(ys).map(|(x, y)| x * y).sum::<f64>() / sxx;
    let pred: Vec<f64> = xs.iter().map(|x| k * x).collect();
    Ok(FitResult {
        model: FitModel::Linear,
        coefficients: vec![k],
        r_squared: r_squared(ys, &pred),
    })
}

/// Linear coefficients `(a, c)` and residual sum of squares for a fixed rate `b`.
fn project(xs: &[f64], ys: &[f64], b: f64) -> Option<(f64, f64, f64)> {
    let n = xs.len() as f64;
    let e: Vec<f64> = xs.iter().map(|x| (b * x).exp()).collect();
    let me = e.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let see: f64 = e.iter().map(|v| (v - me).powi(2)).sum();
    if !see.is_finite() || see <= 1e-300 {
        return None;
    }
    let sey: f64 = e.iter().zip(ys).map(|(v, y)| (v - me) * (y - my)).sum();
    let a = sey / see;
    let c = my - a * me;
    let ss: f64 = e.iter().zip(ys).map(|(v, y)| (a * v + c - y).powi(2)).sum();
    ss.is_finite().then_some((a, c, ss))
}

/// `y = a exp(b x) + c` by variable projection: `a, c` are solved linearly for
/// each trial `b`, and `b` is found by a grid scan plus golden-section search.
pub fn fit_exponential(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    check_data(xs, ys, 4)?;
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = xmax - xmin;
    if span <= 0.0 {
        return Err(Error::Fit("abscissae do not span an interval".into()));
    }
    let b_max = 30.0 / span;
    let n_grid = 600;
    let grid: Vec<f64> = (0..=n_grid)
        .map(|k| -b_max + 2.0 * b_max * k as f64 / n_grid as f64)
        .filter(|b| b.abs() > 1e-9 * b_max)
        .collect();
    let ss = |b: f64| project(xs, ys, b).map_or(f64::INFINITY, |r| r.2);
    let (mut best_i, mut best) = (0, f64::INFINITY);
    for (i, &b) in grid.iter().enumerate() {
        let v = ss(b);
        if v < best {
            best = v;
            best_i = i;
        }
    }
    if !best.is_finite() {
        return Err(Error::Fit("no finite exponential fit".into()));
    }
    let mut lo = grid[best_i.saturating_sub(1)];
    let mut hi = grid[(best_i + 1).min(grid.len() - 1)];
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (ss(x1), ss(x2));
    for _ in 0..200 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = ss(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = ss(x2);
        }
        if (hi - lo).abs() < 1e-14 * b_max {
            break;
        }
    }
    let mut b = 0.5 * (lo + hi);
    if ss(b) > best {
        b = grid[best_i];
    }
    let (a, c, _) = project(xs, ys, b).ok_or_else(|| Error::Fit("degenerate exponential fit".into()))?;
    let fit = FitResult {
        model: FitModel::Exponential,
        coefficients: vec![a, b, c],
        r_squared: 0.0,
    };
    let pred: Vec<f64> = xs.iter().map(|&x| fit.eval(x)).collect();
    Ok(FitResult {
        r_squared: r_squared(ys, &pred),
        ..fit
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recovers_exponential() {
        let xs: Vec<f64> = (0..12).map(|k| k as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.39 * (0.28 * x).exp() - 0.40).collect();
        let f = fit_exponential(&xs, &ys).unwrap();
        assert!((f.coefficients[0] - 0.39).abs() < 1e-6, "{:?}", f.coefficients);
        assert!((f.coefficients[1] - 0.28).abs() < 1e-6);
        assert!((f.coefficients[2] + 0.40).abs() < 1e-6);
        assert!(f.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn recovers_slope() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [0.0, 1.57, 3.14, 4.71];
        let f = fit_linear_origin(&xs, &ys).unwrap();
        assert!((f.coefficients[0] - 1.57).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(fit_linear_origin(&[0.0, 0.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn r_squared_is_consistent(noise in proptest::collection::vec(-0.1f64..0.1, 8)) {
            let xs: Vec<f64> = (0..8).map(|k| k as f64).collect();
            let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| 2.0 * x + n).collect();
            let f = fit_linear_origin(&xs, &ys).unwrap();
            prop_assert!((0.0..=1.0).contains(&f.r_squared));
            let pred: Vec<f64> = xs.iter().map(|&x| f.eval(x)).collect();
            prop_assert!((r_squared(&ys, &pred) - f.r_squared).abs() < 1e-12);
        }
    }
}
