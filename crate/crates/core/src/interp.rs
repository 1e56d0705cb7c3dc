//! Interpolation on tabulated data.

use crate::error::{Error, Result};

/// Index `i` of the segment [xs[i], xs[i+1]] containing `x`, clamped to the
/// first/last segment. `xs` must be ascending with at least two entries.
pub fn segment_index(xs: &[f64], x: f64) -> usize {
    let n = xs.len();
    debug_assert!(n >= 2);
    match xs.partition_point(|&v| v <= x) {
        0 => 0,
        k if k >= n => n - 2,
        k => k - 1,
    }
}

/// Piecewise-linear interpolation; `None` outside [xs[0], xs[n-1]].
pub fn linear(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    if xs.len() < 2 || x < xs[0] || x > xs[xs.len() - 1] {
        return None;
    }
    let i = segment_index(xs, x);
    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    Some(ys[i] + t * (ys[i + 1] - ys[i]))
}

pub fn check_strictly_increasing(xs: &[f64], what: &str) -> Result<()> {
    if let Some(w) = xs.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(Error::data(format!(
            "{what} must be strictly increasing (found {} followed by {})",
            w[0], w[1]
        )));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::data(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Natural cubic spline.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    // Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n < 3 || ys.len() != n {
            return Err(Error::invalid(format!(
                "cubic spline needs at least 3 knots and matching lengths (got {} and {})",
                n,
                ys.len()
            )));
        }
        check_strictly_increasing(&xs, "spline knots")?;
        // Thomas algorithm for the tridiagonal system of interior second derivatives.
        let mut m = vec![0.0; n];
        let mut c_prime = vec![0.0; n];
        let mut d_prime = vec![0.0; n];
        for i in 1..n - 1 {
            let h0 = xs[i] - xs[i - 1];
            let h1 = xs[i + 1] - xs[i];
            let a = h0;
            let b = 2.0 * (h0 + h1);
            let c = h1;
            let d = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
            let denom = b - a * c_prime[i - 1];
            c_prime[i] = c / denom;
            d_prime[i] = (d - a * d_prime[i - 1]) / denom;
        }
        for i in (1..n - 1).rev() {
            m[i] = d_prime[i] - c_prime[i] * m[i + 1];
        }
        Ok(Self { xs, ys, m })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }

    /// Value at `x`; the end cubics are continued outside the knot range.
    pub fn eval(&self, x: f64) -> f64 {
        let i = segment_index(&self.xs, x);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}
