//! Small statistics helpers: Student-t quantiles, weighted regression,
//! parabola fits and Gaussian summaries.

use nalgebra::{Matrix3, Vector3};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Two-sided 95% Student-t quantile t₀.₉₇₅ for `dof` degrees of freedom.
pub fn t_quantile_95(dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::invalid(
            "Student-t quantile needs at least one degree of freedom",
        ));
    }
    let t = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::invalid(format!("Student-t: {e}")))?;
    Ok(t.inverse_cdf(0.975))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// 95% Student-t half-width of the mean.
pub fn mean_half_width_95(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::invalid(
            "a confidence interval needs at least two samples",
        ));
    }
    Ok(t_quantile_95(xs.len() - 1)? * sample_sd(xs) / (xs.len() as f64).sqrt())
}

/// Weighted straight-line fit y = intercept + slope·x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    /// Standard error of the slope, scaled by the residual variance.
    pub slope_se: f64,
    /// Weighted mean of y and its standard error.
    pub weighted_mean: f64,
    pub mean_se: f64,
    pub dof: usize,
}

pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 3 || y.len() != n || w.len() != n {
        return Err(Error::invalid(
            "weighted line fit needs at least 3 matching points",
        ));
    }
    if w.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be positive and finite"));
    }
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * (x - xm).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::invalid("weighted line fit needs distinct abscissae"));
    }
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((x, y), w)| w * (x - xm) * (y - ym))
        .sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((x, y), w)| w * (y - intercept - slope * x).powi(2))
        .sum();
    let s2 = chi2 / (n - 2) as f64;
    // Spread about the mean alone, for the mean's own interval.
    let chi2_mean: f64 = y.iter().zip(w).map(|(y, w)| w * (y - ym).powi(2)).sum();
    Ok(LineFit {
        intercept,
        slope,
        slope_se: (s2 / sxx).sqrt(),
        weighted_mean: ym,
        mean_se: (chi2_mean / (n - 1) as f64 / sw).sqrt(),
        dof: n - 2,
    })
}

/// Least-squares parabola y = c₀ + c₁x + c₂x² with its covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParabolaFit {
    pub coeffs: [f64; 3],
    pub cov: [[f64; 3]; 3],
    pub rss: f64,
    pub dof: usize,
}

impl ParabolaFit {
    /// Abscissa of the extremum, −c₁/(2c₂).
    pub fn vertex(&self) -> f64 {
        -self.coeffs[1] / (2.0 * self.coeffs[2])
    }

    /// Standard error of the vertex by first-order propagation.
    pub fn vertex_se(&self) -> f64 {
        let [_, c1, c2] = self.coeffs;
        let g1 = -1.0 / (2.0 * c2);
        let g2 = c1 / (2.0 * c2 * c2);
        let v =
            g1 * g1 * self.cov[1][1] + 2.0 * g1 * g2 * self.cov[1][2] + g2 * g2 * self.cov[2][2];
        v.max(0.0).sqrt()
    }
}

/// Ordinary least-squares parabola through (x, y). The abscissae are
/// centred internally for conditioning.
pub fn fit_parabola(x: &[f64], y: &[f64]) -> Result<ParabolaFit> {
    let n = x.len();
    if n < 4 || y.len() != n {
        return Err(Error::invalid(
            "parabola fit needs at least 4 matching points",
        ));
    }
    let xc = mean(x);
    let mut ata = Matrix3::<f64>::zeros();
    let mut aty = Vector3::<f64>::zeros();
    for (&xi, &yi) in x.iter().zip(y) {
        let u = xi - xc;
        let row = Vector3::new(1.0, u, u * u);
        ata += row * row.transpose();
        aty += row * yi;
    }
    let inv = ata.try_inverse().ok_or_else(|| {
        Error::invalid("parabola fit is degenerate (need at least 3 distinct abscissae)")
    })?;
    let b = inv * aty;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let u = xi - xc;
            (yi - b[0] - b[1] * u - b[2] * u * u).powi(2)
        })
        .sum();
    let s2 = rss / (n - 3) as f64;
    // Undo the centring: y = b0 + b1(x − xc) + b2(x − xc)².
    let t = Matrix3::new(1.0, -xc, xc * xc, 0.0, 1.0, -2.0 * xc, 0.0, 0.0, 1.0);
    let c = t * b;
    let cov = t * (inv * s2) * t.transpose();
    let mut cov_arr = [[0.0; 3]; 3];
    for (i, row) in cov_arr.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cov[(i, j)];
        }
    }
    Ok(ParabolaFit {
        coeffs: [c[0], c[1], c[2]],
        cov: cov_arr,
        rss,
        dof: n - 3,
    })
}

/// Mean, spread and normalised histogram of samples at one separation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: f64,
    pub sigma: f64,
    pub n: usize,
    /// (bin centre, fraction of samples) pairs; fractions sum to 1.
    pub histogram: Vec<(f64, f64)>,
}

impl GaussianStats {
    /// Central 95% interval of the fitted Gaussian.
    pub fn interval_95(&self) -> (f64, f64) {
        (self.mean - 1.96 * self.sigma, self.mean + 1.96 * self.sigma)
    }

    /// True when the 95% intervals of the two distributions intersect.
    pub fn overlaps(&self, other: &GaussianStats) -> bool {
        let (a0, a1) = self.interval_95();
        let (b0, b1) = other.interval_95();
        a0 <= b1 && b0 <= a1
    }
}

pub fn gaussian_stats(samples: &[f64], bin_width: f64) -> Result<GaussianStats> {
    if samples.len() < 30 {
        return Err(Error::invalid(format!(
            "Gaussian statistics need at least 30 samples, got {}",
            samples.len()
        )));
    }
    if !(bin_width > 0.0) {
        return Err(Error::invalid(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let mean = mean(samples);
    let sigma = sample_sd(samples);
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = (lo / bin_width).floor() * bin_width;
    let bins = (((hi - start) / bin_width).floor() as usize) + 1;
    let mut counts = vec![0usize; bins];
    for s in samples {
        let k = (((s - start) / bin_width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = samples.len();
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (start + (k as f64 + 0.5) * bin_width, c as f64 / n as f64))
        .collect();
    Ok(GaussianStats {
        mean,
        sigma,
        n,
        histogram,
    })
}
