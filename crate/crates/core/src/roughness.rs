//! Geometrical averaging of the smooth-surface force over the height
//! histograms of both surfaces.
//!
//! Heights are measured from the lowest point of each surface; the zero
//! roughness level H₀ = Σ vᵢhᵢ is the plane relative to which separations are
//! defined. The averaged force is
//!
//! ```text
//! F_rough(a) = Σᵢ Σₖ vᵢ vₖ F(a + H₀¹ + H₀² − hᵢ − hₖ)
//! ```

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp::{check_strictly_increasing, CubicSpline};

/// Discrete height distribution {(vᵢ, hᵢ)}.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughnessProfile {
    v: Vec<f64>,
    h: Vec<f64>,
    h0: f64,
}

impl RoughnessProfile {
    pub fn new(v: Vec<f64>, h: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.len() != h.len() {
            return Err(Error::data(format!(
                "roughness profile needs matching, non-empty columns (got {} and {})",
                v.len(),
                h.len()
            )));
        }
        if let Some(x) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::data(format!(
                "area fractions must be non-negative, got {x}"
            )));
        }
        let total: f64 = v.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::data(format!(
                "area fractions must sum to 1, got {total}"
            )));
        }
        if h[0].abs() > 1e-9 {
            return Err(Error::data(format!(
                "the first height must be 0 nm, got {}",
                h[0]
            )));
        }
        if h.len() > 1 {
            check_strictly_increasing(&h, "roughness heights")?;
        }
        let h0 = v.iter().zip(&h).map(|(v, h)| v * h).sum();
        Ok(Self { v, h, h0 })
    }

    /// A perfectly flat surface.
    pub fn flat() -> Self {
        Self {
            v: vec![1.0],
            h: vec![0.0],
            h0: 0.0,
        }
    }

    /// Reads `v,h_nm` CSV (header required, `#` comments).
    pub fn from_reader<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::csv(origin, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["v", "h_nm"] {
            return Err(Error::data(format!(
                "{origin}: expected header `v,h_nm`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut v = Vec::new();
        let mut h = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(origin, e))?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| {
                    Error::data(format!(
                        "{origin}: row {} column {} is not a number",
                        i + 1,
                        k + 1
                    ))
                })
            };
            v.push(parse(0)?);
            h.push(parse(1)?);
        }
        Self::new(v, h).map_err(|e| Error::data(format!("{origin}: {e}")))
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f, &path.display().to_string())
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["v", "h_nm"])
            .map_err(|e| Error::csv("roughness output", e))?;
        for (v, h) in self.v.iter().zip(&self.h) {
            w.write_record([v.to_string(), h.to_string()])
                .map_err(|e| Error::csv("roughness output", e))?;
        }
        w.flush().map_err(|e| Error::io("roughness output", e))?;
        Ok(())
    }

    pub fn fractions(&self) -> &[f64] {
        &self.v
    }

    pub fn heights(&self) -> &[f64] {
        &self.h
    }

    pub fn max_height(&self) -> f64 {
        self.h[self.h.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// H₀ = Σ vᵢhᵢ.
pub fn zero_roughness_level(p: &RoughnessProfile) -> f64 {
    p.h0
}

/// Smallest local separation entering the average at nominal separation `a`.
pub fn min_effective_separation(p1: &RoughnessProfile, p2: &RoughnessProfile, a_nm: f64) -> f64 {
    a_nm + p1.h0 + p2.h0 - p1.max_height() - p2.max_height()
}

/// Roughness-averaged force at nominal separation `a_nm`.
pub fn rough_force<F>(
    f_smooth: F,
    p_ito: &RoughnessProfile,
    p_au: &RoughnessProfile,
    a_nm: f64,
) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let min_sep = min_effective_separation(p_ito, p_au, a_nm);
    if !(min_sep > 0.0) {
        return Err(Error::invalid(format!(
            "roughness peaks touch at a = {a_nm} nm (smallest local separation {min_sep:.3} nm)"
        )));
    }
    let base = a_nm + p_ito.h0 + p_au.h0;
    let mut total = 0.0;
    for (vi, hi) in p_ito.v.iter().zip(&p_ito.h) {
        for (vk, hk) in p_au.v.iter().zip(&p_au.h) {
            total += vi * vk * f_smooth(base - hi - hk)?;
        }
    }
    Ok(total)
}

/// (F_rough − F_smooth)/|F_smooth|. For an attractive (negative) force a
/// negative value means roughness increases the magnitude.
pub fn roughness_correction<F>(
    f_smooth: F,
    p_ito: &RoughnessProfile,
    p_au: &RoughnessProfile,
    a_nm: f64,
) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let smooth = f_smooth(a_nm)?;
    if smooth == 0.0 {
        return Err(Error::invalid(format!(
            "smooth force vanishes at a = {a_nm} nm"
        )));
    }
    let rough = rough_force(&f_smooth, p_ito, p_au, a_nm)?;
    Ok((rough - smooth) / smooth.abs())
}

/// Smooth force tabulated on a dense grid, interpolated by a cubic spline of
/// ln|F| against ln a. Forces must keep one sign over the table.
#[derive(Debug, Clone)]
pub struct SmoothForceTable {
    spline: CubicSpline,
    sign: f64,
    a_min: f64,
    a_max: f64,
}

impl SmoothForceTable {
    pub fn new(a_nm: &[f64], f_pn: &[f64]) -> Result<Self> {
        if a_nm.len() != f_pn.len() || a_nm.len() < 3 {
            return Err(Error::invalid(
                "force table needs at least 3 matching points",
            ));
        }
        let sign = f_pn[0].signum();
        if sign == 0.0 || f_pn.iter().any(|f| f.signum() != sign || !f.is_finite()) {
            return Err(Error::invalid(
                "tabulated force must be finite, non-zero and of one sign",
            ));
        }
        if a_nm[0] <= 0.0 {
            return Err(Error::invalid("tabulated separations must be positive"));
        }
        let x = a_nm.iter().map(|a| a.ln()).collect();
        let y = f_pn.iter().map(|f| f.abs().ln()).collect();
        Ok(Self {
            spline: CubicSpline::new(x, y)?,
            sign,
            a_min: a_nm[0],
            a_max: a_nm[a_nm.len() - 1],
        })
    }

    /// Tabulates `f` on a geometric grid over [a_min, a_max] with consecutive
    /// points at most `ratio` apart, evaluating points in parallel.
    pub fn tabulate<F>(a_min: f64, a_max: f64, ratio: f64, f: F) -> Result<Self>
    where
        F: Fn(f64) -> Result<f64> + Sync,
    {
        if !(a_min > 0.0 && a_max > a_min && ratio > 1.0) {
            return Err(Error::invalid(format!(
                "invalid force table range [{a_min}, {a_max}] nm with ratio {ratio}"
            )));
        }
        let n = ((a_max / a_min).ln() / ratio.ln()).ceil() as usize + 1;
        let n = n.max(3);
        let grid: Vec<f64> = (0..n)
            .map(|i| a_min * (a_max / a_min).powf(i as f64 / (n - 1) as f64))
            .collect();
        let values = grid.par_iter().map(|&a| f(a)).collect::<Result<Vec<_>>>()?;
        Self::new(&grid, &values)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a_min, self.a_max)
    }

    pub fn eval(&self, a_nm: f64) -> Result<f64> {
        // Allow for rounding at the ends of the exponentiated grid.
        let slack = 1e-9 * self.a_max;
        if a_nm < self.a_min - slack || a_nm > self.a_max + slack {
            return Err(Error::invalid(format!(
                "separation {a_nm} nm is outside the tabulated range [{}, {}] nm",
                self.a_min, self.a_max
            )));
        }
        Ok(self.sign * self.spline.eval(a_nm.ln()).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn inverse_cube(a: f64) -> Result<f64> {
        Ok(-1e6 / (a * a * a))
    }

    #[test]
    fn zero_level_examples() {
        assert_eq!(zero_roughness_level(&RoughnessProfile::flat()), 0.0);
        let p = RoughnessProfile::new(vec![0.5, 0.5], vec![0.0, 10.0]).unwrap();
        assert_eq!(zero_roughness_level(&p), 5.0);
    }

    #[test]
    fn profile_validation() {
        assert!(RoughnessProfile::new(vec![], vec![]).is_err());
        assert!(RoughnessProfile::new(vec![0.5, 0.4], vec![0.0, 1.0]).is_err());
        assert!(RoughnessProfile::new(vec![1.5, -0.5], vec![0.0, 1.0]).is_err());
        assert!(RoughnessProfile::new(vec![0.5, 0.5], vec![1.0, 2.0]).is_err());
        assert!(RoughnessProfile::new(vec![0.5, 0.5], vec![0.0, 0.0]).is_err());
        let text = "v,h_nm\n0.25,0\n0.75,4\n";
        let p = RoughnessProfile::from_reader(text.as_bytes(), "inline").unwrap();
        assert_eq!(zero_roughness_level(&p), 3.0);
        assert!(RoughnessProfile::from_reader("h,v\n1,0\n".as_bytes(), "inline").is_err());
    }

    #[test]
    fn flat_profiles_leave_force_unchanged() {
        let flat = RoughnessProfile::flat();
        assert_eq!(
            rough_force(inverse_cube, &flat, &flat, 80.0).unwrap(),
            inverse_cube(80.0).unwrap()
        );
        assert_eq!(
            roughness_correction(inverse_cube, &flat, &flat, 80.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn convex_force_gains_magnitude() {
        let p = RoughnessProfile::new(vec![0.5, 0.5], vec![0.0, 4.0]).unwrap();
        let c = roughness_correction(inverse_cube, &p, &p, 60.0).unwrap();
        assert!(c < 0.0);
        assert!(
            rough_force(inverse_cube, &p, &p, 60.0).unwrap().abs()
                > inverse_cube(60.0).unwrap().abs()
        );
    }

    #[test]
    fn touching_peaks_are_rejected() {
        let p = RoughnessProfile::new(vec![0.9, 0.1], vec![0.0, 30.0]).unwrap();
        assert!(rough_force(inverse_cube, &p, &p, 40.0).is_err());
    }

    #[test]
    fn table_interpolates_power_law() {
        let t = SmoothForceTable::tabulate(20.0, 2100.0, 1.02, inverse_cube).unwrap();
        for a in [20.0, 33.3, 80.0, 117.5, 2100.0] {
            assert_relative_eq!(
                t.eval(a).unwrap(),
                inverse_cube(a).unwrap(),
                max_relative = 1e-10
            );
        }
        assert!(t.eval(10.0).is_err());
    }

    #[test]
    fn table_rejects_sign_change() {
        assert!(SmoothForceTable::new(&[1.0, 2.0, 3.0], &[-1.0, 1.0, -1.0]).is_err());
    }
}
