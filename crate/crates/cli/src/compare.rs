//! Theory bands against measured means with their total errors.

use std::io::Write;

use casimir_core::calibration::ErrorBudgetRow;

use crate::error::{CliError, Result};
use crate::table::TheoryTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonPoint {
    pub a_nm: f64,
    pub mean_pn: f64,
    pub total_pn: f64,
    pub band_lo_pn: f64,
    pub band_hi_pn: f64,
    /// The band intersects [mean − total, mean + total].
    pub agrees: bool,
    /// (F_on − F_off)/F_on of the band midpoints, when a carriers-off table
    /// is supplied.
    pub reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub points: Vec<ComparisonPoint>,
    pub fraction_agreeing: f64,
    pub min_reduction: Option<f64>,
    pub max_reduction: Option<f64>,
}

fn intervals_intersect(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Compares at every experimental separation covered by the theory table
/// (and by `reduction_off`, when given).
pub fn compare(
    theory: &TheoryTable,
    reduction_off: Option<&TheoryTable>,
    experiment: &[ErrorBudgetRow],
) -> Result<ComparisonReport> {
    let mut points = Vec::new();
    for row in experiment {
        let Some((lo, hi)) = theory.band_at(row.a_nm) else {
            continue;
        };
        let reduction = match reduction_off {
            Some(off) => match off.band_at(row.a_nm) {
                Some((off_lo, off_hi)) => {
                    let on = 0.5 * (lo + hi);
                    Some((on - 0.5 * (off_lo + off_hi)) / on)
                }
                None => continue,
            },
            None => None,
        };
        let bar = (row.mean_pn - row.total_pn, row.mean_pn + row.total_pn);
        points.push(ComparisonPoint {
            a_nm: row.a_nm,
            mean_pn: row.mean_pn,
            total_pn: row.total_pn,
            band_lo_pn: lo,
            band_hi_pn: hi,
            agrees: intervals_intersect((lo, hi), bar),
            reduction,
        });
    }
    if points.is_empty() {
        return Err(CliError::Data(
            "theory and experiment separation grids do not overlap".into(),
        ));
    }
    let agreeing = points.iter().filter(|p| p.agrees).count();
    let reductions: Vec<f64> = points.iter().filter_map(|p| p.reduction).collect();
    Ok(ComparisonReport {
        fraction_agreeing: agreeing as f64 / points.len() as f64,
        min_reduction: reductions.iter().cloned().reduce(f64::min),
        max_reduction: reductions.iter().cloned().reduce(f64::max),
        points,
    })
}

impl ComparisonReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| CliError::Data(format!("comparison output: {e}"));
        w.write_record([
            "a_nm",
            "f_mean_pn",
            "total_pn",
            "band_lo_pn",
            "band_hi_pn",
            "agrees",
            "reduction",
        ])
        .map_err(err)?;
        for p in &self.points {
            w.write_record([
                format!("{}", p.a_nm),
                format!("{:.6e}", p.mean_pn),
                format!("{:.6e}", p.total_pn),
                format!("{:.6e}", p.band_lo_pn),
                format!("{:.6e}", p.band_hi_pn),
                u8::from(p.agrees).to_string(),
                p.reduction.map_or(String::new(), |r| format!("{r:.6}")),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| CliError::io("comparison output", e))
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "points compared: {}\nagreeing: {:.1}%\n",
            self.points.len(),
            100.0 * self.fraction_agreeing
        );
        if let (Some(lo), Some(hi)) = (self.min_reduction, self.max_reduction) {
            s.push_str(&format!(
                "carrier reduction: {:.1}% to {:.1}%\n",
                100.0 * lo,
                100.0 * hi
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(a_nm: f64, mean_pn: f64, total_pn: f64) -> ErrorBudgetRow {
        ErrorBudgetRow {
            a_nm,
            mean_pn,
            random_pn: 0.0,
            systematic_pn: total_pn,
            total_pn,
            separation_nm: 0.5,
            samples: 100,
        }
    }

    #[test]
    fn agreement_is_interval_intersection() {
        let t = TheoryTable::new(
            vec![60.0, 70.0],
            Some(vec![-100.0, -90.0]),
            Some(vec![-96.0, -86.0]),
        )
        .unwrap();
        let exp = [
            row(60.0, -104.0, 4.0),
            row(60.0, -104.1, 4.0),
            row(70.0, -83.0, 4.0),
            row(80.0, -1.0, 1.0),
        ];
        let r = compare(&t, None, &exp).unwrap();
        assert_eq!(r.points.len(), 3);
        assert_eq!(
            r.points.iter().map(|p| p.agrees).collect::<Vec<_>>(),
            [true, false, true]
        );
        assert!(r.min_reduction.is_none());
        assert!(compare(&t, None, &[row(10.0, -1.0, 1.0)]).is_err());
    }

    #[test]
    fn reduction_uses_band_midpoints() {
        let on = TheoryTable::new(
            vec![60.0, 70.0],
            Some(vec![-110.0, -110.0]),
            Some(vec![-90.0, -90.0]),
        )
        .unwrap();
        let off = TheoryTable::new(vec![60.0, 70.0], Some(vec![-75.0, -75.0]), None).unwrap();
        let r = compare(&on, Some(&off), &[row(65.0, -100.0, 1.0)]).unwrap();
        assert!((r.points[0].reduction.unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(r.max_reduction, r.min_reduction);
    }
}
