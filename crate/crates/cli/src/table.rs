//! Theory force tables with one column per computed band.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CliError, Result};

const LOWER: &str = "f_lower_pn";
const UPPER: &str = "f_upper_pn";

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryTable {
    pub a_nm: Vec<f64>,
    pub lower_pn: Option<Vec<f64>>,
    pub upper_pn: Option<Vec<f64>>,
}

impl TheoryTable {
    pub fn new(
        a_nm: Vec<f64>,
        lower_pn: Option<Vec<f64>>,
        upper_pn: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = a_nm.len();
        let cols_ok = [&lower_pn, &upper_pn]
            .iter()
            .all(|c| c.as_ref().is_none_or(|c| c.len() == n));
        if n == 0 || !cols_ok || (lower_pn.is_none() && upper_pn.is_none()) {
            return Err(CliError::Data(
                "theory table needs separations and at least one matching band column".into(),
            ));
        }
        if a_nm.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CliError::Data(
                "theory separations must be strictly ascending".into(),
            ));
        }
        Ok(Self {
            a_nm,
            lower_pn,
            upper_pn,
        })
    }

    fn columns(&self) -> Vec<(&'static str, &Vec<f64>)> {
        let mut cols = Vec::new();
        if let Some(c) = &self.lower_pn {
            cols.push((LOWER, c));
        }
        if let Some(c) = &self.upper_pn {
            cols.push((UPPER, c));
        }
        cols
    }

    /// (min, max) over the available bands at row `i`.
    pub fn band(&self, i: usize) -> (f64, f64) {
        let vals: Vec<f64> = self.columns().iter().map(|(_, c)| c[i]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Band edges linearly interpolated to `a_nm`, or None outside the table.
    pub fn band_at(&self, a_nm: f64) -> Option<(f64, f64)> {
        let a = &self.a_nm;
        if a_nm < a[0] || a_nm > a[a.len() - 1] {
            return None;
        }
        let k = a
            .partition_point(|&x| x <= a_nm)
            .clamp(1, a.len().max(2) - 1);
        if a.len() == 1 {
            return Some(self.band(0));
        }
        let t = (a_nm - a[k - 1]) / (a[k] - a[k - 1]);
        let (l0, h0) = self.band(k - 1);
        let (l1, h1) = self.band(k);
        Some((l0 + t * (l1 - l0), h0 + t * (h1 - h0)))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| CliError::Data(format!("theory output: {e}"));
        let cols = self.columns();
        let mut header = vec!["a_nm"];
        header.extend(cols.iter().map(|c| c.0));
        w.write_record(&header).map_err(err)?;
        for (i, a) in self.a_nm.iter().enumerate() {
            let mut row = vec![format!("{a}")];
            row.extend(cols.iter().map(|(_, c)| format!("{:.9e}", c[i])));
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(|e| CliError::io("theory output", e))
    }

    pub fn from_reader<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let bad = |msg: String| CliError::Data(format!("{origin}: {msg}"));
        let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        let names: Vec<&str> = headers.iter().collect();
        if names.first() != Some(&"a_nm")
            || names.len() < 2
            || names[1..].iter().any(|h| *h != LOWER && *h != UPPER)
        {
            return Err(bad(format!(
                "expected header `a_nm` followed by `{LOWER}` and/or `{UPPER}`"
            )));
        }
        let mut a = Vec::new();
        let mut cols = vec![Vec::new(); names.len() - 1];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let v = rec
                .iter()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            if v.len() != names.len() {
                return Err(bad(format!("row {} has {} fields", i + 1, v.len())));
            }
            a.push(v[0]);
            for (c, x) in cols.iter_mut().zip(&v[1..]) {
                c.push(*x);
            }
        }
        let mut lower = None;
        let mut upper = None;
        for (name, col) in names[1..].iter().zip(cols) {
            if *name == LOWER {
                lower = Some(col);
            } else {
                upper = Some(col);
            }
        }
        Self::new(a, lower, upper).map_err(|e| bad(e.to_string()))
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        Self::from_reader(f, &path.display().to_string())
    }
}

/// Casimir force used to synthesise curves.
#[derive(Debug, Clone)]
pub enum ForceLaw {
    /// F(a) = f80 · (80 nm / a)^exponent.
    Power { f80_pn: f64, exponent: f64 },
    /// Log-log interpolation of a band midpoint, continued by the end slopes.
    Table { ln_a: Vec<f64>, ln_f: Vec<f64> },
}

impl ForceLaw {
    pub fn from_table(table: &TheoryTable) -> Result<Self> {
        if table.a_nm.len() < 2 {
            return Err(CliError::Data(
                "force law table needs two or more rows".into(),
            ));
        }
        let mut ln_f = Vec::with_capacity(table.a_nm.len());
        for i in 0..table.a_nm.len() {
            let (lo, hi) = table.band(i);
            let mid = 0.5 * (lo + hi);
            if !(mid < 0.0) {
                return Err(CliError::Data(format!(
                    "force law table must be attractive everywhere (row {})",
                    i + 1
                )));
            }
            ln_f.push((-mid).ln());
        }
        Ok(ForceLaw::Table {
            ln_a: table.a_nm.iter().map(|a| a.ln()).collect(),
            ln_f,
        })
    }

    pub fn eval(&self, a_nm: f64) -> f64 {
        match self {
            ForceLaw::Power { f80_pn, exponent } => f80_pn * (80.0 / a_nm).powf(*exponent),
            ForceLaw::Table { ln_a, ln_f } => {
                let x = a_nm.ln();
                let n = ln_a.len();
                let k = ln_a.partition_point(|&v| v <= x).clamp(1, n - 1);
                let t = (x - ln_a[k - 1]) / (ln_a[k] - ln_a[k - 1]);
                -(ln_f[k - 1] + t * (ln_f[k] - ln_f[k - 1])).exp()
            }
        }
    }
}
