use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A model was evaluated outside the domain where it is finite.
    #[error("{model}: argument {value} outside domain ({reason})")]
    Domain {
        model: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("no convergence in {what} after {iterations} steps (estimate {estimate:e}, error {error:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        estimate: f64,
        error: f64,
    },

    #[error("polynomial fit failed certification: max relative error {max_rel_error:e} exceeds {limit:e}")]
    Certification { max_rel_error: f64, limit: f64 },

    /// Residual potential drifts with separation beyond its stated precision.
    #[error("calibration anomaly: V0 trend {slope_mv_per_nm:.4} mV/nm (t = {t_stat:.2}) changes V0 by {change_mv:.2} mV over the analysed range")]
    CalibrationAnomaly {
        slope_mv_per_nm: f64,
        t_stat: f64,
        change_mv: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn csv(path: impl AsRef<std::path::Path>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
