use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(
        "packing failed: reached icvf {achieved:.4} (scale {scale:.4}) of target {target:.4} after {iterations} iterations"
    )]
    PackingFailed {
        target: f64,
        achieved: f64,
        scale: f64,
        iterations: usize,
    },

    #[error("geometry inconsistency for particle {particle}: {detail}")]
    Geometry { particle: usize, detail: String },

    #[error("particle {particle} exceeded {cap} surface events in one step; dt too large for the geometry")]
    EventCap { particle: usize, cap: usize },

    #[error("runaway particle {particle} at sample {sample}: displacement {displacement:.3} um exceeds {limit:.3} um")]
    Runaway {
        particle: usize,
        sample: usize,
        displacement: f64,
        limit: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("insufficient temporal sampling: {0}")]
    InsufficientSampling(String),

    #[error("degenerate fit window: {0}")]
    DegenerateWindow(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::PackingFailed { .. }
                | Error::Geometry { .. }
                | Error::EventCap { .. }
                | Error::Runaway { .. }
                | Error::NonFinite(_)
                | Error::FitFailed(_)
        )
    }
}
