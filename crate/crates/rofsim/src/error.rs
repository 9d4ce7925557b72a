use thiserror::Error;

/// Errors surfaced by signal operations, element models and the scenario runner.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("frequency shift of {shift_hz:.3e} Hz would alias the occupied band [{band_lo_hz:.3e}, {band_hi_hz:.3e}] Hz outside Nyquist +/-{nyquist_hz:.3e} Hz")]
    AliasingShift {
        shift_hz: f64,
        band_lo_hz: f64,
        band_hi_hz: f64,
        nyquist_hz: f64,
    },

    #[error("target sample rate {new_rate_hz:.3e} Sa/s is below the occupied band [{band_lo_hz:.3e}, {band_hi_hz:.3e}] Hz")]
    RateBelowBand {
        new_rate_hz: f64,
        band_lo_hz: f64,
        band_hi_hz: f64,
    },

    #[error("resampling {len} samples from {old_rate_hz:.6e} to {new_rate_hz:.6e} Sa/s does not give an integer sample count")]
    NonCommensurateRates {
        len: usize,
        old_rate_hz: f64,
        new_rate_hz: f64,
    },

    #[error("negative attenuation {atten_db} dB")]
    NegativeAttenuation { atten_db: f64 },

    #[error("buffer grids differ ({0})")]
    GridMismatch(String),

    #[error("filter slot [{slot_lo_hz:.6e}, {slot_hi_hz:.6e}] Hz lies outside the buffer band [{band_lo_hz:.6e}, {band_hi_hz:.6e}] Hz")]
    SlotOutsideBand {
        slot_lo_hz: f64,
        slot_hi_hz: f64,
        band_lo_hz: f64,
        band_hi_hz: f64,
    },

    #[error("frame synchronization failed: peak correlation {peak:.3} below threshold {threshold:.3}")]
    SyncFailure { peak: f64, threshold: f64 },

    #[error("EVM {evm_percent}% outside (0, 100]")]
    EvmOutOfRange { evm_percent: f64 },

    #[error("frame carries {got} data bits but the geometry requires {expected}")]
    BitLengthMismatch { got: usize, expected: usize },

    #[error("resolution bandwidth {rbw_hz:.3e} Hz too fine for a {len}-sample buffer at {rate_hz:.3e} Sa/s")]
    RbwTooFine { rbw_hz: f64, len: usize, rate_hz: f64 },

    #[error("measurement bands overlap: {0}")]
    BandOverlap(String),

    #[error("element '{label}' cannot reach the requested power plan: needs {needed_db:.2} dB, range is [{min_db}, {max_db}] dB")]
    InfeasibleGain {
        label: String,
        needed_db: f64,
        min_db: f64,
        max_db: f64,
    },

    #[error("element '{label}' failed: {source}")]
    Element {
        label: String,
        #[source]
        source: Box<SimError>,
    },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("scenario validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
