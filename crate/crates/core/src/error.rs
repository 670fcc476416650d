use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}` in panel file")]
    MissingColumn(String),

    #[error("unbalanced panel: asset `{asset}` has no complete observation for period `{period}`")]
    UnbalancedPanel { asset: String, period: String },

    #[error("duplicate observation for asset `{asset}` in period `{period}`")]
    DuplicateObservation { asset: String, period: String },

    #[error("characteristics for period {period} (`{label}`) are rank deficient")]
    RankDeficientCharacteristics { period: usize, label: String },

    #[error("singular values {k} and {} coincide; rotation is undetermined", k + 1)]
    DegenerateSpectrum { k: usize },

    #[error("projected loadings X_t·Γ lose rank in period {period}")]
    RankDeficientLoadings { period: usize },

    #[error("factor Gram matrix is singular")]
    SingularFactorGram,

    #[error("incompatible dimensions: {0}")]
    IncompatibleDimensions(String),

    #[error("orthogonal complement is degenerate in period {period}: Ω columns collide with span(X_t)")]
    DegenerateOrthoComplement { period: usize },

    #[error("characteristic weight {index} is not positive ({value})")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("zero variance in tested cell ({row}, {col})")]
    ZeroVariance { row: usize, col: usize },

    #[error("variance matrix of loading row {0} is singular")]
    SingularVariance(usize),

    #[error("K must be < min(L,T) and >= 1 (K = {k}, L = {l}, T = {t})")]
    InvalidRank { k: usize, l: usize, t: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by degenerate numerics rather than malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateSpectrum { .. }
                | Error::RankDeficientLoadings { .. }
                | Error::SingularFactorGram
                | Error::DegenerateOrthoComplement { .. }
                | Error::ZeroVariance { .. }
                | Error::SingularVariance(_)
                | Error::InvalidRank { .. }
        )
    }
}
