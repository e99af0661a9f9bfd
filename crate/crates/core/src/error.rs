use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("budget of {budget_mb} MB is infeasible: 1-bit floor is {floor_mb} MB")]
    Budget { budget_mb: f64, floor_mb: f64 },

    #[error("degenerate range [{min}, {max}]{}", layer_suffix(*.layer))]
    DegenerateRange {
        min: f64,
        max: f64,
        layer: Option<usize>,
    },

    #[error("calibration failed for layer {layer}: {message}")]
    Calibration { layer: usize, message: String },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn layer_suffix(layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!(" at layer {l}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Attach a layer index, unless the error already names one.
    pub(crate) fn at_layer(self, layer: usize) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            Error::DegenerateRange { min, max, layer: None } => Error::DegenerateRange {
                min,
                max,
                layer: Some(layer),
            },
            e @ Error::DegenerateRange { .. } => e,
            e => Error::Layer {
                layer,
                source: Box::new(e),
            },
        }
    }

    /// The layer index this error refers to, if any.
    pub fn layer(&self) -> Option<usize> {
        match self {
            Error::Layer { layer, .. } | Error::Calibration { layer, .. } => Some(*layer),
            Error::DegenerateRange { layer, .. } => *layer,
            _ => None,
        }
    }
}
