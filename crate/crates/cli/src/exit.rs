//! Stable process exit codes and the mapping from library errors onto them.

use std::fmt;
use std::io::ErrorKind;

use egr_core::featurize::FeatureError;
use egr_core::metrics::MetricError;
use egr_core::model::{ModelError, WeightsError};
use egr_core::structio::StructureError;
use egr_core::train::TrainError;

pub const GENERAL: u8 = 1;
pub const PARSE: u8 = 2;
pub const WEIGHTS_MISMATCH: u8 = 3;
pub const NO_OVERLAP: u8 = 4;
pub const UNDEFINED_INTERFACE: u8 = 5;
pub const MISSING_INPUT: u8 = 6;
pub const DIVERGENCE: u8 = 7;
pub const EMPTY_DATASET: u8 = 8;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn msg(code: u8, message: impl fmt::Display) -> Self {
        Self::new(code, anyhow::anyhow!("{message}"))
    }

    pub fn context(self, context: impl fmt::Display) -> Self {
        Self {
            code: self.code,
            error: self.error.context(context.to_string()),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

fn io_code(e: &std::io::Error) -> u8 {
    if e.kind() == ErrorKind::NotFound {
        MISSING_INPUT
    } else {
        GENERAL
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(io_code(&e), e)
    }
}

impl From<StructureError> for Failure {
    fn from(e: StructureError) -> Self {
        let code = match &e {
            StructureError::Parse { .. } | StructureError::Empty => PARSE,
            StructureError::NoOverlap => NO_OVERLAP,
            StructureError::Io(io) => io_code(io),
            _ => GENERAL,
        };
        Self::new(code, e)
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Structure(s) => s.into(),
            other => Self::new(UNDEFINED_INTERFACE, other),
        }
    }
}

impl From<FeatureError> for Failure {
    fn from(e: FeatureError) -> Self {
        let code = match &e {
            FeatureError::SurfaceParse { .. } => PARSE,
            FeatureError::Io(io) => io_code(io),
            _ => GENERAL,
        };
        Self::new(code, e)
    }
}

impl From<WeightsError> for Failure {
    fn from(e: WeightsError) -> Self {
        Self::new(WEIGHTS_MISMATCH, e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Self::new(WEIGHTS_MISMATCH, e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Structure(s) => s.into(),
            TrainError::Feature(f) => f.into(),
            TrainError::Metric(m) => m.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Weights(w) => w.into(),
            TrainError::Io(io) => io.into(),
            TrainError::Example { id, source } => Self::from(*source).context(format!("example {id}")),
            e @ (TrainError::Divergence { .. } | TrainError::NonFiniteGradient(_)) => Self::new(DIVERGENCE, e),
            e @ TrainError::EmptyDataset => Self::new(EMPTY_DATASET, e),
            e => Self::new(GENERAL, e),
        }
    }
}
