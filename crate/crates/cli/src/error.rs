use std::process::ExitCode;

use nettraj::autograd::AutogradError;
use nettraj::codec::CodecError;
use nettraj::metrics::MetricsError;
use nettraj::model::ModelError;
use nettraj::network::NetworkError;
use nettraj::synth::SynthError;
use nettraj::trainer::TrainError;
use thiserror::Error;

/// Failures grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        })
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn autograd_numerical(e: &AutogradError) -> bool {
    matches!(e, AutogradError::NonFinite { .. } | AutogradError::NonFiniteGradient { .. })
}

fn model_numerical(e: &ModelError) -> bool {
    matches!(e, ModelError::Autograd(a) if autograd_numerical(a))
}

fn classify(numerical: bool, msg: String) -> CliError {
    if numerical {
        CliError::Numerical(msg)
    } else {
        CliError::Data(msg)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            _ => classify(model_numerical(&e), e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let numerical = match e {
            TrainError::Config(_) => return CliError::Usage(e.to_string()),
            TrainError::Model(m) => return m.into(),
            TrainError::Diverged { .. } => true,
            _ => false,
        };
        classify(numerical, e.to_string())
    }
}

impl From<nettraj::Error> for CliError {
    fn from(e: nettraj::Error) -> Self {
        match e {
            nettraj::Error::Model(m) => m.into(),
            nettraj::Error::Train(t) => t.into(),
            nettraj::Error::Autograd(a) => classify(autograd_numerical(&a), a.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(NetworkError, CodecError, MetricsError, SynthError);
