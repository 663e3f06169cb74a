//! Vehicle trajectory prediction on road networks.
//!
//! Trajectories are rewritten as intersection sequences plus movement
//! direction labels ([`codec`]), then fed to an LSTM encoder-decoder with
//! local graph attention and sliding temporal attention ([`model`]) that is
//! trained with scheduled sampling ([`trainer`]) and scored with edit
//! distance and match-ratio metrics ([`metrics`]).

pub mod autograd;
pub mod codec;
pub mod metrics;
pub mod model;
pub mod network;
pub mod synth;
pub mod trainer;

use thiserror::Error;

pub use codec::{ContextFeatures, EncodedTrajectory, InvalidDirection, RevisionReport, TrajectoryRecord};
pub use network::{EdgeId, EdgeRecord, NodeIdx, NodeRecord, RoadNetwork};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Network(#[from] network::NetworkError),
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
    #[error(transparent)]
    Autograd(#[from] autograd::AutogradError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
