//! Synthetic PBPK concentration–time data.
//!
//! Drugs are sampled from six descriptors, simulated through a whole-body
//! well-stirred compartment model after an IV bolus, and assembled into an
//! `N×T×O` concentration tensor.

mod dataset;
mod drug;
pub mod ode;
mod organs;

pub use dataset::{
    generate_dataset, make_supervised_pairs, simulate_drug, split_dataset, ConcentrationTensor, DatagenConfig,
    DatasetSplit, DrugSequence, NormMode, NormStats, SplitPart, SupervisedPair, DATASET_SCHEMA_VERSION, MIN_DRUGS,
    NORM_EPS,
};
pub use drug::{
    partition_coefficient, DrugDescriptor, CL_RANGE, DESCRIPTOR_LEN, FU_RANGE, LOGP_RANGE, MW_RANGE,
    TRANSPORTER_PROBABILITY, VD_RANGE,
};
pub use ode::{ode_rhs, rk4, rk4_integrate, CompartmentSystem};
pub use organs::{Organ, OrganGraph, OrganRole, DEFAULT_CARDIAC_OUTPUT};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid organ graph: {0}")]
    InvalidGraph(String),
    #[error("unknown organ `{0}`")]
    UnknownOrgan(String),
    #[error("state has {got} entries, graph has {expected} organs")]
    StateLength { expected: usize, got: usize },
    #[error("integration produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("drug {index}: {source}")]
    Drug {
        index: usize,
        #[source]
        source: Box<DataError>,
    },
    #[error("{0}")]
    InvalidConfig(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("organ labels differ: expected {expected:?}, got {got:?}")]
    OrganMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}
