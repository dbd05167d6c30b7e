//! Label-quality estimation for organ segmentations.
//!
//! A conditioned regressor predicts the Dice score of a (CT volume, mask)
//! pair without a reference label. The crate also holds the reference
//! oracles used to build training data and to validate the model: exact
//! overlap measures, synthetic degradations, an optimal pairing solver for the
//! ranking loss, evaluation metrics and quality-control selectors.
//!
//! Numeric kernels are generic over [`Scalar`]; the aliases at the crate root
//! fix the precision used by the CLI.

pub mod conditioning;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod matrix;
pub mod oracle;
pub mod pairing;
pub mod preprocess;
pub mod qc;
pub mod record;
pub mod regressor;
pub mod scalar;
pub mod volume;

pub use error::{Error, Result};
pub use record::QualityRecord;
pub use scalar::Scalar;
pub use volume::{ClassVocabulary, Mask, Sex, SubjectMeta, Volume};

/// Similarity and cost matrices at metric precision.
pub type Matrix = matrix::SquareMatrix<f64>;
pub type Pairing = pairing::PairingResult<f64>;
pub type Batch = loss::BatchTargets<f64>;
pub type Loss = loss::LossBreakdown<f64>;
/// Regressor at training/inference precision.
pub type Model = regressor::QualityModel<f32>;
pub type Outcome = regressor::TrainOutcome<f32>;
