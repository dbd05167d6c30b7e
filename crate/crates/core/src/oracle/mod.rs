//! Reference-label oracle: exact overlap measures, synthetic degradations and
//! degraded-corpus construction.

pub mod corpus;
pub mod degrade;
pub mod morphology;
pub mod overlap;
pub mod phantom;
pub mod resample;

pub use corpus::{build_corpus, Corpus, CorpusConfig, CorpusManifest, CorpusRecord, CorpusSource, Split};
pub use degrade::{degrade, degrade_with_neighbors, DegradationKind, DegradationSpec};
pub use overlap::{dsc, nsd, slice_dsc};
pub use resample::{resample_corpus, BalanceKey};
