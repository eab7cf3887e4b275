//! Neural score matching for treatment-effect estimation.
//!
//! A propensity network is trained on `(X, T)`; the pre-activation outputs of
//! its layers serve as balancing scores. Treated units are matched to
//! controls in score space, the ATT is estimated from the matches, and the
//! covariate imbalance after matching is bracketed by bounds computed from the
//! singular values of the layer weights.

pub mod bounds;
pub mod codec;
pub mod data;
pub mod dgp;
pub mod error;
pub mod linalg;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod scores;

pub use bounds::{BoundReport, LipschitzConstants};
pub use data::{load_csv, save_csv, Dataset, LoadOptions};
pub use dgp::{DgpConfig, ScenarioKind, SplitSpec};
pub use error::{Error, Result};
pub use linalg::{Matrix, SvdResult};
pub use matching::MatchWeights;
pub use metrics::{DiscreteJoint, Discrepancy, EmpiricalPair};
pub use nn::{ActivationKind, DenseLayer, Mlp, TrainConfig};
pub use scores::{ScoreKind, ScoreProvider};
