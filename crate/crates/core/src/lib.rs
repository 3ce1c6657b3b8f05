//! Multinomial outcomes under sample selection.
//!
//! The library decomposes joint outcome/selection probabilities through the
//! Ali-Mikhail-Haq bivariate logistic CDF, recovers latent categorical
//! distributions in closed form from a binary instrument, and fits a
//! semiparametric multinomial logit with selection by a two-step procedure
//! with a generated-regressor sandwich variance. A simulation harness
//! validates the whole chain end to end.

pub mod bilogistic;
pub mod cli;
pub mod dgp;
pub mod estimate;
pub mod identify;
pub mod llr;
pub mod numerics;

pub use bilogistic::{Association, LogOdds, Probability};
pub use estimate::{Dataset, EstimatorConfig, FitResult, ModelParams};
pub use identify::{LatentCategorical, ObservedSelectionTable};
