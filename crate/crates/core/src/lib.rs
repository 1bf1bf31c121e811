//! Model-forest ensemble Kalman filtering.
//!
//! Ensembles of high-fidelity states are combined with ensembles of cheaper
//! surrogate models through linear control variates. Surrogates are arranged
//! in trees below a high-fidelity root, and several trees can be averaged in a
//! forest. The crate provides the statistics, gains, forecast and analysis
//! steps, plus a quasi-geostrophic solver, a POD reduced-order model and
//! Lorenz-96 for experiments.
//!
//! The numerical core is generic over the scalar type ([`Real`], implemented
//! for `f32` and `f64`); aliases with an `64` suffix fix it to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod control;
pub mod error;
pub mod forecast;
pub mod forest;
pub mod linalg;
pub mod models;
pub mod operator;
pub mod scalar;
pub mod stats;

pub use analysis::{
    apply_heuristics, enkf_analysis, forest_analysis, mfenkf_tree_analysis, perturb_observations,
    AnalysisReport, KalmanGain, ObservationSpec,
};
pub use control::{
    anomaly_gain_scale, fixed_fraction_gain, general_optimal_gain, optimal_gain_single,
    total_variate_cov_full, total_variate_cov_reduced, total_variate_ensemble, total_variate_mean,
    GainMode, GainSpec, VariateTriple,
};
pub use error::{Error, Result};
pub use forecast::{
    cross_cov_swap, propagate_forest, propagate_tree, ForecastReport, ForestState, TreeState,
};
pub use forest::{
    forest_average_cov, forest_average_mean, validate_forest, ModelForest, ModelIndex, ModelNode,
};
pub use operator::{Model, Operator, SharedModel, SharedOperator};
pub use scalar::Real;
pub use stats::{anomalies, cross_cov, ensemble_mean, inflate, Ensemble, SpaceId, StateVector};

pub type Ensemble64 = Ensemble<f64>;
pub type StateVector64 = StateVector<f64>;
pub type GainSpec64 = GainSpec<f64>;
pub type ModelNode64 = ModelNode<f64>;
pub type ModelForest64 = ModelForest<f64>;
pub type ForestState64 = ForestState<f64>;
pub type ObservationSpec64 = ObservationSpec<f64>;
