//! Counterfactual policy mean embeddings for distributional off-policy
//! evaluation: kernel nuisance models, plug-in and doubly robust embeddings,
//! the doubly robust kernel policy test, kernel herding and evaluation metrics.

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod data;
pub mod embedding;
pub mod error;
pub mod herding;
pub mod kernels;
pub mod metrics;
pub mod nuisance;
pub mod stats;
pub mod studies;
pub mod testing;

pub use data::{
    generate, oracle_outcomes, stream_rng, Action, ActionSpace, ConditionalDensity, LoggedDataset,
    Policy, Scenario, ScenarioKind, ScenarioSpec,
};
pub use error::{Error, Result};
pub use kernels::{KernelFamily, KernelSpec, PointSet};
pub use nuisance::{
    fit_cme, fit_propensity, select_lambda_cv, select_lambda_cv_with, CmeModel, CvLoss, KernelTriple,
    LambdaChoice, PropensityModel,
};
pub use embedding::{
    dr_embedding, eif_difference_atoms, plugin_embedding, DrOptions, DrawSharing, EifAtoms,
    EmbeddingFunctional,
};
pub use herding::{empirical_embedding, herd, Grid, HerdConfig};
pub use metrics::{mmd2_unbiased, mmd_between_embeddings, wasserstein1d, DistanceReport};
pub use testing::{dr_kpt, kpt_permutation, pt_linear, run_study, DrKptConfig, Method, TestResult};
pub use studies::{run_herd_study, run_ope_study, HerdStudyConfig, OpeStudyConfig};
