//! Multimodality stacking for right-censored survival data with blockwise
//! missing modalities.
//!
//! A cohort is a feature matrix partitioned into sources (modalities). For
//! each source, a set of survival base learners is trained, their
//! out-of-fold risk scores are gathered into a compact score matrix, and a
//! meta-learner is fitted on that matrix. Rows that lack a whole source get
//! missing score cells, which are then either imputed (`plain`), avoided by
//! imputing the raw features first (`imp`), or routed natively by a
//! missing-aware survival forest (`mia`).
//!
//! The crate also carries everything needed to evaluate the approach:
//! nonparametric estimators, concordance and IPCW Brier metrics, repeated
//! stratified cross-validation, paired signed-rank testing with FDR control,
//! and a synthetic cohort generator.

pub mod cohort;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod impute;
pub mod kv;
pub mod learners;
pub mod metrics;
pub mod seeds;
pub mod simulate;
pub mod special;
pub mod stacking;
pub mod survival;

mod serde_nan;

pub use cohort::{Cohort, MissingnessProfile, ModalityManifest, Source, SurvivalOutcome};
pub use error::{MsbError, Result};
pub use learners::{FittedLearner, LearnerKind, LearnerSpec};
pub use stacking::{FittedMsb, MsbConfig, Variant};
pub use survival::StepCurve;
