//! Fay-Herriot small area estimation of prevalences from weighted survey
//! records.
//!
//! The pipeline runs in four stages: Hájek direct estimates per area
//! ([`direct`]), generalized-variance-function smoothing of their design
//! variances ([`gvf`]), a REML fit of the area-level model ([`fh`]), and
//! EBLUP prediction with Prasad-Rao MSE. [`pipeline`] chains them, [`sim`]
//! generates synthetic populations with known truth.

pub mod direct;
pub mod error;
pub mod fh;
pub mod gvf;
pub mod io;
pub mod linalg;
pub mod model;
pub mod output;
pub mod pipeline;
pub mod sim;

pub use direct::{AreaDirect, AreaId, UnitRecord};
pub use error::{Error, Result, Stage};
pub use fh::{AreaModelRow, FhFit};
pub use gvf::{GvfDesign, GvfFit};
pub use model::FittedModel;
pub use pipeline::{AreaTable, PipelineOptions, PipelineOutput, ResultRow};
