//! Coarse-grained and extreme coarse-grained correlation matrices of equity
//! return panels, market-state clustering and state dynamics.
//!
//! The pipeline runs in stages that can be used on their own:
//!
//! * [`ingest`]: price and sector tables, the consecutive-gap stock filter.
//! * [`returns`] and [`correlation`]: log returns under the missing-quote
//!   rules and rolling-epoch Pearson matrices.
//! * [`coarse`]: sectorial, two-block and random-split partitions and block
//!   averaging.
//! * [`spectral`]: average correlation, eigenvalues, element moments and
//!   series cross-correlation.
//! * [`states`]: k-means market states ordered by average correlation.
//! * [`dynamics`]: transition matrices, equilibrium, band mass and a
//!   Chapman-Kolmogorov consistency gap.
//! * [`synth`]: planted-regime factor model data.
//! * [`pipeline`] and [`figures`]: configuration-driven orchestration and
//!   SVG output.
//!
//! Epoch-level work is data parallel. With the `parallel` feature (on by
//! default) it runs on rayon; [`Exec::Sequential`] forces a single thread and
//! produces identical results.

pub mod coarse;
pub mod correlation;
pub mod dynamics;
mod error;
mod exec;
pub mod figures;
pub mod ingest;
mod matrix;
pub mod pipeline;
pub mod returns;
pub mod spectral;
pub mod states;
pub mod svg;
pub mod synth;
mod util;

pub use error::{Error, Result};
pub use exec::Exec;
pub use matrix::SquareMatrix;
