//! Flow-field engine for wide-angle portrait video correction.
//!
//! The crate covers the whole numeric path from per-frame correction flows to
//! temporally smooth ones:
//!
//! - [`field`]: grids, rasters, flow fields with direction tags, bilinear
//!   resampling and backward warping.
//! - [`synth`]: a synthetic wide-angle world with analytic
//!   perspective/stereographic correction flows, scenes, jitter and masks.
//! - [`interflow`]: coarse-to-fine Horn–Schunck and Middlebury `.flo` I/O.
//! - [`losses`]: image-stage and video-stage losses with analytic gradients.
//! - [`trajectory`]: per-pair residuals, cumulative correction trajectories
//!   and similarity fits.
//! - [`ddim`]: deterministic DDIM sampling over flow fields.
//! - [`adapt`]: gradient-descent smoothing of per-frame correction flows.
//! - [`metrics`]: LineAcc, ShapeAcc and the FFT stability score.

pub mod adapt;
pub mod ddim;
pub mod error;
pub mod field;
pub mod imageio;
pub mod interflow;
pub mod losses;
pub mod metrics;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
pub use field::{
    compose_displaced, make_grid, sample_bilinear, warp_backward, BorderPolicy, Direction, FlowField, Frame, Grid,
    Mask, Raster, VectorField,
};
