// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affine;
pub mod annotation;
pub mod cli;
pub mod deformation;
pub mod evaluation;
pub mod geometry;
pub mod obb;
pub mod pipeline;
pub mod raster;
pub mod review_server;
pub mod screening;
