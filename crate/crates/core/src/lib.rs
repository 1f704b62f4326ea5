// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoder;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod ngram;
pub mod ot;
pub mod train;
pub mod vocab;
