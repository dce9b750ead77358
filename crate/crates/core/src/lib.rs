#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod analysis;
pub mod constants;
pub mod engine;
pub mod eseem;
pub mod hamiltonian;
pub mod noise;
pub mod sequence;
pub mod spin;
