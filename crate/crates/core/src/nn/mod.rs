//! Minimal f64 tensor autodiff: tape, ops, and parameter store.

pub mod ops;
pub mod params;
pub mod tape;

pub use ops::{softmax_rows, sum_vars};
pub use params::{Binder, ParamStore};
pub use tape::{Arr, GradStore, Tape, Var};
