pub mod bench;
pub mod eval;
pub mod pmi;
pub mod predict;
pub mod synth;
pub mod validate;
