pub mod ablate;
pub mod eval;
pub mod inspect;
pub mod synth;
pub mod train;
