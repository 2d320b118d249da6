pub mod builders;
pub mod cli;
pub mod eval;
pub mod interleave;
pub mod model;
pub mod seed;
pub mod stats;
pub mod synth;
