pub mod bench;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod fp16;
pub mod gradcheck;
pub mod index;
pub mod losses;
pub mod mining;
pub mod projection;
pub mod rng;
pub mod scoring;
pub mod train;
pub mod types;
