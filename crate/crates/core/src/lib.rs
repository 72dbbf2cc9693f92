pub mod bench;
pub mod comparator;
pub mod engine;
pub mod error;
pub mod kernel;
pub mod io;
pub mod mask;
pub mod matrix;
pub mod pattern;
pub mod pool;
pub mod prune;
pub mod score;
pub mod trainer;
