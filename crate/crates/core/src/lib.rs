pub mod association;
pub mod descriptor;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod optimizer;
pub mod simulator;
pub mod weighting;
