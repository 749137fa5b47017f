pub mod analysis;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod embeddings;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod training;
pub mod vecmath;
