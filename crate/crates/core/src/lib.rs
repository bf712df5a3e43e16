pub mod cli;
pub mod composition;
pub mod convnet;
pub mod distance;
pub mod eval;
pub mod graph;
pub mod phantom;
pub mod pipeline;
pub mod segmentation;
pub mod volume;
