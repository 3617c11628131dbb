pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod fusion;
pub mod kgdata;
pub mod model;
pub mod optim;
pub mod sampling;
pub mod scoring;
pub mod synthetic;
pub mod train;
