pub mod cli;
pub mod estimator;
pub mod explorer;
pub mod gprf;
pub mod msm;
pub mod spatial;
pub mod world;
