pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod losses;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod seed;
pub mod train;
