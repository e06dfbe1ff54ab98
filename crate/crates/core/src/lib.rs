pub mod augment;
pub mod autodiff;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod real;
pub mod roi;
pub mod uncertainty;
pub mod volume;
