pub mod autodiff;
pub mod geometry;
pub mod seed;
pub mod synthworld;
pub mod detector;
pub mod eval;
pub mod box_adaptor;
pub mod cat_adaptor;
pub mod pipeline;
pub mod cli;
