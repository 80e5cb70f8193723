pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cubes;
pub mod eval;
pub mod lie;
pub mod model;
pub mod nets;
pub mod par;
pub mod perturb;
pub mod raster;
pub mod train;
pub mod warp;
