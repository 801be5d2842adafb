pub mod bench;
pub mod model;
pub mod netlab;
pub mod planner;
pub mod relay;
pub mod timing;
