pub mod autodiff;
pub mod cli;
pub mod data;
pub mod hooks;
pub mod model;
pub mod orchestrator;
pub mod planner;
pub mod registry;
pub mod rng;
pub mod telemetry;
