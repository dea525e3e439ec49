pub mod engine;
pub mod lifecycle;
pub mod metrics;
pub mod routing;
pub mod scenario;
pub mod sim;
pub mod topology;
pub mod workload;
