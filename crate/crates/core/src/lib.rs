pub mod agent;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod estimation;
pub mod link;
pub mod neural;
pub mod runtime;
pub mod safeguard;
pub mod task;
