pub mod backend;
pub mod http;
pub mod scoring;
pub mod episode;
pub mod envs;
pub mod dataset;
pub mod harness;
pub mod service;
