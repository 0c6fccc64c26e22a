//! Simulator for decentralized federated averaging over complex networks
//! with controlled corruption of local training data.

pub mod chart;
pub mod config;
pub mod corruption;
pub mod dataset;
pub mod experiment;
pub mod localtrain;
pub mod metrics;
pub mod neuralnet;
pub mod protocol;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod topology;
