//! Motion-capture to robot data pipeline and simulated rollout harness.

pub mod calibration;
pub mod control;
pub mod dataset;
pub mod geometry;
pub mod hitl;
pub mod ingest;
pub mod kinematics;
pub mod perception;
pub mod policy;
pub mod pipeline;
pub mod synth;
pub mod config;
pub mod service;
