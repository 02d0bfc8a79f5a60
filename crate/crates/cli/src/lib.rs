//! Command line workflows and the live-steering service.

pub mod commands;
pub mod config;
pub mod frames;
pub mod service;
