//! HTTP assessment service and command-line driver.

pub mod commands;
pub mod config;
pub mod models;
pub mod service;

pub use config::{ServiceConfig, TierBackend, TierConfig, CONFIG_ENV};
pub use models::{detector_from_path, load_tier, LoadedDetector};
pub use service::{router, AppState};
