//! Two-tier quality gating for self-captured anterior-segment eye images.
//!
//! Tier 1 checks that an open eye is present, tier 2 that it is adequately
//! lit. The crate also carries the experiment harness used to develop and
//! score the tier detectors.

pub mod cascade;
pub mod detector;
pub mod imaging;
pub mod metrics;
pub mod protocol;
pub mod synthgen;
