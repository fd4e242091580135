//! Oracles shared by the property tests and the acceptance suite. Each test
//! target uses only part of this module.
#![allow(dead_code)]

pub mod merge;
pub mod reconcile;
