//! Variable-length grouped activation format: conversion, storage layout,
//! bit-serial arithmetic, precision search and accelerator modeling.

pub mod apu;
pub mod bops;
pub mod bpc;
pub mod error;
pub mod layout;
pub mod matrix;
pub mod numfmt;
pub mod search;
pub mod sim;
pub mod weights;
pub mod workload;

pub use error::{Error, Result};
