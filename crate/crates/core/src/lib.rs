//! Hybrid physics/neural surrogate models trained and corrected with
//! variational data assimilation on two-scale Lorenz dynamics.

pub mod diffcore;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod io;
pub mod kernels;
pub mod network;
pub mod seed;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
