#![allow(dead_code)]

pub mod gradcheck;
pub mod metrics;
pub mod oracles;
pub mod raster;
