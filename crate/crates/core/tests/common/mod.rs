#![allow(dead_code)]

pub mod gradcheck;
pub mod fixtures;
pub mod gp_oracle;
pub mod synthetic;
