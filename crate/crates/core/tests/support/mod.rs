#![allow(dead_code)]

pub mod graphops;
pub mod opacity;
pub mod qmodel;
pub mod serial;
pub mod shadow;
