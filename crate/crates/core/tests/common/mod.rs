#![allow(dead_code)]

pub mod chain;
pub mod fao56;
pub mod functional;
pub mod integrals;
pub mod kb;
pub mod seasons;
pub mod trees;
