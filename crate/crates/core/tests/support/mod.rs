#![allow(dead_code)]
pub mod naive_conv;
