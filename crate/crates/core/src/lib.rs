#![no_std]
extern crate alloc;

pub mod agent;
pub mod cep;
pub mod event;
pub mod mqtt;
pub mod node;
pub mod pattern;
