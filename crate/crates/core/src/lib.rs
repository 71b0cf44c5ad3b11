//! Core library for joint PJND and JND-critical region studies: distortion
//! ladders, gold-standard synthesis, criticality maps, the HIT protocol, the
//! event-sourced study engine, quality control and simulated observers.

pub mod config;
pub mod critmap;
pub mod goldgen;
pub mod imaging;
pub mod protocol;
pub mod qc;
pub mod simobserver;
pub mod study;
