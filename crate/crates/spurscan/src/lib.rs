//! Measure how much byte-level PE malware detectors rely on regions an
//! adversary controls for free.
//!
//! The pipeline: parse a PE file into a disjoint, exhaustive region map
//! ([`pe_map`]), run a byte-level CNN detector ([`nn`]), attribute its
//! score back to input bytes with integrated gradients ([`ig`]), and
//! partition the attribution mass across file regions ([`scoring`]).
//! Supporting pieces: dataset handling ([`corpus`]), synthetic corpora
//! with planted correlations plus a toy trainer ([`synth`]), report
//! emission ([`report`]), and the command-line front end ([`cli`]).

pub mod cli;
pub mod corpus;
pub mod ig;
pub mod nn;
pub mod pe_map;
pub mod report;
pub mod scoring;
pub mod synth;

#[cfg(test)]
pub(crate) mod testutil;
