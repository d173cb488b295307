//! Benchmark suite for eight-class protein secondary structure prediction:
//! container ingest and hygiene auditing, residue featurization, a zoo of six
//! sequence-labeling architectures, training, probability-averaging
//! ensembles, and the evaluation metrics they are reported with.

pub mod archzoo;
pub mod data;
pub mod featurize;
pub mod nn;
pub mod npy;
pub mod synth;
pub mod vocab;
