//! Deterministic simulator of federated cued-speech recognition.
//!
//! A server-side linguistic model (shared phoneme embedding plus a Bi-LSTM
//! seq2seq) and per-client visual models (lip / hand-shape / hand-position
//! front-ends with a small attention stack) train under mutual knowledge
//! distillation on synthetic multi-cuer data. FedAvg, FedProx, FedBN and a
//! pooled-data baseline run on the same protocol plumbing for comparison.
//!
//! Everything is f64 and seeded: given the same config, two runs produce
//! bit-identical parameter trajectories and metric files.

pub mod config;
pub mod data;
pub mod eval;
pub mod fed;
pub mod harness;
pub mod loss;
pub mod nn;
pub mod rng;
pub mod tensor;
