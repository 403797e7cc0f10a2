//! Desk-scale laboratory for adaptive, progressive image transmission over
//! simulated Rayleigh fading channels.
//!
//! The crate wires together a fading channel with a per-slot bit-budget rate
//! model, two progressive codecs (an importance-masked channelized codec and a
//! residual-vector-quantization codec), a non-progressive quality-factor
//! baseline, a slot scheduler, and throughput/latency/quality analytics.

pub mod channel;
pub mod entropy;
pub mod imageio;
pub mod masking;
pub mod metrics;
pub mod observer;
pub mod rvq;
pub mod scheduler;
pub mod simulator;
pub mod synth;

pub use imageio::ImageBuffer;
