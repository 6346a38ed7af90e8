//! Edge–cloud cooperative positioning over a bit-constrained fronthaul.
//!
//! The crate simulates a small cooperative-positioning system end to end:
//! wideband multipath channels observed at several base stations, LMMSE CSI
//! estimation from uplink pilots, per-station encoders that compress the
//! stabilized CSI into quantized latent messages, and a central unit that
//! fuses the messages with channel-aware masked attention and accumulates
//! evidence across subcarriers with an LSTM to regress the 3-D user
//! position. Training runs in two stages — self-supervised per-station
//! embedding learning, then end-to-end fine-tuning through the quantizer
//! with a straight-through estimator — on the crate's own reverse-mode
//! autodiff tape.
//!
//! Everything downstream of a run seed is bit-reproducible: sample streams
//! are keyed by (seed, stream, index), parameters update in name order, and
//! checkpoints and reports serialize deterministically.

pub mod autodiff;
pub mod channel;
pub mod codec;
pub mod config;
pub mod encoder;
pub mod estimation;
pub mod eval;
pub mod fusion;
pub mod linalg;
pub mod preprocess;
pub mod seeds;
pub mod training;
