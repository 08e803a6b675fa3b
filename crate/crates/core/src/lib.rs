//! Desk-scale streaming speech translation testbed.
//!
//! The library trains a toy offline speech-to-text translation model on a
//! synthetic corpus, then adapts it to streaming inference two ways:
//!
//! * future-aware inference: appending trainable mask embeddings to the
//!   streaming prefix so the acoustic encoder can "imagine" future context;
//! * future-aware distillation: teaching a student encoder, which only sees
//!   the prefix plus mask embeddings, to match a frozen teacher that sees
//!   real future frames.
//!
//! Streaming decisions follow a wait-k policy counted in detected acoustic
//! units (integrate-and-fire boundaries), and evaluation reports corpus BLEU
//! together with the AL / AP / DAL latency metrics over delay traces.
//!
//! Everything is f64 and deterministic: fixed seeds give byte-identical
//! corpora, training runs, and metric files.

pub mod ckpt;
pub mod cif;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fad;
pub mod gap;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
